//! Diagnostics on simulated paths.

use std::path::Path;

use crate::autodiff::{Backend, Eager, Matrix};
use crate::error::{invalid, Result};
use crate::stats::{chunked, estimate, Estimate};

use super::{simulate_rows, ModelSpec, TimeGrid};

/// Largest observed ratios to the algebraic taming bounds; both are at
/// most one by construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TamingReport {
    /// `max |tamed drift · Δt| / √Δt`.
    pub max_drift_ratio: f64,
    /// `max |tamed diffusion| · √Δt`.
    pub max_diffusion_ratio: f64,
}

impl TamingReport {
    pub fn holds(&self) -> bool {
        // x / (1 + x) can round up to exactly 1 for huge x.
        let tol = 1.0 + 4.0 * f64::EPSILON;
        self.max_drift_ratio <= tol && self.max_diffusion_ratio <= tol
    }
}

fn row_norms(m: &Matrix) -> impl Iterator<Item = f64> + '_ {
    (0..m.rows()).map(move |i| m.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Re-evaluates the tamed coefficients along stored paths.
pub fn taming_bound_check(model: &ModelSpec, grid: &TimeGrid, s: &[Matrix], v: Option<&[Matrix]>) -> Result<TamingReport> {
    if s.len() != grid.times().len() {
        return Err(invalid("path length does not match the grid"));
    }
    let mut be = Eager::new();
    let mut report = TamingReport {
        max_drift_ratio: 0.0,
        max_diffusion_ratio: 0.0,
    };
    for k in 0..grid.n_steps() {
        let dt = grid.dt(k);
        let sk = be.constant(s[k].clone());
        let vk = v.map(|vs| be.constant(vs[k].clone()));
        let c = model.coefficients(&mut be, grid.times()[k], dt, &sk, vk.as_ref())?;
        for n in row_norms(be.value(&c.drift_increment)) {
            report.max_drift_ratio = report.max_drift_ratio.max(n / dt.sqrt());
        }
        for n in row_norms(be.value(&c.diffusion)) {
            report.max_diffusion_ratio = report.max_diffusion_ratio.max(n * dt.sqrt());
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MartingaleReport {
    /// Estimate of `E[e^{-rT} S_T]`.
    pub discounted: Estimate,
    pub s0: f64,
}

impl MartingaleReport {
    /// Deviation from `S_0` in standard errors.
    pub fn z_score(&self) -> f64 {
        (self.discounted.mean - self.s0) / self.discounted.stderr
    }

    pub fn within(&self, stderrs: f64) -> bool {
        self.z_score().abs() <= stderrs
    }
}

/// Monte Carlo check that `e^{-rt} S_t` keeps its initial mean.
pub fn martingale_check(model: &ModelSpec, grid: &TimeGrid, n: usize, seed: u64, antithetic: bool) -> Result<MartingaleReport> {
    let disc = (-model.r() * grid.horizon()).exp();
    let parts = chunked(n, 8192, |rows| {
        let mut be = Eager::new();
        let batch = simulate_rows(&mut be, model, grid, n, rows, seed, antithetic)?;
        let last = batch.s.last().unwrap();
        Ok(be.value(last).as_slice().iter().map(|&x| disc * x).collect::<Vec<f64>>())
    })?;
    Ok(MartingaleReport {
        discounted: estimate(&parts.concat(), antithetic)?,
        s0: model.s0(),
    })
}

/// Writes `path,step,time,s[,v]` rows for debugging.
pub fn write_paths_csv(path: &Path, times: &[f64], s: &[Matrix], v: Option<&[Matrix]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["path", "step", "time", "s"];
    if v.is_some() {
        header.push("v");
    }
    w.write_record(&header)?;
    let rows = s.first().map_or(0, |m| m.rows());
    for i in 0..rows {
        for (k, t) in times.iter().enumerate() {
            let mut rec = vec![i.to_string(), k.to_string(), format!("{t:.16e}"), format!("{:.16e}", s[k].get(i, 0))];
            if let Some(vs) = v {
                rec.push(format!("{:.16e}", vs[k].get(i, 0)));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
