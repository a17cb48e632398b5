//! Neural LV / LSV dynamics and their tamed Euler simulation.

mod checks;
mod model;

pub use checks::{martingale_check, taming_bound_check, write_paths_csv, MartingaleReport, TamingReport};
pub use model::{ModelConfig, ModelKind, ModelSpec};

use std::ops::Range;

use crate::autodiff::{Backend, Matrix};
use crate::error::{invalid, Result};
use crate::nets::TIME_EPS;
use crate::rng::{antithetic_source, PathStreams};

/// Default number of uniform steps per year.
pub const STEPS_PER_YEAR: usize = 96;

/// Simulation times `0 = t_0 < t_1 < ... < t_n = T` in years.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with `round(T · steps_per_year)` steps (at least one).
    pub fn uniform(horizon: f64, steps_per_year: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) || steps_per_year == 0 {
            return Err(invalid(format!(
                "bad grid: horizon {horizon}, {steps_per_year} steps per year"
            )));
        }
        let n = ((horizon * steps_per_year as f64).round() as usize).max(1);
        Ok(Self {
            times: (0..=n).map(|k| horizon * k as f64 / n as f64).collect(),
        })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("grid times must start at 0 and increase strictly"));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    /// Index of the grid point equal to `t` (within rounding).
    pub fn index_of(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= TIME_EPS * t.abs().max(1.0))
            .ok_or_else(|| invalid(format!("time {t} is not on the simulation grid")))
    }

    /// Grid truncated at `t`, which must be a grid point.
    pub fn truncated(&self, t: f64) -> Result<Self> {
        let k = self.index_of(t)?;
        if k == 0 {
            return Err(invalid("cannot truncate a grid at time 0"));
        }
        Ok(Self {
            times: self.times[..=k].to_vec(),
        })
    }
}

/// Brownian increments `ΔW_k` for `rows` out of `total` paths, one
/// `rows × components` matrix per step, already scaled by `√Δt_k`.
pub fn brownian_increments(
    grid: &TimeGrid,
    total: usize,
    rows: Range<usize>,
    components: usize,
    seed: u64,
    antithetic: bool,
) -> Result<Vec<Matrix>> {
    if antithetic && total % 2 != 0 {
        return Err(invalid(format!("antithetic sampling needs an even batch, got {total}")));
    }
    if rows.end > total || rows.is_empty() {
        return Err(invalid(format!("row range {rows:?} outside batch of {total}")));
    }
    let steps = grid.n_steps();
    let n = rows.len();
    let mut out: Vec<Matrix> = (0..steps).map(|_| Matrix::zeros(n, components)).collect();
    let streams = PathStreams::new(seed);
    let sq: Vec<f64> = (0..steps).map(|k| grid.dt(k).sqrt()).collect();
    let mut buf = vec![0.0; steps * components];
    for (r, i) in rows.enumerate() {
        let (stream, sign) = antithetic_source(i, total, antithetic);
        streams.fill_path(stream, steps, components, &mut buf);
        for k in 0..steps {
            for c in 0..components {
                out[k].set(r, c, sign * sq[k] * buf[k * components + c]);
            }
        }
    }
    Ok(out)
}

/// Simulated trajectories on one backend.
#[derive(Clone, Debug)]
pub struct PathBatch<A> {
    pub times: Vec<f64>,
    /// Asset values per grid time, each `n × 1`.
    pub s: Vec<A>,
    /// Variance factor per grid time (LSV only).
    pub v: Option<Vec<A>>,
    /// Copies of `s` and `v` carrying no parameter dependence.
    pub s_detached: Vec<A>,
    pub v_detached: Option<Vec<A>>,
    /// Independent increments per step: `(ΔW)` for LV, `(ΔZ, ΔW^V)` for LSV.
    pub dw: Vec<Matrix>,
    pub rows: usize,
}

impl<A: Clone> PathBatch<A> {
    /// Plain values of the detached asset and variance paths.
    pub fn values<B: Backend<Array = A>>(&self, be: &B) -> (Vec<Matrix>, Option<Vec<Matrix>>) {
        let s = self.s_detached.iter().map(|x| be.value(x).clone()).collect();
        let v = self
            .v_detached
            .as_ref()
            .map(|vs| vs.iter().map(|x| be.value(x).clone()).collect());
        (s, v)
    }
}

/// Tamed drift and diffusion evaluated at `(t, S, V)`.
pub(crate) struct Coefficients<A> {
    /// Tamed drift times `Δt`: `n × d`.
    pub drift_increment: A,
    /// Tamed diffusion, one column per state component: `n × d`.
    pub diffusion: A,
}

/// Simulates `rows` of a `total`-path batch with the tamed Euler scheme.
#[allow(clippy::too_many_arguments)]
pub fn simulate_rows<B: Backend>(
    be: &mut B,
    model: &ModelSpec,
    grid: &TimeGrid,
    total: usize,
    rows: Range<usize>,
    seed: u64,
    antithetic: bool,
) -> Result<PathBatch<B::Array>> {
    if total < 2 {
        return Err(invalid("at least two paths are required"));
    }
    if grid.horizon() > model.horizon() * (1.0 + TIME_EPS) {
        return Err(invalid(format!(
            "grid horizon {} exceeds the last model maturity {}",
            grid.horizon(),
            model.horizon()
        )));
    }
    let n = rows.len();
    let lsv = model.kind() == ModelKind::Lsv;
    let dw = brownian_increments(grid, total, rows, if lsv { 2 } else { 1 }, seed, antithetic)?;

    let mut s = be.constant(Matrix::filled(n, 1, model.s0()));
    let mut v = if lsv { Some(model.initial_variance(be, n)?) } else { None };
    let mut s_path = vec![s.clone()];
    let mut v_path = v.as_ref().map(|x| vec![x.clone()]);
    let rho_terms = if lsv { Some(model.correlation_terms(be)?) } else { None };

    for k in 0..grid.n_steps() {
        let t = grid.times()[k];
        let dt = grid.dt(k);
        let c = model.coefficients(be, t, dt, &s, v.as_ref())?;
        match (&mut v, &rho_terms) {
            (None, _) => {
                let dwk = be.constant(dw[k].clone());
                let noise = be.mul(&c.diffusion, &dwk)?;
                let step = be.add(&c.drift_increment, &noise)?;
                s = be.add(&s, &step)?;
            }
            (Some(vk), Some((rho, rho_bar))) => {
                let dz = be.constant(Matrix::column(dw[k].col_values(0)));
                let dwv = be.constant(Matrix::column(dw[k].col_values(1)));
                let a = be.mul(rho, &dwv)?;
                let b = be.mul(rho_bar, &dz)?;
                let dws = be.add(&a, &b)?;
                let ds_noise = be.columns(&c.diffusion, 0, 1)?;
                let ds_noise = be.mul(&ds_noise, &dws)?;
                let dv_noise = be.columns(&c.diffusion, 1, 2)?;
                let dv_noise = be.mul(&dv_noise, &dwv)?;
                let ds_drift = be.columns(&c.drift_increment, 0, 1)?;
                let dv_drift = be.columns(&c.drift_increment, 1, 2)?;
                let ds = be.add(&ds_drift, &ds_noise)?;
                let dv = be.add(&dv_drift, &dv_noise)?;
                s = be.add(&s, &ds)?;
                *vk = be.add(vk, &dv)?;
            }
            (Some(_), None) => unreachable!("correlation terms exist for LSV"),
        }
        s_path.push(s.clone());
        if let (Some(vp), Some(vk)) = (&mut v_path, &v) {
            vp.push(vk.clone());
        }
    }

    let s_detached = s_path.iter().map(|x| be.detach(x)).collect();
    let v_detached = v_path
        .as_ref()
        .map(|vp| vp.iter().map(|x| be.detach(x)).collect());
    Ok(PathBatch {
        times: grid.times().to_vec(),
        s: s_path,
        v: v_path,
        s_detached,
        v_detached,
        dw,
        rows: n,
    })
}

/// Simulates a whole batch of `n` paths.
pub fn simulate<B: Backend>(
    be: &mut B,
    model: &ModelSpec,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
    antithetic: bool,
) -> Result<PathBatch<B::Array>> {
    simulate_rows(be, model, grid, n, 0..n, seed, antithetic)
}
