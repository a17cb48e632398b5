//! Heston Monte Carlo target generation.

use crate::error::{invalid, Result};
use crate::nets::TIME_EPS;
use crate::rng::{antithetic_source, PathStreams};
use crate::sde::STEPS_PER_YEAR;
use crate::stats::{chunked, estimate, Estimate};

use super::surface::{LookbackQuote, MarketSurface, Quote};

/// `dX = rX dt + √V X dW^X`, `dV = κ(μ - V) dt + η √V dW^V`, `d⟨W^X, W^V⟩ = ρ dt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HestonParams {
    pub x0: f64,
    pub r: f64,
    pub kappa: f64,
    pub mu: f64,
    pub eta: f64,
    pub v0: f64,
    pub rho: f64,
}

impl Default for HestonParams {
    fn default() -> Self {
        Self {
            x0: 1.0,
            r: 0.025,
            kappa: 0.78,
            mu: 0.11,
            eta: 0.68,
            v0: 0.04,
            rho: 0.044,
        }
    }
}

impl HestonParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.kappa, self.mu, self.eta, self.v0];
        if !(self.x0 > 0.0) || nonneg.iter().any(|v| !(*v >= 0.0)) || !self.r.is_finite() {
            return Err(invalid(format!("invalid Heston parameters {self:?}")));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(invalid(format!("Heston correlation {} outside (-1, 1)", self.rho)));
        }
        Ok(())
    }
}

/// Discretization of the Heston dynamics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HestonScheme {
    /// Euler with full truncation: `max(V, 0)` in every coefficient.
    Euler,
    /// The same coefficients passed through row-wise taming.
    Tamed,
}

/// Simulation settings for Heston targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HestonSim {
    pub params: HestonParams,
    /// Coarse grid resolution; maturities must lie on this grid.
    pub steps_per_year: usize,
    /// Fine steps per coarse step. The lookback maximum is monitored on
    /// the fine grid.
    pub substeps: usize,
    pub scheme: HestonScheme,
    pub antithetic: bool,
}

impl Default for HestonSim {
    fn default() -> Self {
        Self {
            params: HestonParams::default(),
            steps_per_year: STEPS_PER_YEAR,
            substeps: 1,
            scheme: HestonScheme::Euler,
            antithetic: true,
        }
    }
}

/// Per-path terminal values and running maxima at each requested maturity.
#[derive(Clone, Debug)]
pub struct HestonSamples {
    pub maturities: Vec<f64>,
    /// `terminal[m][i]`: `X_{T_m}` on path `i`.
    pub terminal: Vec<Vec<f64>>,
    /// `running_max[m][i]`: maximum of `X` over monitoring times up to `T_m`.
    pub running_max: Vec<Vec<f64>>,
    pub antithetic: bool,
}

impl HestonSim {
    fn coarse_index(&self, t: f64) -> Result<usize> {
        let k = (t * self.steps_per_year as f64).round();
        if k < 1.0 || (k / self.steps_per_year as f64 - t).abs() > TIME_EPS * t.max(1.0) {
            return Err(invalid(format!(
                "maturity {t} is not on the {}-per-year grid",
                self.steps_per_year
            )));
        }
        Ok(k as usize)
    }

    /// Simulates `n` paths and records what the payoffs need.
    pub fn sample(&self, maturities: &[f64], n: usize, seed: u64) -> Result<HestonSamples> {
        self.params.validate()?;
        crate::nets::validate_maturities(maturities)?;
        if self.substeps == 0 || self.steps_per_year == 0 {
            return Err(invalid("step counts must be positive"));
        }
        if n < 2 || (self.antithetic && n % 2 != 0) {
            return Err(invalid(format!("bad path count {n} (antithetic: {})", self.antithetic)));
        }
        let stops: Vec<usize> = maturities
            .iter()
            .map(|&t| self.coarse_index(t).map(|k| k * self.substeps))
            .collect::<Result<_>>()?;
        let fine = *stops.last().unwrap();
        let dt = 1.0 / (self.steps_per_year * self.substeps) as f64;
        let p = self.params;
        let (sq_dt, rho_bar) = (dt.sqrt(), (1.0 - p.rho * p.rho).sqrt());
        let streams = PathStreams::new(seed);
        let tamed = self.scheme == HestonScheme::Tamed;
        let m = maturities.len();

        let parts = chunked(n, 4096, |rows| {
            let mut term = vec![Vec::with_capacity(rows.len()); m];
            let mut maxs = vec![Vec::with_capacity(rows.len()); m];
            let mut z = vec![0.0; fine * 2];
            for i in rows {
                let (stream, sign) = antithetic_source(i, n, self.antithetic);
                streams.fill_path(stream, fine, 2, &mut z);
                let (mut x, mut v, mut mx) = (p.x0, p.v0, p.x0);
                let mut next = 0;
                for k in 0..fine {
                    let (zx, zv) = (sign * z[2 * k], sign * z[2 * k + 1]);
                    let dwv = sq_dt * zv;
                    let dwx = sq_dt * (p.rho * zv + rho_bar * zx);
                    let vp = v.max(0.0);
                    let sv = vp.sqrt();
                    let (mut bx, mut bv) = (p.r * x, p.kappa * (p.mu - vp));
                    let (mut sx, mut svv) = (sv * x, p.eta * sv);
                    if tamed {
                        let db = 1.0 + (bx * bx + bv * bv).sqrt() * sq_dt;
                        let ds = 1.0 + (sx * sx + svv * svv).sqrt() * sq_dt;
                        bx /= db;
                        bv /= db;
                        sx /= ds;
                        svv /= ds;
                    }
                    x += bx * dt + sx * dwx;
                    v += bv * dt + svv * dwv;
                    mx = mx.max(x);
                    while next < m && stops[next] == k + 1 {
                        term[next].push(x);
                        maxs[next].push(mx);
                        next += 1;
                    }
                }
            }
            Ok((term, maxs))
        })?;

        let mut terminal = vec![Vec::with_capacity(n); m];
        let mut running_max = vec![Vec::with_capacity(n); m];
        for (t, mx) in parts {
            for j in 0..m {
                terminal[j].extend_from_slice(&t[j]);
                running_max[j].extend_from_slice(&mx[j]);
            }
        }
        if terminal.iter().flatten().any(|v| !v.is_finite()) {
            return Err(crate::error::Error::NonFinite { op: "heston" });
        }
        Ok(HestonSamples {
            maturities: maturities.to_vec(),
            terminal,
            running_max,
            antithetic: self.antithetic,
        })
    }
}

impl HestonSamples {
    fn discount(&self, m: usize, r: f64) -> f64 {
        (-r * self.maturities[m]).exp()
    }

    fn estimate_with(&self, m: usize, f: impl Fn(usize) -> f64) -> Result<Estimate> {
        let xs: Vec<f64> = (0..self.terminal[m].len()).map(f).collect();
        estimate(&xs, self.antithetic)
    }

    /// Discounted call price at maturity index `m`.
    pub fn call(&self, m: usize, k: f64, r: f64) -> Result<Estimate> {
        let d = self.discount(m, r);
        self.estimate_with(m, |i| d * (self.terminal[m][i] - k).max(0.0))
    }

    pub fn put(&self, m: usize, k: f64, r: f64) -> Result<Estimate> {
        let d = self.discount(m, r);
        self.estimate_with(m, |i| d * (k - self.terminal[m][i]).max(0.0))
    }

    /// Path-wise call minus put, `e^{-rT}(X_T - K)`.
    pub fn call_minus_put(&self, m: usize, k: f64, r: f64) -> Result<Estimate> {
        let d = self.discount(m, r);
        self.estimate_with(m, |i| d * (self.terminal[m][i] - k))
    }

    /// Discounted lookback `e^{-rT}(max X - X_T)`.
    pub fn lookback(&self, m: usize, r: f64) -> Result<Estimate> {
        let d = self.discount(m, r);
        self.estimate_with(m, |i| d * (self.running_max[m][i] - self.terminal[m][i]))
    }
}

/// Discounted call prices on a maturity × strike grid.
pub fn heston_mc_surface(sim: &HestonSim, maturities: &[f64], strikes: &[f64], n: usize, seed: u64) -> Result<MarketSurface> {
    if strikes.is_empty() || strikes.iter().any(|&k| !(k > 0.0)) {
        return Err(invalid("strikes must be positive and non-empty"));
    }
    let samples = sim.sample(maturities, n, seed)?;
    let mut quotes = Vec::with_capacity(maturities.len() * strikes.len());
    for (m, &t) in maturities.iter().enumerate() {
        for &k in strikes {
            let e = samples.call(m, k, sim.params.r)?;
            quotes.push(Quote {
                maturity: t,
                strike: k,
                price: e.mean,
                stderr: Some(e.stderr),
            });
        }
    }
    MarketSurface::new(quotes)
}

/// Discounted lookback prices per maturity.
pub fn heston_mc_lookback(sim: &HestonSim, maturities: &[f64], n: usize, seed: u64) -> Result<Vec<LookbackQuote>> {
    let samples = sim.sample(maturities, n, seed)?;
    maturities
        .iter()
        .enumerate()
        .map(|(m, &t)| {
            let e = samples.lookback(m, sim.params.r)?;
            Ok(LookbackQuote {
                maturity: t,
                price: e.mean,
                stderr: e.stderr,
            })
        })
        .collect()
}
