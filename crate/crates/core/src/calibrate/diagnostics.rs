//! Full and randomized-maturity gradients of the square loss, and the
//! minibatch bias check.

use crate::autodiff::{Backend, Eager, Matrix, ParamId, ParamStore, Tape};
use crate::error::{invalid, Result};
use crate::hedge::HedgeNet;
use crate::market::Quote;
use crate::rng::derive_seed;
use crate::sde::{simulate, simulate_rows, ModelSpec, TimeGrid};
use crate::stats::{chunked, mean, sample_variance};

use super::evaluate::{grid_for, group_quotes, vanilla_payoffs};

/// Instruments and sampling settings of a square-loss gradient, without
/// hedge.
#[derive(Clone, Debug)]
pub struct GradientContext {
    quotes: Vec<Quote>,
    groups: Vec<(f64, Vec<f64>)>,
    grid: TimeGrid,
    pub n: usize,
    pub antithetic: bool,
}

impl GradientContext {
    pub fn new(quotes: &[Quote], steps_per_year: usize, n: usize, antithetic: bool) -> Result<Self> {
        if quotes.is_empty() || n < 2 || (antithetic && n % 2 != 0) {
            return Err(invalid("gradient context needs quotes and a valid path count"));
        }
        Ok(Self {
            quotes: quotes.to_vec(),
            groups: group_quotes(quotes),
            grid: grid_for(quotes, None, steps_per_year)?,
            n,
            antithetic,
        })
    }

    fn targets(&self) -> Vec<f64> {
        self.quotes.iter().map(|q| q.price).collect()
    }

    /// Payoff means on `seed` paths, no gradient.
    fn payoff_means(&self, model: &ModelSpec, seed: u64) -> Result<Vec<f64>> {
        let mut be = Eager::new();
        let paths = simulate(&mut be, model, &self.grid, self.n, seed, self.antithetic)?;
        let phi = vanilla_payoffs(&mut be, &paths, &self.groups, model.r())?;
        let m = be.mean(&phi)?;
        Ok(be.value(&m).as_slice().to_vec())
    }

    /// Gradient of `Σ_j (mean Φ_j − p_j)²` over every parameter of `model`
    /// in store order. With `mask`, only the listed parameters are tracked.
    /// With `outer_seed`, the factor `2(mean Φ − p)` comes from an
    /// independent batch.
    fn gradient(&self, model: &mut ModelSpec, seed: u64, mask: Option<&[ParamId]>, outer_seed: Option<u64>) -> Result<Vec<f64>> {
        if self.grid.horizon() > model.horizon() + crate::nets::TIME_EPS {
            return Err(invalid("quotes extend beyond the model horizon"));
        }
        let outer = match outer_seed {
            Some(s) => Some(self.payoff_means(model, s)?),
            None => None,
        };
        let mut tape = match mask {
            Some(ids) => {
                let mut m = vec![false; model.store.len()];
                for id in ids {
                    m[id.index()] = true;
                }
                Tape::with_param_filter(&model.store, m)
            }
            None => Tape::new(),
        };
        let paths = simulate(&mut tape, model, &self.grid, self.n, seed, self.antithetic)?;
        let phi = vanilla_payoffs(&mut tape, &paths, &self.groups, model.r())?;
        let means = tape.mean(&phi)?;
        let loss = match outer {
            None => {
                let t = tape.constant(Matrix::row(self.targets()));
                let d = tape.sub(&means, &t)?;
                let sq = tape.square(&d)?;
                tape.sum(&sq)?
            }
            Some(m) => {
                let w: Vec<f64> = m.iter().zip(self.targets()).map(|(a, p)| 2.0 * (a - p)).collect();
                let w = tape.constant(Matrix::row(w));
                let prod = tape.mul(&means, &w)?;
                tape.sum(&prod)?
            }
        };
        model.store.zero_grad();
        tape.backward(&loss, &mut model.store)?;
        let ids = model.param_ids();
        Ok(model.store.flat_grad(&ids))
    }
}

/// θ-gradient of the square loss; `outer_seed` as in [`randomized_gradient`].
pub fn full_gradient(ctx: &GradientContext, model: &mut ModelSpec, seed: u64, outer_seed: Option<u64>) -> Result<Vec<f64>> {
    ctx.gradient(model, seed, None, outer_seed)
}

/// Gradient through segment `u` only (plus the shared scalars), with the
/// segment part scaled by the number of segments. All segments still drive
/// the forward paths. `outer_seed` selects the two-batch form, which is
/// unbiased for the square loss.
pub fn randomized_gradient(ctx: &GradientContext, model: &mut ModelSpec, u: usize, seed: u64, outer_seed: Option<u64>) -> Result<Vec<f64>> {
    let nm = model.num_segments();
    if u >= nm {
        return Err(invalid(format!("segment {u} out of range for {nm} segments")));
    }
    let seg = model.segment_params(u);
    let mut tracked = seg.clone();
    tracked.extend(model.scalar_params());
    let mut g = ctx.gradient(model, seed, Some(&tracked), outer_seed)?;
    let ids = model.param_ids();
    let mut offset = 0;
    for id in ids {
        let len = model.store.value(id).len();
        if seg.contains(&id) {
            for x in &mut g[offset..offset + len] {
                *x *= nm as f64;
            }
        }
        offset += len;
    }
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct BiasConfig {
    /// Minibatch size.
    pub n: usize,
    /// Number of minibatches.
    pub batches: usize,
    pub reference_paths: usize,
    /// Central difference step on the parameter.
    pub fd_step: f64,
    pub steps_per_year: usize,
    pub seed: u64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            n: 256,
            batches: 2000,
            reference_paths: 1_000_000,
            fd_step: 1e-4,
            steps_per_year: crate::sde::STEPS_PER_YEAR,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasReport {
    /// Mean of the minibatch gradients.
    pub minibatch_mean: f64,
    /// Large-sample gradient.
    pub reference: f64,
    /// `|minibatch_mean − reference|`.
    pub bias: f64,
    /// `(2/N)·sd(Φ^cv)·sd(∂θΦ)`.
    pub bound: f64,
    /// Combined standard error of `bias`.
    pub stderr: f64,
    pub var_phi_cv: f64,
    pub var_dphi: f64,
}

impl BiasReport {
    pub fn holds(&self) -> bool {
        self.bias <= self.bound + 3.0 * self.stderr
    }
}

/// The parameter probed by the bias check: the output bias of the first
/// diffusion segment.
pub fn probe_parameter(model: &ModelSpec) -> ParamId {
    *model.nets()[0].segment_params(0).last().expect("segment has parameters")
}

struct PathValues {
    phi_cv: Vec<f64>,
    dphi: Vec<f64>,
}

/// Per-path hedged payoff and central-difference payoff derivative on
/// common random numbers.
fn path_values(model: &ModelSpec, hedge: Option<(&HedgeNet, &ParamStore)>, quote: &Quote, grid: &TimeGrid, id: ParamId, step: f64, n: usize, seed: u64) -> Result<PathValues> {
    let shifted = |h: f64| -> Result<ModelSpec> {
        let mut m = model.clone();
        m.store.value_mut(id).as_mut_slice()[0] += h;
        Ok(m)
    };
    let (up, down) = (shifted(step)?, shifted(-step)?);
    let groups = vec![(quote.maturity, vec![quote.strike])];
    let chunks = chunked(n, 8192, |rows| {
        let payoff_of = |m: &ModelSpec, with_hedge: bool| -> Result<(Vec<f64>, Option<Vec<f64>>)> {
            let mut be = Eager::new();
            let paths = simulate_rows(&mut be, m, grid, n, rows.clone(), seed, false)?;
            let phi = vanilla_payoffs(&mut be, &paths, &groups, m.r())?;
            let phi_v = be.value(&phi).as_slice().to_vec();
            let gain = match (with_hedge, hedge) {
                (true, Some((h, s))) => {
                    let g = h.vanilla_integrals(&mut be, s, &paths, m.r(), true)?;
                    Some(be.value(&g).as_slice().to_vec())
                }
                _ => None,
            };
            Ok((phi_v, gain))
        };
        let (phi, gain) = payoff_of(model, true)?;
        let (pu, _) = payoff_of(&up, false)?;
        let (pd, _) = payoff_of(&down, false)?;
        let phi_cv = match gain {
            Some(g) => phi.iter().zip(&g).map(|(p, i)| p - i).collect(),
            None => phi,
        };
        let dphi = pu.iter().zip(&pd).map(|(a, b)| (a - b) / (2.0 * step)).collect();
        Ok(PathValues { phi_cv, dphi })
    })?;
    let mut out = PathValues { phi_cv: Vec::with_capacity(n), dphi: Vec::with_capacity(n) };
    for c in chunks {
        out.phi_cv.extend(c.phi_cv);
        out.dphi.extend(c.dphi);
    }
    Ok(out)
}

/// Compares the mean of `batches` minibatch gradients of
/// `(mean Φ^cv − p)²` in the probe parameter with a large-sample gradient,
/// next to the Cauchy–Schwarz bound on the bias. Minibatch gradients come
/// from the tape; the reference uses per-path central differences.
pub fn bias_diagnostic(model: &ModelSpec, hedge: Option<(&HedgeNet, &ParamStore)>, quote: &Quote, config: &BiasConfig) -> Result<BiasReport> {
    if config.n < 2 || config.batches < 2 || config.reference_paths < 2 || !(config.fd_step > 0.0) {
        return Err(invalid("bias diagnostic needs n, batches, reference paths ≥ 2 and a positive step"));
    }
    let quotes = std::slice::from_ref(quote);
    if let Some((h, _)) = hedge {
        super::evaluate::check_hedge(h, quotes, None)?;
    }
    let grid = grid_for(quotes, None, config.steps_per_year)?;
    let id = probe_parameter(model);
    let r = model.r();

    let reference = path_values(model, hedge, quote, &grid, id, config.fd_step, config.reference_paths, derive_seed(config.seed, 1))?;
    let m_cv = mean(&reference.phi_cv);
    let m_d = mean(&reference.dphi);
    let ref_grad = 2.0 * (m_cv - quote.price) * m_d;
    let var_phi_cv = sample_variance(&reference.phi_cv);
    let var_dphi = sample_variance(&reference.dphi);
    // Delta-method error of the reference product.
    let lin: Vec<f64> = reference
        .phi_cv
        .iter()
        .zip(&reference.dphi)
        .map(|(p, d)| 2.0 * (p * m_d + (m_cv - quote.price) * d))
        .collect();
    let ref_se = (sample_variance(&lin) / config.reference_paths as f64).sqrt();

    let grads = chunked(config.batches, 1, |b| {
        let b = b.start;
        let mut m = model.clone();
        let mut mask = vec![false; m.store.len()];
        mask[id.index()] = true;
        let mut tape = Tape::with_param_filter(&m.store, mask);
        let paths = simulate(&mut tape, &m, &grid, config.n, derive_seed(config.seed, 100 + b as u64), false)?;
        let phi = vanilla_payoffs(&mut tape, &paths, &[(quote.maturity, vec![quote.strike])], r)?;
        let phi_cv = match hedge {
            Some((h, s)) => {
                let g = h.vanilla_integrals(&mut tape, s, &paths, r, true)?;
                let g = tape.detach(&g);
                tape.sub(&phi, &g)?
            }
            None => phi,
        };
        let mn = tape.mean(&phi_cv)?;
        let d = tape.add_scalar(&mn, -quote.price)?;
        let loss = tape.square(&d)?;
        m.store.zero_grad();
        tape.backward(&loss, &mut m.store)?;
        Ok(m.store.grad(id).get(0, 0))
    })?;
    let minibatch_mean = mean(&grads);
    let batch_se = (sample_variance(&grads) / config.batches as f64).sqrt();
    let bias = (minibatch_mean - ref_grad).abs();
    let bound = 2.0 / config.n as f64 * var_phi_cv.sqrt() * var_dphi.sqrt();
    Ok(BiasReport {
        minibatch_mean,
        reference: ref_grad,
        bias,
        bound,
        stderr: (batch_se * batch_se + ref_se * ref_se).sqrt(),
        var_phi_cv,
        var_dphi,
    })
}
