//! Learned hedging strategies used as control variates.
//!
//! A hedge `h(t_k, state_k)` held over `[t_k, t_{k+1})` earns
//! `Σ_k h_k ΔS̄_k` with `ΔS̄_k = e^{-r t_{k+1}} S_{k+1} - e^{-r t_k} S_k`.
//! For non-anticipative inputs this sum has mean zero, so subtracting it from
//! a payoff keeps the Monte Carlo mean and can remove most of the variance.

use std::path::Path;

use crate::autodiff::{Backend, Matrix, ParamId, ParamStore};
use crate::error::{invalid, shape_err, Result};
use crate::nets::{Checkpoint, InitOptions, Mlp, OutputTransform};
use crate::rng::derive_seed;
use crate::sde::PathBatch;
use crate::stats::mean;

/// Hidden layout of both hedge networks.
pub const HEDGE_HIDDEN: [usize; 3] = [20, 20, 20];

/// Which integral to form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Instrument {
    /// Column `j` of the vanilla hedge.
    Vanilla(usize),
    Exotic,
}

/// Vanilla hedge with one output per calibration instrument, plus an
/// optional scalar hedge for the exotic whose input carries the running
/// maximum of `S`.
#[derive(Clone, Debug)]
pub struct HedgeNet {
    vanilla: Mlp,
    /// Maturity of each vanilla output; the hedge stops trading there.
    maturities: Vec<f64>,
    exotic: Option<(Mlp, f64)>,
    with_variance: bool,
}

fn sizes(inputs: usize, hidden: &[usize], outputs: usize) -> Vec<usize> {
    let mut s = vec![inputs];
    s.extend_from_slice(hidden);
    s.push(outputs);
    s
}

impl HedgeNet {
    /// `instrument_maturities[j]` is the maturity of vanilla output `j`.
    /// `with_variance` adds `V_t` to the inputs (LSV paths).
    pub fn new(
        store: &mut ParamStore,
        instrument_maturities: &[f64],
        exotic_maturity: Option<f64>,
        with_variance: bool,
        seed: u64,
    ) -> Result<Self> {
        if instrument_maturities.is_empty() || instrument_maturities.iter().any(|&t| !(t > 0.0)) {
            return Err(invalid("hedge needs at least one instrument with positive maturity"));
        }
        let state = 2 + usize::from(with_variance);
        let init = InitOptions {
            final_weight_scale: 0.1,
            output_bias: 0.0,
        };
        let vanilla = Mlp::with_init(
            store,
            "hedge",
            &sizes(state, &HEDGE_HIDDEN, instrument_maturities.len()),
            OutputTransform::Identity,
            derive_seed(seed, 200),
            &init,
        )?;
        let exotic = match exotic_maturity {
            Some(t) if t > 0.0 => Some((
                Mlp::with_init(
                    store,
                    "hedge_exotic",
                    &sizes(state + 1, &HEDGE_HIDDEN, 1),
                    OutputTransform::Identity,
                    derive_seed(seed, 201),
                    &init,
                )?,
                t,
            )),
            Some(t) => return Err(invalid(format!("exotic maturity {t} must be positive"))),
            None => None,
        };
        Ok(Self {
            vanilla,
            maturities: instrument_maturities.to_vec(),
            exotic,
            with_variance,
        })
    }

    pub fn instrument_maturities(&self) -> &[f64] {
        &self.maturities
    }

    pub fn exotic_maturity(&self) -> Option<f64> {
        self.exotic.as_ref().map(|e| e.1)
    }

    /// Number of vanilla instruments plus one for the exotic when present.
    pub fn output_width(&self) -> usize {
        self.maturities.len() + usize::from(self.exotic.is_some())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.vanilla.param_ids();
        if let Some((e, _)) = &self.exotic {
            ids.extend(e.param_ids());
        }
        ids
    }

    pub fn vanilla_param_ids(&self) -> Vec<ParamId> {
        self.vanilla.param_ids()
    }

    pub fn exotic_param_ids(&self) -> Vec<ParamId> {
        self.exotic.as_ref().map_or_else(Vec::new, |e| e.0.param_ids())
    }

    fn check_paths<A>(&self, paths: &PathBatch<A>) -> Result<()> {
        if paths.s.len() != paths.times.len() || paths.times.len() < 2 {
            return Err(shape_err("hedge", "path batch does not match its grid"));
        }
        if self.with_variance != paths.v.is_some() {
            return Err(invalid("hedge state dimension does not match the model"));
        }
        Ok(())
    }

    fn state<B: Backend>(&self, be: &mut B, paths: &PathBatch<B::Array>, k: usize, detached: bool, extra: Option<&B::Array>) -> Result<B::Array> {
        let (s, v) = if detached {
            (&paths.s_detached, paths.v_detached.as_ref())
        } else {
            (&paths.s, paths.v.as_ref())
        };
        // Spot and running maximum enter relative to the initial spot.
        let inv_s0 = 1.0 / be.value(&s[0]).get(0, 0);
        let mut relative = |x: &B::Array| -> Result<B::Array> {
            let y = be.scale(x, inv_s0)?;
            be.add_scalar(&y, -1.0)
        };
        let mut cols = vec![relative(&s[k])?];
        if let Some(mx) = extra {
            cols.push(relative(mx)?);
        }
        cols.insert(0, be.constant(Matrix::filled(paths.rows, 1, paths.times[k])));
        if let Some(v) = v {
            cols.push(v[k].clone());
        }
        be.concat_cols(&cols)
    }

    fn increments<B: Backend>(&self, be: &mut B, paths: &PathBatch<B::Array>, r: f64, steps: usize, detached: bool) -> Result<Vec<B::Array>> {
        let s = if detached { &paths.s_detached } else { &paths.s };
        (0..steps)
            .map(|k| {
                let a = be.scale(&s[k + 1], (-r * paths.times[k + 1]).exp())?;
                let b = be.scale(&s[k], (-r * paths.times[k]).exp())?;
                be.sub(&a, &b)
            })
            .collect()
    }

    /// Gains of every vanilla hedge, `n × instruments`. Column `j` stops
    /// accumulating at its maturity. With `detached` both the hedge inputs
    /// and the increments come from the parameter-free path copy.
    pub fn vanilla_integrals<B: Backend>(&self, be: &mut B, store: &ParamStore, paths: &PathBatch<B::Array>, r: f64, detached: bool) -> Result<B::Array> {
        self.check_paths(paths)?;
        let last = self.maturities.iter().cloned().fold(0.0, f64::max);
        let steps = crate::market::grid_index(&paths.times, last)?;
        for &t in &self.maturities {
            crate::market::grid_index(&paths.times, t)?;
        }
        let ds = self.increments(be, paths, r, steps, detached)?;
        let m = self.maturities.len();
        let mut acc: Option<B::Array> = None;
        for (k, dsk) in ds.iter().enumerate() {
            let t_next = paths.times[k + 1];
            let active: Vec<f64> = self
                .maturities
                .iter()
                .map(|&t| if t_next <= t + crate::nets::TIME_EPS { 1.0 } else { 0.0 })
                .collect();
            let x = self.state(be, paths, k, detached, None)?;
            let h = self.vanilla.forward(be, store, &x)?;
            let mut g = be.mul(&h, dsk)?;
            if active.iter().any(|&a| a == 0.0) {
                let mask = be.constant(Matrix::new(1, m, active)?);
                g = be.mul(&g, &mask)?;
            }
            acc = Some(match acc {
                Some(a) => be.add(&a, &g)?,
                None => g,
            });
        }
        Ok(acc.expect("at least one step"))
    }

    /// Gains of the exotic hedge, `n × 1`.
    pub fn exotic_integral<B: Backend>(&self, be: &mut B, store: &ParamStore, paths: &PathBatch<B::Array>, r: f64, detached: bool) -> Result<B::Array> {
        self.check_paths(paths)?;
        let (net, t) = self.exotic.as_ref().ok_or_else(|| invalid("hedge has no exotic output"))?;
        let steps = crate::market::grid_index(&paths.times, *t)?;
        let ds = self.increments(be, paths, r, steps, detached)?;
        let s = if detached { &paths.s_detached } else { &paths.s };
        let mut mx = s[0].clone();
        let mut acc: Option<B::Array> = None;
        for (k, dsk) in ds.iter().enumerate() {
            if k > 0 {
                mx = be.running_max(&[mx, s[k].clone()])?;
            }
            let x = self.state(be, paths, k, detached, Some(&mx))?;
            let h = net.forward(be, store, &x)?;
            let g = be.mul(&h, dsk)?;
            acc = Some(match acc {
                Some(a) => be.add(&a, &g)?,
                None => g,
            });
        }
        Ok(acc.expect("at least one step"))
    }

    /// `Σ_k h(t_k, state_k) ΔS̄_k` for one instrument, `n × 1`.
    pub fn stoch_integral<B: Backend>(
        &self,
        be: &mut B,
        store: &ParamStore,
        paths: &PathBatch<B::Array>,
        instrument: Instrument,
        r: f64,
        detached: bool,
    ) -> Result<B::Array> {
        match instrument {
            Instrument::Vanilla(j) => {
                if j >= self.maturities.len() {
                    return Err(invalid(format!("no vanilla instrument {j}")));
                }
                let all = self.vanilla_integrals(be, store, paths, r, detached)?;
                be.columns(&all, j, j + 1)
            }
            Instrument::Exotic => self.exotic_integral(be, store, paths, r, detached),
        }
    }

    /// Writes the hedge architecture and parameters under `hedge.*`.
    pub fn to_checkpoint(&self, store: &ParamStore, cp: &mut Checkpoint) {
        cp.set_f64s("hedge.maturities", &self.maturities);
        cp.set("hedge.with_variance", self.with_variance.to_string());
        if let Some((_, t)) = &self.exotic {
            cp.set_f64("hedge.exotic_maturity", *t);
        }
        cp.put_params("hedge", store);
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<(Self, ParamStore)> {
        let maturities = cp.get_f64s("hedge.maturities")?;
        let with_variance = cp.get_bool("hedge.with_variance")?;
        let exotic_t = match cp.get("hedge.exotic_maturity") {
            Some(_) => Some(cp.get_f64("hedge.exotic_maturity")?),
            None => None,
        };
        let store = cp.params("hedge")?;
        let state = 2 + usize::from(with_variance);
        let vanilla = Mlp::bind(&store, "hedge", &sizes(state, &HEDGE_HIDDEN, maturities.len()), OutputTransform::Identity)?;
        let exotic = match exotic_t {
            Some(t) => Some((
                Mlp::bind(&store, "hedge_exotic", &sizes(state + 1, &HEDGE_HIDDEN, 1), OutputTransform::Identity)?,
                t,
            )),
            None => None,
        };
        Ok((
            Self {
                vanilla,
                maturities,
                exotic,
                with_variance,
            },
            store,
        ))
    }
}

/// `Σ_j Var_N[Φ_j - I_j]` with payoffs and integrals of equal shape `n × m`.
pub fn variance_objective<B: Backend>(be: &mut B, payoffs: &B::Array, integrals: &B::Array) -> Result<B::Array> {
    if be.shape(payoffs) != be.shape(integrals) {
        return Err(shape_err(
            "variance_objective",
            format!("{:?} vs {:?}", be.shape(payoffs), be.shape(integrals)),
        ));
    }
    let resid = be.sub(payoffs, integrals)?;
    let var = be.sample_variance(&resid)?;
    be.sum(&var)
}

/// Hedging residuals `s_i = Ψ_i - I_i - mean(Ψ)`.
#[derive(Clone, Debug)]
pub struct HedgeErrorStats {
    pub residuals: Vec<f64>,
    /// `E_N[s²]`.
    pub mean_square: f64,
}

pub fn hedge_error_stats(payoff: &[f64], integral: &[f64]) -> Result<HedgeErrorStats> {
    if payoff.len() != integral.len() || payoff.is_empty() {
        return Err(invalid("payoff and integral must be non-empty and of equal length"));
    }
    let m = mean(payoff);
    let residuals: Vec<f64> = payoff.iter().zip(integral).map(|(p, i)| p - i - m).collect();
    let sq: Vec<f64> = residuals.iter().map(|s| s * s).collect();
    Ok(HedgeErrorStats {
        mean_square: mean(&sq),
        residuals,
    })
}

/// One `residual` per row.
pub fn write_residuals_csv(path: &Path, residuals: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["residual"])?;
    for r in residuals {
        w.write_record([crate::nets::format_f64(*r)])?;
    }
    w.flush()?;
    Ok(())
}
