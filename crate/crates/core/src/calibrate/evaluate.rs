//! Out-of-sample pricing of a trained model.

use crate::autodiff::{Backend, Eager, Matrix, ParamStore};
use crate::error::{invalid, Result};
use crate::hedge::HedgeNet;
use crate::market::{call_payoffs, implied_vol, payoff, OptionSpec, Quote};
use crate::sde::{simulate_rows, ModelSpec, PathBatch, TimeGrid};
use crate::stats::{chunked, estimate, Estimate};

const CHUNK: usize = 8192;

#[derive(Clone, Debug, PartialEq)]
pub struct InstrumentPrice {
    pub maturity: f64,
    pub strike: f64,
    pub target: f64,
    /// Plain Monte Carlo price.
    pub raw: Estimate,
    /// Price with the hedge subtracted (equal to `raw` without a hedge).
    pub cv: Estimate,
    pub implied_vol: Option<f64>,
    pub target_vol: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub instruments: Vec<InstrumentPrice>,
    /// Mean squared error of the control-variate prices.
    pub mse: f64,
    pub exotic: Option<(OptionSpec, Estimate, Estimate)>,
    /// Per-path exotic payoff and hedge gains, when requested.
    pub exotic_paths: Option<(Vec<f64>, Vec<f64>)>,
}

/// Strikes grouped by maturity in quote order.
pub(crate) fn group_quotes(quotes: &[Quote]) -> Vec<(f64, Vec<f64>)> {
    let mut out: Vec<(f64, Vec<f64>)> = Vec::new();
    for q in quotes {
        match out.last_mut() {
            Some((t, ks)) if (*t - q.maturity).abs() <= crate::nets::TIME_EPS => ks.push(q.strike),
            _ => out.push((q.maturity, vec![q.strike])),
        }
    }
    out
}

/// Discounted call payoffs for every quote, `n × quotes`.
pub(crate) fn vanilla_payoffs<B: Backend>(be: &mut B, paths: &PathBatch<B::Array>, groups: &[(f64, Vec<f64>)], r: f64) -> Result<B::Array> {
    let cols = groups
        .iter()
        .map(|(t, ks)| call_payoffs(be, paths, *t, ks, r))
        .collect::<Result<Vec<_>>>()?;
    be.concat_cols(&cols)
}

/// Simulation grid reaching the latest quote or exotic maturity.
pub(crate) fn grid_for(quotes: &[Quote], exotic: Option<&OptionSpec>, steps_per_year: usize) -> Result<TimeGrid> {
    let last = quotes
        .iter()
        .map(|q| q.maturity)
        .chain(exotic.map(|x| x.maturity))
        .fold(0.0, f64::max);
    TimeGrid::uniform(last, steps_per_year)
}

pub(crate) fn check_hedge(hedge: &HedgeNet, quotes: &[Quote], exotic: Option<&OptionSpec>) -> Result<()> {
    let ts = hedge.instrument_maturities();
    if ts.len() != quotes.len() || ts.iter().zip(quotes).any(|(t, q)| (t - q.maturity).abs() > crate::nets::TIME_EPS) {
        return Err(invalid("hedge was trained for a different instrument set"));
    }
    if let (Some(x), Some(t)) = (exotic, hedge.exotic_maturity()) {
        if (x.maturity - t).abs() > crate::nets::TIME_EPS {
            return Err(invalid("hedge exotic maturity does not match"));
        }
    }
    Ok(())
}

struct Chunk {
    phi: Matrix,
    integral: Option<Matrix>,
    psi: Option<Vec<f64>>,
    psi_integral: Option<Vec<f64>>,
}

/// Prices every quote (and the exotic) on `n` fresh paths, in chunks.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &ModelSpec,
    hedge: Option<(&HedgeNet, &ParamStore)>,
    quotes: &[Quote],
    exotic: Option<&OptionSpec>,
    steps_per_year: usize,
    n: usize,
    seed: u64,
    antithetic: bool,
    keep_exotic_paths: bool,
) -> Result<Evaluation> {
    if quotes.is_empty() {
        return Err(invalid("nothing to evaluate"));
    }
    if let Some((h, _)) = hedge {
        check_hedge(h, quotes, exotic)?;
    }
    let groups = group_quotes(quotes);
    let grid = grid_for(quotes, exotic, steps_per_year)?;
    let r = model.r();
    let chunks = chunked(n, CHUNK, |rows| {
        let mut be = Eager::new();
        let paths = simulate_rows(&mut be, model, &grid, n, rows, seed, antithetic)?;
        let phi = vanilla_payoffs(&mut be, &paths, &groups, r)?;
        let integral = match hedge {
            Some((h, store)) => {
                let g = h.vanilla_integrals(&mut be, store, &paths, r, true)?;
                Some(be.value(&g).clone())
            }
            None => None,
        };
        let (psi, psi_integral) = match exotic {
            Some(x) => {
                let p = payoff(&mut be, x, &paths, r)?;
                let i = match hedge {
                    Some((h, store)) if h.exotic_maturity().is_some() => {
                        let g = h.exotic_integral(&mut be, store, &paths, r, true)?;
                        Some(be.value(&g).as_slice().to_vec())
                    }
                    _ => None,
                };
                (Some(be.value(&p).as_slice().to_vec()), i)
            }
            None => (None, None),
        };
        Ok(Chunk {
            phi: be.value(&phi).clone(),
            integral,
            psi,
            psi_integral,
        })
    })?;

    let j = quotes.len();
    let mut raw = vec![Vec::with_capacity(n); j];
    let mut cv = vec![Vec::with_capacity(n); j];
    let mut psi = Vec::new();
    let mut psi_int = Vec::new();
    for c in &chunks {
        for i in 0..c.phi.rows() {
            for (k, q) in c.phi.row_slice(i).iter().enumerate() {
                raw[k].push(*q);
                cv[k].push(q - c.integral.as_ref().map_or(0.0, |m| m.get(i, k)));
            }
        }
        if let Some(p) = &c.psi {
            psi.extend_from_slice(p);
            match &c.psi_integral {
                Some(ip) => psi_int.extend_from_slice(ip),
                None => psi_int.extend(std::iter::repeat(0.0).take(p.len())),
            }
        }
    }

    let s0 = model.s0();
    let mut instruments = Vec::with_capacity(j);
    let mut sq = 0.0;
    for (k, q) in quotes.iter().enumerate() {
        let raw_e = estimate(&raw[k], antithetic)?;
        let cv_e = estimate(&cv[k], antithetic)?;
        sq += (cv_e.mean - q.price).powi(2);
        instruments.push(InstrumentPrice {
            maturity: q.maturity,
            strike: q.strike,
            target: q.price,
            raw: raw_e,
            cv: cv_e,
            implied_vol: implied_vol(cv_e.mean, s0, q.strike, r, q.maturity).ok(),
            target_vol: implied_vol(q.price, s0, q.strike, r, q.maturity).ok(),
        });
    }
    let exotic_prices = match exotic {
        Some(x) => {
            let resid: Vec<f64> = psi.iter().zip(&psi_int).map(|(p, i)| p - i).collect();
            Some((*x, estimate(&psi, antithetic)?, estimate(&resid, antithetic)?))
        }
        None => None,
    };
    Ok(Evaluation {
        instruments,
        mse: sq / j as f64,
        exotic: exotic_prices,
        exotic_paths: if keep_exotic_paths && exotic.is_some() { Some((psi, psi_int)) } else { None },
    })
}
