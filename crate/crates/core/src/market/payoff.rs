//! Discounted payoffs as differentiable functions of simulated paths.

use crate::autodiff::Backend;
use crate::error::{invalid, Result};
use crate::nets::TIME_EPS;
use crate::sde::PathBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptionKind {
    EuropeanCall,
    EuropeanPut,
    /// Pays `max_k S_{t_k} - S_T` over grid points up to `T`.
    LookbackCall,
}

impl OptionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptionKind::EuropeanCall => "european_call",
            OptionKind::EuropeanPut => "european_put",
            OptionKind::LookbackCall => "lookback_call",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "european_call" => Ok(OptionKind::EuropeanCall),
            "european_put" => Ok(OptionKind::EuropeanPut),
            "lookback_call" => Ok(OptionKind::LookbackCall),
            _ => Err(invalid(format!("unknown option kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptionSpec {
    pub kind: OptionKind,
    pub maturity: f64,
    pub strike: Option<f64>,
}

impl OptionSpec {
    pub fn call(maturity: f64, strike: f64) -> Self {
        Self {
            kind: OptionKind::EuropeanCall,
            maturity,
            strike: Some(strike),
        }
    }

    pub fn put(maturity: f64, strike: f64) -> Self {
        Self {
            kind: OptionKind::EuropeanPut,
            maturity,
            strike: Some(strike),
        }
    }

    pub fn lookback(maturity: f64) -> Self {
        Self {
            kind: OptionKind::LookbackCall,
            maturity,
            strike: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.maturity > 0.0 && self.maturity.is_finite()) {
            return Err(invalid(format!("option maturity {} must be positive", self.maturity)));
        }
        match (self.kind, self.strike) {
            (OptionKind::LookbackCall, None) => Ok(()),
            (OptionKind::LookbackCall, Some(_)) => Err(invalid("lookback takes no strike")),
            (_, Some(k)) if k > 0.0 && k.is_finite() => Ok(()),
            _ => Err(invalid(format!("{} needs a positive strike", self.kind.as_str()))),
        }
    }
}

/// Index of `t` in `times`.
pub fn grid_index(times: &[f64], t: f64) -> Result<usize> {
    times
        .iter()
        .position(|&s| (s - t).abs() <= TIME_EPS * t.abs().max(1.0))
        .ok_or_else(|| invalid(format!("maturity {t} is not on the simulation grid")))
}

/// Discounted payoff on every path, `n × 1`.
pub fn payoff<B: Backend>(be: &mut B, spec: &OptionSpec, paths: &PathBatch<B::Array>, r: f64) -> Result<B::Array> {
    spec.validate()?;
    let k = grid_index(&paths.times, spec.maturity)?;
    let df = (-r * spec.maturity).exp();
    let st = &paths.s[k];
    let raw = match spec.kind {
        OptionKind::EuropeanCall => {
            let x = be.add_scalar(st, -spec.strike.unwrap())?;
            be.relu(&x)?
        }
        OptionKind::EuropeanPut => {
            let neg = be.scale(st, -1.0)?;
            let x = be.add_scalar(&neg, spec.strike.unwrap())?;
            be.relu(&x)?
        }
        OptionKind::LookbackCall => {
            let mx = be.running_max(&paths.s[..=k])?;
            be.sub(&mx, st)?
        }
    };
    be.scale(&raw, df)
}

/// Discounted calls at one maturity for several strikes, `n × strikes`.
pub fn call_payoffs<B: Backend>(be: &mut B, paths: &PathBatch<B::Array>, maturity: f64, strikes: &[f64], r: f64) -> Result<B::Array> {
    if strikes.is_empty() {
        return Err(invalid("no strikes"));
    }
    let cols = strikes
        .iter()
        .map(|&k| payoff(be, &OptionSpec::call(maturity, k), paths, r))
        .collect::<Result<Vec<_>>>()?;
    be.concat_cols(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Eager, Matrix, Tape};

    fn batch<B: Backend>(be: &mut B, times: Vec<f64>, s: &[&[f64]]) -> PathBatch<B::Array> {
        let cols: Vec<B::Array> = s.iter().map(|c| be.constant(Matrix::column(c.to_vec()))).collect();
        PathBatch {
            times,
            s: cols.clone(),
            v: None,
            s_detached: cols,
            v_detached: None,
            dw: Vec::new(),
            rows: s[0].len(),
        }
    }

    #[test]
    fn call_and_put_values() {
        let mut be = Eager::new();
        let b = batch(&mut be, vec![0.0, 0.7], &[&[1.0], &[1.1]]);
        let c = payoff(&mut be, &OptionSpec::call(0.7, 1.0), &b, 0.0).unwrap();
        assert!((be.value(&c).get(0, 0) - 0.1).abs() < 1e-15);
        let p = payoff(&mut be, &OptionSpec::put(0.7, 1.2), &b, 0.0).unwrap();
        assert!((be.value(&p).get(0, 0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn lookback_on_decreasing_path() {
        let mut be = Eager::new();
        let b = batch(&mut be, vec![0.0, 0.5, 1.0], &[&[1.0], &[0.9], &[0.8]]);
        let l = payoff(&mut be, &OptionSpec::lookback(1.0), &b, 0.0).unwrap();
        assert!((be.value(&l).get(0, 0) - 0.2).abs() < 1e-15);
        let d = payoff(&mut be, &OptionSpec::lookback(1.0), &b, 0.03).unwrap();
        assert!((be.value(&d).get(0, 0) - 0.2 * (-0.03f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn deep_out_of_the_money_call_has_zero_gradient() {
        let mut tape = Tape::new();
        let s0 = tape.variable(Matrix::column(vec![1.0, 1.0]));
        let st = tape.variable(Matrix::column(vec![1.05, 0.9]));
        let paths = PathBatch {
            times: vec![0.0, 1.0],
            s: vec![s0, st],
            v: None,
            s_detached: vec![s0, st],
            v_detached: None,
            dw: Vec::new(),
            rows: 2,
        };
        let c = payoff(&mut tape, &OptionSpec::call(1.0, 1.5), &paths, 0.0).unwrap();
        assert!(tape.value(&c).as_slice().iter().all(|&v| v == 0.0));
        let loss = tape.sum(&c).unwrap();
        let g = tape.gradient(&loss, &[st]).unwrap();
        assert!(g[0].as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn off_grid_and_bad_specs_rejected() {
        let mut be = Eager::new();
        let b = batch(&mut be, vec![0.0, 0.5], &[&[1.0], &[1.0]]);
        assert!(payoff(&mut be, &OptionSpec::call(0.6, 1.0), &b, 0.0).is_err());
        assert!(payoff(&mut be, &OptionSpec::call(0.5, -1.0), &b, 0.0).is_err());
        let bad = OptionSpec { strike: Some(1.0), ..OptionSpec::lookback(0.5) };
        assert!(bad.validate().is_err());
        assert_eq!(OptionKind::parse("european_put").unwrap(), OptionKind::EuropeanPut);
    }

    #[test]
    fn strike_matrix_matches_single_payoffs() {
        let mut be = Eager::new();
        let b = batch(&mut be, vec![0.0, 0.5], &[&[1.0, 1.0], &[0.95, 1.2]]);
        let m = call_payoffs(&mut be, &b, 0.5, &[0.9, 1.0, 1.1], 0.01).unwrap();
        assert_eq!(be.shape(&m), (2, 3));
        let single = payoff(&mut be, &OptionSpec::call(0.5, 1.1), &b, 0.01).unwrap();
        assert_eq!(be.value(&m).get(1, 2), be.value(&single).get(1, 0));
    }
}
