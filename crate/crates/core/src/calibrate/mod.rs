//! Training: Adam, vanilla calibration with control variates, price bounds
//! through an augmented Lagrangian, incremental and randomized-maturity
//! training, and gradient-bias diagnostics.

mod adam;
mod auglag;
mod diagnostics;
mod evaluate;
mod report;
mod train;

pub use adam::{Adam, AdamConfig};
pub use auglag::{auglag_update, AugLagState};
pub use diagnostics::{bias_diagnostic, full_gradient, probe_parameter, randomized_gradient, BiasConfig, BiasReport, GradientContext};
pub use evaluate::{evaluate, Evaluation, InstrumentPrice};
pub use report::{read_instruments_csv, write_instruments_csv, CalibReport, EpochRecord, InstrumentRow, Summary};
pub use train::{calibrate, calibrate_bound, calibrate_vanilla, incremental_multi_maturity, Calibration, Trainer};

use crate::error::{invalid, Result};
use crate::market::OptionSpec;
use crate::sde::{ModelConfig, STEPS_PER_YEAR};

/// Objective of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Plain calibration.
    None,
    /// Minimize the exotic price subject to calibration.
    Lower,
    /// Maximize it.
    Upper,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::None => "none",
            Direction::Lower => "lower",
            Direction::Upper => "upper",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Direction::None),
            "lower" => Ok(Direction::Lower),
            "upper" => Ok(Direction::Upper),
            _ => Err(invalid(format!("unknown bound direction {s:?} (none, lower, upper)"))),
        }
    }

    /// Sign applied to the exotic price in the objective.
    fn sign(self) -> f64 {
        match self {
            Direction::None => 0.0,
            Direction::Lower => 1.0,
            Direction::Upper => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibConfig {
    pub model: ModelConfig,
    pub steps_per_year: usize,
    /// Paths per training step.
    pub n_train: usize,
    pub antithetic_train: bool,
    /// Paths of the final evaluation.
    pub n_eval: usize,
    pub antithetic_eval: bool,
    pub epochs: usize,
    pub lr_theta: f64,
    pub lr_xi: f64,
    /// Both learning rates halve after this many epochs.
    pub lr_halving: usize,
    pub direction: Direction,
    /// Exotic priced alongside the calibration; required for bounds.
    pub exotic: Option<OptionSpec>,
    /// Learn hedging control variates.
    pub use_hedge: bool,
    /// Train one uniformly drawn maturity segment per step.
    pub randomized_maturity: bool,
    pub lambda0: f64,
    pub c0: f64,
    pub auglag_every: usize,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let last = *model.maturities.last().unwrap();
        Self {
            model,
            steps_per_year: STEPS_PER_YEAR,
            n_train: 40_000,
            antithetic_train: false,
            n_eval: 400_000,
            antithetic_eval: true,
            epochs: 500,
            lr_theta: 1e-3,
            lr_xi: 1e-3,
            lr_halving: 200,
            direction: Direction::None,
            exotic: Some(OptionSpec::lookback(last)),
            use_hedge: true,
            randomized_maturity: false,
            lambda0: 1.0,
            c0: 1.0,
            auglag_every: 50,
            seed: 0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 2 || self.n_eval < 4 || self.steps_per_year == 0 || self.lr_halving == 0 {
            return Err(invalid("path counts, steps per year and the halving period must be positive"));
        }
        if (self.antithetic_train && self.n_train % 2 != 0) || (self.antithetic_eval && self.n_eval % 2 != 0) {
            return Err(invalid("antithetic path counts must be even"));
        }
        if !(self.lr_theta > 0.0 && self.lr_xi > 0.0) {
            return Err(invalid("learning rates must be positive"));
        }
        if let Some(x) = &self.exotic {
            x.validate()?;
            let last = self.model.maturities.last().copied().unwrap_or(0.0);
            if x.maturity > last + crate::nets::TIME_EPS {
                return Err(invalid(format!("exotic maturity {} beyond the model horizon {last}", x.maturity)));
            }
        }
        if self.direction != Direction::None {
            if self.exotic.is_none() {
                return Err(invalid("a price bound needs an exotic"));
            }
            if !(self.lambda0 > 0.0 && self.c0 > 0.0) || self.auglag_every == 0 {
                return Err(invalid("augmented Lagrangian needs λ0 > 0, c0 > 0 and a positive cadence"));
            }
        }
        Ok(())
    }

    /// Learning-rate multiplier at `epoch`.
    fn lr_factor(&self, epoch: usize) -> f64 {
        0.5f64.powi((epoch / self.lr_halving) as i32)
    }
}

#[cfg(test)]
mod tests;
