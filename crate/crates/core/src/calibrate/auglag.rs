//! Multiplier and penalty schedule of the augmented Lagrangian.

use crate::error::{invalid, Result};

/// `λ ← λ + c·mse`, `c ← 2c`.
pub fn auglag_update(lambda: f64, c: f64, mse: f64) -> Result<(f64, f64)> {
    if !(mse >= 0.0) {
        return Err(invalid(format!("constraint value {mse} must be nonnegative")));
    }
    Ok((lambda + c * mse, 2.0 * c))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugLagState {
    pub lambda: f64,
    pub c: f64,
    /// Number of θ-updates between two multiplier updates.
    pub every: usize,
    /// `(θ-updates so far, λ, c)` after each update, starting with the
    /// initial values.
    pub history: Vec<(usize, f64, f64)>,
}

impl AugLagState {
    pub fn new(lambda: f64, c: f64, every: usize) -> Result<Self> {
        if !(lambda > 0.0 && c > 0.0) || every == 0 {
            return Err(invalid("augmented Lagrangian needs λ > 0, c > 0 and a positive cadence"));
        }
        Ok(Self {
            lambda,
            c,
            every,
            history: vec![(0, lambda, c)],
        })
    }

    /// Called after every θ-update with the constraint value seen by it.
    pub fn after_step(&mut self, steps: usize, mse: f64) -> Result<bool> {
        if steps == 0 || steps % self.every != 0 {
            return Ok(false);
        }
        let (l, c) = auglag_update(self.lambda, self.c, mse)?;
        self.lambda = l;
        self.c = c;
        self.history.push((steps, l, c));
        Ok(true)
    }
}
