//! Target data: Heston Monte Carlo prices, payoffs, Black–Scholes helpers
//! and market surfaces.

mod black_scholes;
mod heston;
mod payoff;
mod surface;

pub use black_scholes::{bs_price, bs_put_price, implied_vol, ImpliedVolError, PRICE_TOL, VOL_BRACKET};
pub use heston::{heston_mc_lookback, heston_mc_surface, HestonParams, HestonSamples, HestonScheme, HestonSim};
pub use payoff::{call_payoffs, grid_index, payoff, OptionKind, OptionSpec};
pub use surface::{lookback_at, read_lookback_csv, write_lookback_csv, LookbackQuote, MarketSurface, Quote};

use crate::error::{invalid, Result};

/// Strike grids with spacing 0.02 centred at 1: 11 strikes on [0.9, 1.1],
/// 21 on [0.8, 1.2], 31 on [0.7, 1.3], 41 on [0.6, 1.4].
pub fn strike_preset(count: usize) -> Result<Vec<f64>> {
    if !matches!(count, 11 | 21 | 31 | 41) {
        return Err(invalid(format!("no strike preset with {count} strikes (use 11, 21, 31 or 41)")));
    }
    let half = (count / 2) as i64;
    Ok((-half..=half).map(|i| (50 + i) as f64 / 50.0).collect())
}

/// Maturities 2, 4, ..., 12 months.
pub fn default_maturities() -> Vec<f64> {
    (1..=6).map(|i| (2 * i) as f64 / 12.0).collect()
}
