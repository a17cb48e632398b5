//! Black–Scholes call pricing and implied-volatility inversion.

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Volatility bracket searched by [`implied_vol`].
pub const VOL_BRACKET: (f64, f64) = (1e-4, 5.0);
/// Price tolerance of the inversion.
pub const PRICE_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImpliedVolError {
    #[error("price {price} is at or below the intrinsic value {intrinsic}")]
    BelowIntrinsic { price: f64, intrinsic: f64 },
    #[error("price {price} is at or above the spot {spot}")]
    AboveSpot { price: f64, spot: f64 },
    #[error("price {price} is not attained for volatilities in [{lo}, {hi}]")]
    OutsideBracket { price: f64, lo: f64, hi: f64 },
    #[error("invalid inputs: {0}")]
    InvalidInput(String),
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Discounted call price `e^{-rT} E[(S_T - K)^+]` under Black–Scholes.
pub fn bs_price(s0: f64, k: f64, r: f64, t: f64, vol: f64) -> f64 {
    let df = (-r * t).exp();
    let intrinsic = (s0 - k * df).max(0.0);
    if vol <= 0.0 || t <= 0.0 {
        return intrinsic;
    }
    let sd = vol * t.sqrt();
    let d1 = ((s0 / k).ln() + r * t) / sd + 0.5 * sd;
    let d2 = d1 - sd;
    let n = std_normal();
    s0 * n.cdf(d1) - k * df * n.cdf(d2)
}

/// Put price via parity.
pub fn bs_put_price(s0: f64, k: f64, r: f64, t: f64, vol: f64) -> f64 {
    bs_price(s0, k, r, t, vol) - s0 + k * (-r * t).exp()
}

/// Volatility reproducing a call price, by bisection on [`VOL_BRACKET`].
pub fn implied_vol(price: f64, s0: f64, k: f64, r: f64, t: f64) -> Result<f64, ImpliedVolError> {
    if !(s0 > 0.0 && k > 0.0 && t > 0.0) || !price.is_finite() || !r.is_finite() {
        return Err(ImpliedVolError::InvalidInput(format!(
            "price {price}, spot {s0}, strike {k}, rate {r}, maturity {t}"
        )));
    }
    let intrinsic = (s0 - k * (-r * t).exp()).max(0.0);
    if price <= intrinsic {
        return Err(ImpliedVolError::BelowIntrinsic { price, intrinsic });
    }
    if price >= s0 {
        return Err(ImpliedVolError::AboveSpot { price, spot: s0 });
    }
    let (mut lo, mut hi) = VOL_BRACKET;
    let f = |v: f64| bs_price(s0, k, r, t, v) - price;
    let (flo, fhi) = (f(lo), f(hi));
    if flo.abs() <= PRICE_TOL {
        return Ok(lo);
    }
    if fhi.abs() <= PRICE_TOL {
        return Ok(hi);
    }
    if flo > 0.0 || fhi < 0.0 {
        return Err(ImpliedVolError::OutsideBracket { price, lo, hi });
    }
    loop {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm.abs() <= PRICE_TOL || hi - lo <= f64::EPSILON * mid {
            return Ok(mid);
        }
        if fm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}
