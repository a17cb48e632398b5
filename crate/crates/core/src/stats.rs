//! Monte Carlo estimators and deterministic chunked evaluation.

use std::ops::Range;

use rayon::prelude::*;

use crate::autodiff::pairwise_sum;
use crate::error::{invalid, Result};

/// A Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    /// Number of independent samples behind the standard error.
    pub samples: usize,
}

pub fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Unbiased variance (divisor n - 1).
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
    pairwise_sum(&sq) / (xs.len() as f64 - 1.0)
}

/// Mean and standard error. With antithetic sampling sample `i` and
/// `i + n/2` are dependent, so the error is computed from pair averages.
pub fn estimate(xs: &[f64], antithetic: bool) -> Result<Estimate> {
    if xs.len() < 2 || (antithetic && (xs.len() % 2 != 0 || xs.len() < 4)) {
        return Err(invalid(format!(
            "cannot estimate from {} samples (antithetic: {antithetic})",
            xs.len()
        )));
    }
    if antithetic {
        let half = xs.len() / 2;
        let pairs: Vec<f64> = (0..half).map(|i| 0.5 * (xs[i] + xs[i + half])).collect();
        Ok(Estimate {
            mean: mean(xs),
            stderr: (sample_variance(&pairs) / half as f64).sqrt(),
            samples: half,
        })
    } else {
        Ok(Estimate {
            mean: mean(xs),
            stderr: (sample_variance(xs) / xs.len() as f64).sqrt(),
            samples: xs.len(),
        })
    }
}

/// Splits `0..total` into fixed chunks, evaluates them on the rayon pool and
/// returns the results in chunk order. The split does not depend on the
/// number of workers.
pub fn chunked<T, F>(total: usize, chunk: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Result<T> + Sync,
{
    let chunk = chunk.max(1);
    let ranges: Vec<Range<usize>> = (0..total.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(total))
        .collect();
    ranges.into_par_iter().map(&f).collect()
}

/// Linear-interpolation quantile of sorted data, `q` in [0, 1].
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_plain_and_antithetic() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let e = estimate(&xs, false).unwrap();
        assert_eq!(e.mean, 2.5);
        assert!((e.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        // pairs (1,3) and (2,4) average to 2 and 3
        let a = estimate(&xs, true).unwrap();
        assert_eq!(a.mean, 2.5);
        assert!((a.stderr - (0.5f64 / 2.0).sqrt()).abs() < 1e-15);
        assert!(estimate(&[1.0], false).is_err());
        assert!(estimate(&[1.0, 2.0, 3.0], true).is_err());
    }

    #[test]
    fn chunked_preserves_order() {
        let out = chunked(10, 3, |r| Ok(r.collect::<Vec<_>>())).unwrap();
        assert_eq!(out.concat(), (0..10).collect::<Vec<_>>());
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn quantiles_of_single_value() {
        for q in [0.0, 0.25, 0.5, 0.75, 1.0] {
            assert_eq!(quantile(&[3.5], q), 3.5);
        }
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.25), 2.0);
    }
}
