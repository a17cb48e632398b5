//! Deterministic random streams.
//!
//! Brownian draws are addressed by `(seed, path, step, component)`: each path
//! owns a ChaCha stream and the position inside it is a fixed function of the
//! step and component. Any split of paths across workers therefore reproduces
//! the same numbers.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Number of Brownian components reserved per step in every path stream.
pub const COMPONENTS: usize = 2;

/// Mixes a tag into a seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform on the open interval (0, 1) from the top 52 bits; both ends are
/// exactly representable, so the normal inverse stays finite.
#[inline]
pub fn open_uniform(u: u64) -> f64 {
    ((u >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

/// Standard normal draws by inverting the normal CDF.
#[derive(Clone)]
pub struct PathStreams {
    base: ChaCha8Rng,
    normal: Normal,
}

impl PathStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            base: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, 1.0).expect("unit normal"),
        }
    }

    /// Fills `out[step * components + c]` with the standard normal keyed by
    /// `(path, step, c)` for `step < steps`, `c < components`.
    pub fn fill_path(&self, path: u64, steps: usize, components: usize, out: &mut [f64]) {
        assert!(components <= COMPONENTS && out.len() == steps * components);
        let mut rng = self.base.clone();
        rng.set_stream(path);
        rng.set_word_pos(0);
        for step in 0..steps {
            for c in 0..COMPONENTS {
                let u = rng.next_u64();
                if c < components {
                    out[step * components + c] = self.normal.inverse_cdf(open_uniform(u));
                }
            }
        }
    }

    /// A single keyed draw; slow, intended for checks.
    pub fn draw(&self, path: u64, step: usize, component: usize) -> f64 {
        assert!(component < COMPONENTS);
        let mut rng = self.base.clone();
        rng.set_stream(path);
        rng.set_word_pos(2 * (step * COMPONENTS + component) as u128);
        self.normal.inverse_cdf(open_uniform(rng.next_u64()))
    }
}

/// Stream index and sign for global path `i` out of `total` paths. With
/// antithetic sampling path `i + total/2` reuses the stream of path `i`
/// with negated increments.
#[inline]
pub fn antithetic_source(i: usize, total: usize, antithetic: bool) -> (u64, f64) {
    if antithetic {
        let half = total / 2;
        if i >= half {
            ((i - half) as u64, -1.0)
        } else {
            (i as u64, 1.0)
        }
    } else {
        (i as u64, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyed_draws_match_sequential_fill() {
        let s = PathStreams::new(11);
        let mut buf = vec![0.0; 5 * 2];
        s.fill_path(7, 5, 2, &mut buf);
        for step in 0..5 {
            for c in 0..2 {
                assert_eq!(buf[step * 2 + c], s.draw(7, step, c));
            }
        }
        let mut one = vec![0.0; 5];
        s.fill_path(7, 5, 1, &mut one);
        for step in 0..5 {
            assert_eq!(one[step], buf[step * 2]);
        }
    }

    #[test]
    fn open_uniform_avoids_endpoints() {
        assert!(open_uniform(0) > 0.0);
        assert!(open_uniform(u64::MAX) < 1.0);
    }

    #[test]
    fn draws_look_standard_normal() {
        let s = PathStreams::new(3);
        let n = 200_000;
        let mut buf = vec![0.0; n];
        s.fill_path(0, n, 1, &mut buf);
        let mean = buf.iter().sum::<f64>() / n as f64;
        let var = buf.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.02);
    }
}
