use super::*;
use crate::market::{bs_price, MarketSurface, OptionSpec, Quote};
use crate::sde::{ModelConfig, ModelSpec};

const T1: f64 = 1.0 / 12.0;
const T2: f64 = 2.0 / 12.0;

fn surface(maturities: &[f64]) -> MarketSurface {
    let mut quotes = Vec::new();
    for &t in maturities {
        for k in [0.95, 1.0, 1.05] {
            quotes.push(Quote {
                maturity: t,
                strike: k,
                price: bs_price(1.0, k, 0.025, t, 0.25),
                stderr: None,
            });
        }
    }
    MarketSurface::new(quotes).unwrap()
}

fn toy_model(maturities: &[f64], hidden: usize) -> ModelConfig {
    ModelConfig {
        maturities: maturities.to_vec(),
        hidden: vec![hidden, hidden],
        seed: 5,
        ..ModelConfig::default()
    }
}

fn toy(maturities: &[f64]) -> CalibConfig {
    CalibConfig {
        model: toy_model(maturities, 8),
        steps_per_year: 48,
        n_train: 256,
        n_eval: 1024,
        epochs: 6,
        exotic: Some(OptionSpec::lookback(*maturities.last().unwrap())),
        seed: 3,
        ..CalibConfig::default()
    }
}

fn values(m: &ModelSpec) -> Vec<u64> {
    m.store.flat_values(&m.param_ids()).iter().map(|x| x.to_bits()).collect()
}

#[test]
fn direction_none_matches_vanilla() {
    let s = surface(&[T1, T2]);
    let a = calibrate_vanilla(toy(&[T1, T2]), &s).unwrap();
    let b = calibrate_bound(toy(&[T1, T2]), &s, None).unwrap();
    assert_eq!(values(&a.model), values(&b.model));
    assert_eq!(a.report.epochs, b.report.epochs);
    assert_eq!(a.report.epochs.len(), 6);
}

#[test]
fn runs_are_bit_reproducible() {
    let s = surface(&[T1, T2]);
    let mut c = toy(&[T1, T2]);
    c.direction = Direction::Upper;
    let a = calibrate(c.clone(), &s).unwrap();
    let b = calibrate(c, &s).unwrap();
    assert_eq!(values(&a.model), values(&b.model));
    assert_eq!(a.report.epochs, b.report.epochs);
    assert_eq!(a.evaluation.mse.to_bits(), b.evaluation.mse.to_bits());
}

#[test]
fn bound_direction_moves_the_exotic() {
    let s = surface(&[T1]);
    let run = |d| {
        let mut c = toy(&[T1]);
        c.direction = d;
        c.epochs = 40;
        c.lr_theta = 1e-2;
        c.use_hedge = false;
        calibrate(c, &s).unwrap().report.epochs.last().unwrap().exotic_price.unwrap()
    };
    assert!(run(Direction::Lower) < run(Direction::Upper));
}

#[test]
fn bound_needs_an_exotic() {
    let s = surface(&[T1]);
    let mut c = toy(&[T1]);
    c.exotic = None;
    assert!(calibrate_bound(c.clone(), &s, None).is_err());
    c.direction = Direction::Lower;
    assert!(calibrate(c, &s).is_err());
}

#[test]
fn auglag_schedule_in_training() {
    let s = surface(&[T1]);
    let mut c = toy(&[T1]);
    c.direction = Direction::Lower;
    c.auglag_every = 2;
    let cal = calibrate(c, &s).unwrap();
    let h = &cal.report.auglag;
    assert_eq!(h.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
    assert_eq!(h.last().unwrap().2, 8.0);
    assert!(h.windows(2).all(|w| w[1].1 >= w[0].1));
}

#[test]
fn incremental_rejects_bounds() {
    let mut c = toy(&[T1, T2]);
    c.direction = Direction::Upper;
    assert!(incremental_multi_maturity(c, &surface(&[T1, T2])).is_err());
}

#[test]
fn incremental_single_maturity_is_vanilla() {
    let s = surface(&[T1]);
    let mut c = toy(&[T1]);
    c.exotic = None;
    let (m, reports) = incremental_multi_maturity(c.clone(), &s).unwrap();
    let v = calibrate_vanilla(c, &s).unwrap();
    assert_eq!(values(&m), values(&v.model));
    assert_eq!(reports[0].epochs, v.report.epochs);
}

#[test]
fn incremental_keeps_earlier_segments() {
    // Same first-maturity quotes, different second-maturity quotes: the
    // first segment must come out of both runs bit-identical.
    let a = surface(&[T1, T2]);
    let mut quotes = a.quotes().to_vec();
    for q in quotes.iter_mut().filter(|q| q.maturity == T2) {
        q.price = bs_price(1.0, q.strike, 0.025, T2, 0.3);
    }
    let b = MarketSurface::new(quotes).unwrap();
    let mut c = toy(&[T1, T2]);
    c.exotic = None;
    let (ma, reports) = incremental_multi_maturity(c.clone(), &a).unwrap();
    let (mb, _) = incremental_multi_maturity(c, &b).unwrap();
    assert_eq!(reports.len(), 2);
    let seg = |m: &ModelSpec, i| -> Vec<u64> { m.store.flat_values(&m.segment_params(i)).iter().map(|x| x.to_bits()).collect() };
    assert_eq!(seg(&ma, 0), seg(&mb, 0));
    assert_ne!(seg(&ma, 1), seg(&mb, 1));
    let fresh = ModelSpec::new(toy_model(&[T1, T2], 8)).unwrap();
    assert_ne!(seg(&fresh, 0), seg(&ma, 0));
}

#[test]
fn frozen_segment_gets_zero_gradient() {
    let s = surface(&[T1, T2]);
    let ctx = GradientContext::new(s.quotes(), 48, 128, false).unwrap();
    let mut m = ModelSpec::new(toy_model(&[T1, T2], 6)).unwrap();
    m.set_segment_frozen(0, true);
    full_gradient(&ctx, &mut m, 9, None).unwrap();
    for id in m.segment_params(0) {
        assert!(m.store.grad(id).as_slice().iter().all(|&g| g == 0.0));
    }
    assert!(m.segment_params(1).iter().any(|&id| m.store.grad(id).as_slice().iter().any(|&g| g != 0.0)));
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

#[test]
fn randomized_average_is_the_full_gradient() {
    let s = surface(&[T1, T2]);
    let ctx = GradientContext::new(s.quotes(), 48, 256, false).unwrap();
    let mut m = ModelSpec::new(toy_model(&[T1, T2], 6)).unwrap();
    let full = full_gradient(&ctx, &mut m, 4, None).unwrap();
    let g0 = randomized_gradient(&ctx, &mut m, 0, 4, None).unwrap();
    let g1 = randomized_gradient(&ctx, &mut m, 1, 4, None).unwrap();
    let avg: Vec<f64> = g0.iter().zip(&g1).map(|(a, b)| 0.5 * (a + b)).collect();
    assert!(rel_err(&avg, &full) <= 1e-10);
    assert!(randomized_gradient(&ctx, &mut m, 2, 4, None).is_err());
}

#[test]
fn single_segment_randomized_is_full() {
    let s = surface(&[T1]);
    let ctx = GradientContext::new(s.quotes(), 48, 128, false).unwrap();
    let mut m = ModelSpec::new(toy_model(&[T1], 6)).unwrap();
    let full = full_gradient(&ctx, &mut m, 2, None).unwrap();
    let r = randomized_gradient(&ctx, &mut m, 0, 2, None).unwrap();
    assert_eq!(full, r);
}

#[test]
fn randomized_draws_are_unbiased() {
    use rand::{Rng, SeedableRng};
    let s = surface(&[T1, T2]);
    let ctx = GradientContext::new(s.quotes(), 24, 32, false).unwrap();
    let mut m = ModelSpec::new(toy_model(&[T1, T2], 2)).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let draws = 10_000;
    let dim = m.param_ids().iter().map(|&id| m.store.value(id).len()).sum::<usize>();
    let (mut sum, mut sq) = (vec![0.0; dim], vec![0.0; dim]);
    for k in 0..draws {
        let (inner, outer) = (2 * k as u64, 2 * k as u64 + 1);
        let u = rng.gen_range(0..2);
        let r = randomized_gradient(&ctx, &mut m, u, inner, Some(outer)).unwrap();
        let f = full_gradient(&ctx, &mut m, inner, Some(outer)).unwrap();
        for i in 0..dim {
            let d = r[i] - f[i];
            sum[i] += d;
            sq[i] += d * d;
        }
    }
    for i in 0..dim {
        let mean = sum[i] / draws as f64;
        let var = (sq[i] / draws as f64 - mean * mean) * draws as f64 / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se + 1e-15, "component {i}: {mean} vs {se}");
    }
}

#[test]
fn bias_diagnostic_zero_payoff() {
    let m = ModelSpec::new(toy_model(&[T1], 4)).unwrap();
    let q = Quote { maturity: T1, strike: 50.0, price: 0.0, stderr: None };
    let cfg = BiasConfig { batches: 20, reference_paths: 2000, steps_per_year: 24, ..BiasConfig::default() };
    let r = bias_diagnostic(&m, None, &q, &cfg).unwrap();
    assert_eq!(r.bias, 0.0);
    assert_eq!(r.bound, 0.0);
    assert!(r.holds());
}

#[test]
fn bias_diagnostic_small_scale() {
    let m = ModelSpec::new(toy_model(&[T1], 4)).unwrap();
    let q = Quote { maturity: T1, strike: 1.0, price: 0.03, stderr: None };
    let cfg = BiasConfig { n: 32, batches: 400, reference_paths: 100_000, steps_per_year: 24, seed: 1, ..BiasConfig::default() };
    let r = bias_diagnostic(&m, None, &q, &cfg).unwrap();
    assert!(r.bound > 0.0 && r.stderr > 0.0);
    assert!(r.holds(), "{r:?}");
}

#[test]
fn lr_schedule_halves() {
    let c = CalibConfig::default();
    assert_eq!(c.lr_factor(0), 1.0);
    assert_eq!(c.lr_factor(199), 1.0);
    assert_eq!(c.lr_factor(200), 0.5);
    assert_eq!(c.lr_factor(450), 0.25);
}

#[test]
fn config_validation() {
    let mut c = CalibConfig::default();
    assert!(c.validate().is_ok());
    c.n_eval = 3;
    assert!(c.validate().is_err());
    let mut c = CalibConfig { exotic: Some(OptionSpec::lookback(5.0)), ..CalibConfig::default() };
    assert!(c.validate().is_err());
    c.exotic = None;
    c.direction = Direction::Lower;
    assert!(c.validate().is_err());
    assert_eq!(Direction::parse("upper").unwrap(), Direction::Upper);
    assert!(Direction::parse("up").is_err());
}

#[test]
fn report_files() {
    let s = surface(&[T1]);
    let cal = calibrate(toy(&[T1]), &s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("epochs.csv");
    cal.report.write_epochs_csv(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("epoch,mse,exotic_price\n"));
    assert_eq!(text.lines().count(), 7);
    let sp = dir.path().join("summary.txt");
    let sum = Summary::of(&cal);
    sum.write(&sp).unwrap();
    assert_eq!(Summary::read(&sp).unwrap(), sum);
    assert_eq!(cal.evaluation.instruments.len(), 3);
}
