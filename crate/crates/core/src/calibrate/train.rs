//! Epoch loop shared by plain calibration and price bounds.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Backend, Matrix, ParamStore, Tape};
use crate::error::{invalid, Error, Result};
use crate::hedge::{variance_objective, HedgeNet};
use crate::market::{payoff, MarketSurface, Quote};
use crate::rng::derive_seed;
use crate::sde::{simulate, ModelKind, ModelSpec, PathBatch, TimeGrid};
use crate::stats::mean;

use super::evaluate::{check_hedge, evaluate, grid_for, group_quotes, vanilla_payoffs, Evaluation};
use super::report::{CalibReport, EpochRecord};
use super::{Adam, AdamConfig, AugLagState, CalibConfig, Direction};

const TRAIN_TAG: u64 = 1 << 32;
const SEGMENT_TAG: u64 = 2 << 32;
const HEDGE_TAG: u64 = 3;
const EVAL_TAG: u64 = 4;

/// A trained model with its hedge, training record and final evaluation.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub model: ModelSpec,
    pub hedge: Option<(HedgeNet, ParamStore)>,
    pub report: CalibReport,
    pub evaluation: Evaluation,
}

/// Alternating θ/ξ training state.
#[derive(Debug)]
pub struct Trainer {
    config: CalibConfig,
    quotes: Vec<Quote>,
    groups: Vec<(f64, Vec<f64>)>,
    grid: TimeGrid,
    pub model: ModelSpec,
    pub hedge: Option<(HedgeNet, ParamStore)>,
    adam_theta: Adam,
    adam_xi: Option<Adam>,
    auglag: Option<AugLagState>,
    epoch: usize,
    records: Vec<EpochRecord>,
    started: Instant,
}

fn as_divergence(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Divergence {
            epoch,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Calibration quotes: every surface quote at one of the model maturities.
fn instrument_quotes(config: &CalibConfig, surface: &MarketSurface) -> Result<Vec<Quote>> {
    let ts = &config.model.maturities;
    let quotes: Vec<Quote> = surface
        .quotes()
        .iter()
        .filter(|q| ts.iter().any(|t| (t - q.maturity).abs() <= crate::nets::TIME_EPS))
        .copied()
        .collect();
    if quotes.is_empty() {
        return Err(invalid("no quotes at the model maturities"));
    }
    Ok(quotes)
}

impl Trainer {
    /// Fresh model and hedge.
    pub fn new(config: CalibConfig, surface: &MarketSurface) -> Result<Self> {
        config.validate()?;
        let model = ModelSpec::new(config.model.clone())?;
        let quotes = instrument_quotes(&config, surface)?;
        let hedge = if config.use_hedge {
            let mut store = ParamStore::new();
            let ts: Vec<f64> = quotes.iter().map(|q| q.maturity).collect();
            let h = HedgeNet::new(
                &mut store,
                &ts,
                config.exotic.map(|x| x.maturity),
                model.kind() == ModelKind::Lsv,
                derive_seed(config.seed, HEDGE_TAG),
            )?;
            Some((h, store))
        } else {
            None
        };
        Self::from_parts(config, quotes, model, hedge)
    }

    /// Continues from a given model and hedge.
    pub fn with_state(config: CalibConfig, surface: &MarketSurface, model: ModelSpec, hedge: Option<(HedgeNet, ParamStore)>) -> Result<Self> {
        config.validate()?;
        let quotes = instrument_quotes(&config, surface)?;
        Self::from_parts(config, quotes, model, hedge)
    }

    fn from_parts(config: CalibConfig, quotes: Vec<Quote>, model: ModelSpec, hedge: Option<(HedgeNet, ParamStore)>) -> Result<Self> {
        if let Some((h, _)) = &hedge {
            check_hedge(h, &quotes, config.exotic.as_ref())?;
            if config.exotic.is_some() && h.exotic_maturity().is_none() {
                return Err(invalid("hedge has no exotic output"));
            }
        }
        let grid = grid_for(&quotes, config.exotic.as_ref(), config.steps_per_year)?;
        if grid.horizon() > model.horizon() + crate::nets::TIME_EPS {
            return Err(invalid("instruments extend beyond the model horizon"));
        }
        let adam_theta = Adam::new(&model.store, AdamConfig { lr: config.lr_theta, ..AdamConfig::default() });
        let adam_xi = hedge
            .as_ref()
            .map(|(_, s)| Adam::new(s, AdamConfig { lr: config.lr_xi, ..AdamConfig::default() }));
        let auglag = match config.direction {
            Direction::None => None,
            _ => Some(AugLagState::new(config.lambda0, config.c0, config.auglag_every)?),
        };
        Ok(Self {
            groups: group_quotes(&quotes),
            quotes,
            grid,
            model,
            hedge,
            adam_theta,
            adam_xi,
            auglag,
            epoch: 0,
            records: Vec::new(),
            started: Instant::now(),
            config,
        })
    }

    pub fn config(&self) -> &CalibConfig {
        &self.config
    }

    pub fn quotes(&self) -> &[Quote] {
        &self.quotes
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn auglag(&self) -> Option<&AugLagState> {
        self.auglag.as_ref()
    }

    /// Segment trained at `epoch` under randomized-maturity training.
    fn random_segment(&self, epoch: usize) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, SEGMENT_TAG + epoch as u64));
        rng.gen_range(0..self.model.num_segments())
    }

    /// One variance-objective gradient for ξ on constant copies of the
    /// epoch's paths; returns the mean hedge gains per vanilla and for the
    /// exotic.
    fn hedge_phase(&mut self, paths: &PathBatch<crate::autodiff::DiffArray>, src: &Tape, phi: &Matrix, psi: Option<&Matrix>) -> Result<(Vec<f64>, f64)> {
        let (h, store) = self.hedge.as_mut().expect("hedge phase without hedge");
        let r = self.model.r();
        let (s_vals, v_vals) = paths.values(src);
        let mut tape = Tape::new();
        let s: Vec<_> = s_vals.into_iter().map(|m| tape.constant(m)).collect();
        let v: Option<Vec<_>> = v_vals.map(|vs| vs.into_iter().map(|m| tape.constant(m)).collect());
        let batch = PathBatch {
            times: paths.times.clone(),
            s: s.clone(),
            v: v.clone(),
            s_detached: s,
            v_detached: v,
            dw: Vec::new(),
            rows: paths.rows,
        };
        let integrals = h.vanilla_integrals(&mut tape, store, &batch, r, true)?;
        let phi_c = tape.constant(phi.clone());
        let mut objective = variance_objective(&mut tape, &phi_c, &integrals)?;
        let mut exotic_mean = 0.0;
        if let Some(p) = psi {
            let ie = h.exotic_integral(&mut tape, store, &batch, r, true)?;
            let pc = tape.constant(p.clone());
            let ve = variance_objective(&mut tape, &pc, &ie)?;
            objective = tape.add(&objective, &ve)?;
            exotic_mean = mean(tape.value(&ie).as_slice());
        }
        store.zero_grad();
        tape.backward(&objective, store)?;
        let m = tape.mean(&integrals)?;
        let means = tape.value(&m).as_slice().to_vec();
        Ok((means, exotic_mean))
    }

    /// One θ-update and one ξ-update on fresh paths.
    pub fn step(&mut self) -> Result<EpochRecord> {
        let e = self.epoch;
        self.step_inner(e).map_err(as_divergence(e))
    }

    fn step_inner(&mut self, e: usize) -> Result<EpochRecord> {
        let cfg = self.config.clone();
        let factor = cfg.lr_factor(e);
        self.adam_theta.set_lr(cfg.lr_theta * factor);
        if let Some(a) = self.adam_xi.as_mut() {
            a.set_lr(cfg.lr_xi * factor);
        }
        let segments = self.model.num_segments();
        let active = if cfg.randomized_maturity && segments > 1 {
            Some(self.random_segment(e))
        } else {
            None
        };
        let mut tape = match active {
            Some(u) => {
                let mut mask = vec![false; self.model.store.len()];
                for id in self.model.segment_params(u).into_iter().chain(self.model.scalar_params()) {
                    mask[id.index()] = true;
                }
                Tape::with_param_filter(&self.model.store, mask)
            }
            None => Tape::new(),
        };
        let r = self.model.r();
        let seed = derive_seed(cfg.seed, TRAIN_TAG + e as u64);
        let paths = simulate(&mut tape, &self.model, &self.grid, cfg.n_train, seed, cfg.antithetic_train)?;
        let phi = vanilla_payoffs(&mut tape, &paths, &self.groups, r)?;
        let psi = match &cfg.exotic {
            Some(x) => Some(payoff(&mut tape, x, &paths, r)?),
            None => None,
        };
        let j = self.quotes.len();
        let (gains, exotic_gain) = if self.hedge.is_some() {
            let phi_v = tape.value(&phi).clone();
            let psi_v = psi.map(|p| tape.value(&p).clone());
            self.hedge_phase(&paths, &tape, &phi_v, psi_v.as_ref())?
        } else {
            (vec![0.0; j], 0.0)
        };

        let target: Vec<f64> = self.quotes.iter().zip(&gains).map(|(q, g)| q.price + g).collect();
        let means = tape.mean(&phi)?;
        let target = tape.constant(Matrix::row(target));
        let diff = tape.sub(&means, &target)?;
        let sq = tape.square(&diff)?;
        let h = tape.sum(&sq)?;
        let h_value = tape.value(&h).get(0, 0);
        let exotic_price = match &psi {
            Some(p) => Some(mean(tape.value(p).as_slice()) - exotic_gain),
            None => None,
        };
        let loss = match (cfg.direction, &psi, &self.auglag) {
            (Direction::None, _, _) => h,
            (dir, Some(p), Some(al)) => {
                let f = tape.mean(p)?;
                let f = tape.scale(&f, dir.sign())?;
                let lin = tape.scale(&h, al.lambda)?;
                let h2 = tape.square(&h)?;
                let quad = tape.scale(&h2, al.c)?;
                let pen = tape.add(&lin, &quad)?;
                tape.add(&f, &pen)?
            }
            _ => unreachable!("validated configuration"),
        };
        if !tape.value(&loss).all_finite() {
            return Err(Error::Divergence {
                epoch: e,
                detail: "non-finite loss".into(),
            });
        }
        self.model.store.zero_grad();
        tape.backward(&loss, &mut self.model.store)?;
        drop(tape);
        if let Some(u) = active {
            for id in self.model.segment_params(u) {
                self.model.store.grad_mut(id).scale_in_place(segments as f64);
            }
        }
        self.adam_theta.step(&mut self.model.store)?;
        if let (Some((_, store)), Some(adam)) = (self.hedge.as_mut(), self.adam_xi.as_mut()) {
            adam.step(store)?;
        }
        self.epoch += 1;
        if let Some(al) = self.auglag.as_mut() {
            al.after_step(self.epoch, h_value)?;
        }
        let (lambda, c) = self.auglag.as_ref().map_or((0.0, 0.0), |a| (a.lambda, a.c));
        let rec = EpochRecord {
            epoch: e,
            mse: h_value / j as f64,
            exotic_price,
            lambda,
            c,
        };
        log::debug!("epoch {e}: mse {:.3e} exotic {:?}", rec.mse, rec.exotic_price);
        self.records.push(rec.clone());
        Ok(rec)
    }

    /// Runs the remaining configured epochs.
    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.step()?;
        }
        Ok(())
    }

    /// Prices the instruments on evaluation paths.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let hedge = self.hedge.as_ref().map(|(h, s)| (h, s));
        evaluate(
            &self.model,
            hedge,
            &self.quotes,
            self.config.exotic.as_ref(),
            self.config.steps_per_year,
            self.config.n_eval,
            derive_seed(self.config.seed, EVAL_TAG),
            self.config.antithetic_eval,
            false,
        )
    }

    pub fn finish(self) -> Result<Calibration> {
        let evaluation = self.evaluate()?;
        let report = CalibReport {
            direction: self.config.direction,
            seed: self.config.seed,
            epochs: self.records,
            auglag: self.auglag.map(|a| a.history).unwrap_or_default(),
            final_mse: evaluation.mse,
            exotic: evaluation.exotic.map(|(spec, raw, cv)| (spec, if self.hedge.is_some() { cv } else { raw })),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        Ok(Calibration {
            model: self.model,
            hedge: self.hedge,
            report,
            evaluation,
        })
    }
}

/// Trains for `config.epochs` epochs from a fresh model.
pub fn calibrate(config: CalibConfig, surface: &MarketSurface) -> Result<Calibration> {
    let mut t = Trainer::new(config, surface)?;
    t.run()?;
    t.finish()
}

/// Plain calibration; the bound direction must be `None`.
pub fn calibrate_vanilla(config: CalibConfig, surface: &MarketSurface) -> Result<Calibration> {
    if config.direction != Direction::None {
        return Err(invalid("calibrate_vanilla takes direction none"));
    }
    calibrate(config, surface)
}

/// Lower or upper price bound, optionally continuing from a calibrated
/// model and hedge.
pub fn calibrate_bound(config: CalibConfig, surface: &MarketSurface, start: Option<(ModelSpec, Option<(HedgeNet, ParamStore)>)>) -> Result<Calibration> {
    if config.exotic.is_none() {
        return Err(invalid("a price bound needs an exotic"));
    }
    let mut t = match start {
        Some((model, hedge)) => Trainer::with_state(config, surface, model, hedge)?,
        None => Trainer::new(config, surface)?,
    };
    t.run()?;
    t.finish()
}

/// Calibrates one maturity at a time: segment `i` is trained on the
/// maturity-`T_i` quotes while earlier segments stay frozen. Returns the
/// model and the training record of each stage.
pub fn incremental_multi_maturity(config: CalibConfig, surface: &MarketSurface) -> Result<(ModelSpec, Vec<CalibReport>)> {
    config.validate()?;
    if config.direction != Direction::None {
        return Err(invalid("incremental training supports only unconstrained calibration"));
    }
    let mut model = ModelSpec::new(config.model.clone())?;
    let maturities = config.model.maturities.clone();
    let mut reports = Vec::with_capacity(maturities.len());
    for (i, &t) in maturities.iter().enumerate() {
        for k in 0..maturities.len() {
            model.set_segment_frozen(k, k != i);
        }
        model.set_scalars_frozen(i > 0);
        let stage = CalibConfig {
            exotic: None,
            randomized_maturity: false,
            seed: if i == 0 { config.seed } else { derive_seed(config.seed, 10 + i as u64) },
            ..config.clone()
        };
        let quotes = surface.restrict(&[t])?;
        let mut trainer = Trainer::with_state(stage, &quotes, model, None)?;
        if trainer.config.use_hedge {
            let mut store = ParamStore::new();
            let ts: Vec<f64> = trainer.quotes.iter().map(|q| q.maturity).collect();
            let h = HedgeNet::new(&mut store, &ts, None, trainer.model.kind() == ModelKind::Lsv, derive_seed(trainer.config.seed, HEDGE_TAG))?;
            trainer.adam_xi = Some(Adam::new(&store, AdamConfig { lr: trainer.config.lr_xi, ..AdamConfig::default() }));
            trainer.hedge = Some((h, store));
        }
        trainer.run()?;
        reports.push(CalibReport {
            direction: Direction::None,
            seed: trainer.config.seed,
            epochs: trainer.records.clone(),
            auglag: Vec::new(),
            final_mse: trainer.records.last().map_or(f64::NAN, |r| r.mse),
            exotic: None,
            wall_clock_secs: trainer.started.elapsed().as_secs_f64(),
        });
        model = trainer.model;
    }
    for k in 0..maturities.len() {
        model.set_segment_frozen(k, false);
    }
    model.set_scalars_frozen(false);
    Ok((model, reports))
}
