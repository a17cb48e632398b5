//! Run configuration: one TOML file with a section per module.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use nsde::calibrate::{CalibConfig, Direction};
use nsde::market::{HestonParams, HestonScheme, HestonSim, OptionKind, OptionSpec};
use nsde::sde::{ModelConfig, ModelKind};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelSection,
    pub market: MarketSection,
    pub training: TrainingSection,
    pub bound: BoundSection,
    pub exotic: ExoticSection,
    pub evaluation: EvaluationSection,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `lv` or `lsv`.
    pub kind: String,
    pub maturities: Vec<f64>,
    pub hidden: Vec<usize>,
    pub initial_vol: f64,
    pub final_weight_scale: f64,
    pub v0: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MarketSection {
    pub s0: f64,
    pub r: f64,
    pub kappa: f64,
    pub mu: f64,
    pub eta: f64,
    pub v0: f64,
    pub rho: f64,
    pub maturities: Vec<f64>,
    /// Strike preset: 11, 21, 31 or 41 strikes centred on 1.
    pub strikes: usize,
    pub paths: usize,
    pub antithetic: bool,
    /// `euler` or `tamed`.
    pub scheme: String,
    pub steps_per_year: usize,
    pub substeps: usize,
    /// Grid of the lookback references.
    pub lookback_steps_per_year: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub steps_per_year: usize,
    pub n_train: usize,
    pub antithetic: bool,
    pub epochs: usize,
    pub lr_theta: f64,
    pub lr_xi: f64,
    pub lr_halving: usize,
    pub use_hedge: bool,
    pub randomized_maturity: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BoundSection {
    pub lambda0: f64,
    pub c0: f64,
    pub every: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExoticSection {
    /// `lookback_call`, `european_call`, `european_put` or `none`.
    pub kind: String,
    /// Defaults to the last model maturity when absent.
    pub maturity: Option<f64>,
    pub strike: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub paths: usize,
    pub antithetic: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSection::default(),
            market: MarketSection::default(),
            training: TrainingSection::default(),
            bound: BoundSection::default(),
            exotic: ExoticSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            kind: m.kind.as_str().into(),
            maturities: m.maturities,
            hidden: m.hidden,
            initial_vol: m.initial_vol,
            final_weight_scale: m.final_weight_scale,
            v0: m.v0,
            rho: m.rho,
        }
    }
}

impl Default for MarketSection {
    fn default() -> Self {
        let p = HestonParams::default();
        let sim = HestonSim::default();
        Self {
            s0: p.x0,
            r: p.r,
            kappa: p.kappa,
            mu: p.mu,
            eta: p.eta,
            v0: p.v0,
            rho: p.rho,
            maturities: nsde::market::default_maturities(),
            strikes: 21,
            paths: 400_000,
            antithetic: true,
            scheme: "euler".into(),
            steps_per_year: sim.steps_per_year,
            substeps: sim.substeps,
            lookback_steps_per_year: 720,
        }
    }
}

impl Default for TrainingSection {
    fn default() -> Self {
        let c = CalibConfig::default();
        Self {
            steps_per_year: c.steps_per_year,
            n_train: c.n_train,
            antithetic: c.antithetic_train,
            epochs: c.epochs,
            lr_theta: c.lr_theta,
            lr_xi: c.lr_xi,
            lr_halving: c.lr_halving,
            use_hedge: c.use_hedge,
            randomized_maturity: c.randomized_maturity,
        }
    }
}

impl Default for BoundSection {
    fn default() -> Self {
        let c = CalibConfig::default();
        Self {
            lambda0: c.lambda0,
            c0: c.c0,
            every: c.auglag_every,
        }
    }
}

impl Default for ExoticSection {
    fn default() -> Self {
        Self {
            kind: OptionKind::LookbackCall.as_str().into(),
            maturity: None,
            strike: None,
        }
    }
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let c = CalibConfig::default();
        Self {
            paths: c.n_eval,
            antithetic: c.antithetic_eval,
        }
    }
}

/// Replaces the value at a dotted path; `value` is parsed as a TOML value
/// and falls back to a plain string.
fn set_path(root: &mut toml::Value, key: &str, value: &str) -> Result<()> {
    let parsed = match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .with_context(|| format!("override {key}: {part} is not a section"))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    bail!("empty override key")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `section.key=value` overrides.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut v = toml::Value::try_from(self)?;
        for o in overrides {
            let (k, val) = o
                .split_once('=')
                .with_context(|| format!("override {o:?} is not key=value"))?;
            set_path(&mut v, k.trim(), val.trim())?;
        }
        Ok(v.try_into()?)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(ModelConfig {
            kind: ModelKind::parse(&m.kind)?,
            r: self.market.r,
            s0: self.market.s0,
            maturities: m.maturities.clone(),
            hidden: m.hidden.clone(),
            initial_vol: m.initial_vol,
            final_weight_scale: m.final_weight_scale,
            v0: m.v0,
            rho: m.rho,
            seed: self.seed,
        })
    }

    pub fn heston(&self) -> Result<HestonSim> {
        let m = &self.market;
        let scheme = match m.scheme.as_str() {
            "euler" => HestonScheme::Euler,
            "tamed" => HestonScheme::Tamed,
            other => bail!(nsde::Error::InvalidArgument(format!("unknown Heston scheme {other:?} (euler, tamed)"))),
        };
        let sim = HestonSim {
            params: HestonParams {
                x0: m.s0,
                r: m.r,
                kappa: m.kappa,
                mu: m.mu,
                eta: m.eta,
                v0: m.v0,
                rho: m.rho,
            },
            steps_per_year: m.steps_per_year,
            substeps: m.substeps,
            scheme,
            antithetic: m.antithetic,
        };
        sim.params.validate()?;
        Ok(sim)
    }

    pub fn exotic(&self) -> Result<Option<OptionSpec>> {
        let e = &self.exotic;
        if e.kind == "none" {
            return Ok(None);
        }
        let maturity = match e.maturity {
            Some(t) => t,
            None => *self
                .model
                .maturities
                .last()
                .ok_or_else(|| nsde::Error::InvalidArgument("model has no maturities".into()))?,
        };
        let spec = OptionSpec {
            kind: OptionKind::parse(&e.kind)?,
            maturity,
            strike: e.strike,
        };
        spec.validate()?;
        Ok(Some(spec))
    }

    pub fn calib_config(&self, direction: Direction) -> Result<CalibConfig> {
        let t = &self.training;
        let c = CalibConfig {
            model: self.model_config()?,
            steps_per_year: t.steps_per_year,
            n_train: t.n_train,
            antithetic_train: t.antithetic,
            n_eval: self.evaluation.paths,
            antithetic_eval: self.evaluation.antithetic,
            epochs: t.epochs,
            lr_theta: t.lr_theta,
            lr_xi: t.lr_xi,
            lr_halving: t.lr_halving,
            direction,
            exotic: self.exotic()?,
            use_hedge: t.use_hedge,
            randomized_maturity: t.randomized_maturity,
            lambda0: self.bound.lambda0,
            c0: self.bound.c0,
            auglag_every: self.bound.every,
            seed: self.seed,
        };
        c.validate()?;
        Ok(c)
    }
}
