//! Neural LV and LSV model definitions.

use crate::autodiff::{softplus_inverse, Backend, Matrix, ParamId, ParamStore};
use crate::error::{invalid, Error, Result};
use crate::nets::{validate_maturities, Checkpoint, InitOptions, NetSpec, OutputTransform, SegmentedNet};
use crate::rng::derive_seed;

use super::Coefficients;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// `dS = rS dt + σ(t,S) S dW`.
    Lv,
    /// `dS = rS dt + σ^S(t,S,V) S dW^S`, `dV = b^V(V) dt + σ^V(V) dW^V`,
    /// with `d⟨W^S, W^V⟩ = ρ dt`.
    Lsv,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Lv => "lv",
            ModelKind::Lsv => "lsv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lv" => Ok(ModelKind::Lv),
            "lsv" => Ok(ModelKind::Lsv),
            other => Err(invalid(format!("unknown model kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub r: f64,
    pub s0: f64,
    /// Right endpoints of the network segments; the last one is the horizon.
    pub maturities: Vec<f64>,
    pub hidden: Vec<usize>,
    /// Volatility produced by a freshly initialized diffusion network.
    pub initial_vol: f64,
    /// Multiplier on every network's final-layer weights at initialization.
    pub final_weight_scale: f64,
    /// Initial value of the trainable `V_0` (LSV).
    pub v0: f64,
    /// Initial correlation (LSV).
    pub rho: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Lv,
            r: 0.025,
            s0: 1.0,
            maturities: (1..=6).map(|i| 2.0 * i as f64 / 12.0).collect(),
            hidden: vec![50; 4],
            initial_vol: 0.2,
            final_weight_scale: 0.1,
            v0: 0.04,
            rho: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
enum Dynamics {
    Lv {
        sigma: SegmentedNet,
    },
    Lsv {
        sigma_s: SegmentedNet,
        drift_v: SegmentedNet,
        sigma_v: SegmentedNet,
        v0: ParamId,
        rho_raw: ParamId,
    },
}

/// A neural SDE with its parameters.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    config: ModelConfig,
    pub store: ParamStore,
    dynamics: Dynamics,
}

fn net_specs(config: &ModelConfig) -> Vec<(&'static str, NetSpec)> {
    let vol_init = InitOptions {
        final_weight_scale: config.final_weight_scale,
        output_bias: softplus_inverse(config.initial_vol),
    };
    let drift_init = InitOptions {
        final_weight_scale: config.final_weight_scale,
        output_bias: 0.0,
    };
    let spec = |features, output, time_input, init: &InitOptions| NetSpec {
        features,
        hidden: config.hidden.clone(),
        output,
        time_input,
        init: init.clone(),
    };
    match config.kind {
        ModelKind::Lv => vec![("sigma", spec(1, OutputTransform::Softplus, true, &vol_init))],
        ModelKind::Lsv => vec![
            ("sigma_s", spec(2, OutputTransform::Softplus, true, &vol_init)),
            ("drift_v", spec(1, OutputTransform::Identity, false, &drift_init)),
            ("sigma_v", spec(1, OutputTransform::Softplus, false, &vol_init)),
        ],
    }
}

fn validate(config: &ModelConfig) -> Result<()> {
    validate_maturities(&config.maturities)?;
    if !(config.s0 > 0.0) || !config.r.is_finite() {
        return Err(invalid("s0 must be positive and r finite"));
    }
    if !(config.initial_vol > 0.0) {
        return Err(invalid("initial volatility must be positive"));
    }
    if !(config.rho > -1.0 && config.rho < 1.0) {
        return Err(invalid("initial correlation must lie in (-1, 1)"));
    }
    if config.hidden.contains(&0) {
        return Err(invalid("hidden layer sizes must be positive"));
    }
    Ok(())
}

impl ModelSpec {
    pub fn new(config: ModelConfig) -> Result<Self> {
        validate(&config)?;
        let mut store = ParamStore::new();
        let mut nets = Vec::new();
        for (k, (name, spec)) in net_specs(&config).into_iter().enumerate() {
            nets.push(SegmentedNet::new(
                &mut store,
                name,
                &config.maturities,
                spec,
                derive_seed(config.seed, 100 + k as u64),
            )?);
        }
        let dynamics = match config.kind {
            ModelKind::Lv => Dynamics::Lv {
                sigma: nets.remove(0),
            },
            ModelKind::Lsv => {
                let v0 = store.add("v0", Matrix::scalar(config.v0))?;
                let rho_raw = store.add("rho_raw", Matrix::scalar(config.rho.atanh()))?;
                let sigma_v = nets.pop().unwrap();
                let drift_v = nets.pop().unwrap();
                let sigma_s = nets.pop().unwrap();
                Dynamics::Lsv {
                    sigma_s,
                    drift_v,
                    sigma_v,
                    v0,
                    rho_raw,
                }
            }
        };
        Ok(Self {
            config,
            store,
            dynamics,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn r(&self) -> f64 {
        self.config.r
    }

    pub fn s0(&self) -> f64 {
        self.config.s0
    }

    pub fn maturities(&self) -> &[f64] {
        &self.config.maturities
    }

    pub fn horizon(&self) -> f64 {
        *self.config.maturities.last().unwrap()
    }

    pub fn num_segments(&self) -> usize {
        self.config.maturities.len()
    }

    pub fn nets(&self) -> Vec<&SegmentedNet> {
        match &self.dynamics {
            Dynamics::Lv { sigma } => vec![sigma],
            Dynamics::Lsv {
                sigma_s,
                drift_v,
                sigma_v,
                ..
            } => vec![sigma_s, drift_v, sigma_v],
        }
    }

    /// Scalar parameters shared by all segments (`V_0` and the raw correlation).
    pub fn scalar_params(&self) -> Vec<ParamId> {
        match &self.dynamics {
            Dynamics::Lv { .. } => Vec::new(),
            Dynamics::Lsv { v0, rho_raw, .. } => vec![*v0, *rho_raw],
        }
    }

    /// Parameters of maturity segment `i` across all networks.
    pub fn segment_params(&self, i: usize) -> Vec<ParamId> {
        self.nets().iter().flat_map(|n| n.segment_params(i)).collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    pub fn set_segment_frozen(&mut self, i: usize, frozen: bool) {
        let ids = self.segment_params(i);
        for id in ids {
            self.store.set_frozen(id, frozen);
        }
    }

    pub fn set_scalars_frozen(&mut self, frozen: bool) {
        for id in self.scalar_params() {
            self.store.set_frozen(id, frozen);
        }
    }

    /// Current correlation `tanh(ρ̂)` (LSV), else `None`.
    pub fn rho(&self) -> Option<f64> {
        match &self.dynamics {
            Dynamics::Lv { .. } => None,
            Dynamics::Lsv { rho_raw, .. } => Some(self.store.value(*rho_raw).get(0, 0).tanh()),
        }
    }

    pub fn clip_weights(&mut self, max_norm: f64) {
        let nets: Vec<SegmentedNet> = self.nets().into_iter().cloned().collect();
        for n in nets {
            n.clip_weights(&mut self.store, max_norm);
        }
    }

    pub(crate) fn initial_variance<B: Backend>(&self, be: &mut B, n: usize) -> Result<B::Array> {
        let Dynamics::Lsv { v0, .. } = &self.dynamics else {
            return Err(invalid("LV models have no variance factor"));
        };
        let p = be.param(&self.store, *v0);
        let z = be.constant(Matrix::zeros(n, 1));
        be.add(&z, &p)
    }

    /// `(ρ, √(1-ρ²))`, each `1 × 1`.
    pub(crate) fn correlation_terms<B: Backend>(&self, be: &mut B) -> Result<(B::Array, B::Array)> {
        let Dynamics::Lsv { rho_raw, .. } = &self.dynamics else {
            return Err(invalid("LV models have no correlation"));
        };
        let p = be.param(&self.store, *rho_raw);
        let rho = be.tanh(&p)?;
        let sq = be.square(&rho)?;
        let neg = be.scale(&sq, -1.0)?;
        let one_minus = be.add_scalar(&neg, 1.0)?;
        let bar = be.sqrt(&one_minus)?;
        Ok((rho, bar))
    }

    /// Tamed coefficients at time `t` for a step of length `dt`.
    pub(crate) fn coefficients<B: Backend>(
        &self,
        be: &mut B,
        t: f64,
        dt: f64,
        s: &B::Array,
        v: Option<&B::Array>,
    ) -> Result<Coefficients<B::Array>> {
        let store = &self.store;
        // The spot enters as S/S0 - 1 so that relu kinks start near the money.
        let rel = be.scale(s, 1.0 / self.config.s0)?;
        let x = be.add_scalar(&rel, -1.0)?;
        let (drift, diff) = match &self.dynamics {
            Dynamics::Lv { sigma } => {
                let sig = sigma.forward(be, store, t, std::slice::from_ref(&x))?;
                (be.scale(s, self.config.r)?, be.mul(&sig, s)?)
            }
            Dynamics::Lsv {
                sigma_s,
                drift_v,
                sigma_v,
                ..
            } => {
                let v = v.ok_or_else(|| invalid("LSV coefficients need the variance state"))?;
                let sig_s = sigma_s.forward(be, store, t, &[x, v.clone()])?;
                let b_v = drift_v.forward(be, store, t, std::slice::from_ref(v))?;
                let sig_v = sigma_v.forward(be, store, t, std::slice::from_ref(v))?;
                let rs = be.scale(s, self.config.r)?;
                let drift = be.concat_cols(&[rs, b_v])?;
                let ds = be.mul(&sig_s, s)?;
                let diff = be.concat_cols(&[ds, sig_v])?;
                (drift, diff)
            }
        };
        let tamed = be.tame(&drift, dt)?;
        let drift_increment = be.scale(&tamed, dt)?;
        let diffusion = be.tame(&diff, dt)?;
        Ok(Coefficients {
            drift_increment,
            diffusion,
        })
    }

    /// Writes configuration, architecture and parameters under `model.*`.
    pub fn to_checkpoint(&self, cp: &mut Checkpoint) {
        let c = &self.config;
        cp.set("model.kind", c.kind.as_str());
        cp.set_f64("model.r", c.r);
        cp.set_f64("model.s0", c.s0);
        cp.set_f64s("model.maturities", &c.maturities);
        cp.set_usizes("model.hidden", &c.hidden);
        cp.set_f64("model.initial_vol", c.initial_vol);
        cp.set_f64("model.final_weight_scale", c.final_weight_scale);
        cp.set_f64("model.v0", c.v0);
        cp.set_f64("model.rho", c.rho);
        cp.set("model.seed", c.seed.to_string());
        for net in self.nets() {
            let key = |f: &str| format!("net.{}.{f}", net.name());
            cp.set_usizes(&key("sizes"), &net.spec().sizes());
            cp.set(&key("output"), net.spec().output.as_str());
            cp.set(&key("time_input"), net.spec().time_input.to_string());
        }
        cp.put_params("model", &self.store);
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        let config = ModelConfig {
            kind: ModelKind::parse(cp.require("model.kind")?)?,
            r: cp.get_f64("model.r")?,
            s0: cp.get_f64("model.s0")?,
            maturities: cp.get_f64s("model.maturities")?,
            hidden: cp.get_usizes("model.hidden")?,
            initial_vol: cp.get_f64("model.initial_vol")?,
            final_weight_scale: cp.get_f64("model.final_weight_scale")?,
            v0: cp.get_f64("model.v0")?,
            rho: cp.get_f64("model.rho")?,
            seed: cp.get_u64("model.seed")?,
        };
        validate(&config)?;
        let store = cp.params("model")?;
        let mut nets = Vec::new();
        for (name, spec) in net_specs(&config) {
            let key = |f: &str| format!("net.{name}.{f}");
            if cp.get_usizes(&key("sizes"))? != spec.sizes()
                || OutputTransform::parse(cp.require(&key("output"))?)? != spec.output
                || cp.get_bool(&key("time_input"))? != spec.time_input
            {
                return Err(Error::Parse(format!("architecture of network {name} does not match")));
            }
            nets.push(SegmentedNet::bind(&store, name, &config.maturities, spec)?);
        }
        let scalar = |n: &str| {
            store
                .find(n)
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks parameter {n}")))
        };
        let dynamics = match config.kind {
            ModelKind::Lv => Dynamics::Lv {
                sigma: nets.remove(0),
            },
            ModelKind::Lsv => {
                let (v0, rho_raw) = (scalar("v0")?, scalar("rho_raw")?);
                let sigma_v = nets.pop().unwrap();
                let drift_v = nets.pop().unwrap();
                let sigma_s = nets.pop().unwrap();
                Dynamics::Lsv {
                    sigma_s,
                    drift_v,
                    sigma_v,
                    v0,
                    rho_raw,
                }
            }
        };
        let expected: usize = dynamics_param_count(&dynamics);
        if expected != store.len() {
            return Err(Error::Parse("checkpoint holds parameters the model does not use".into()));
        }
        Ok(Self {
            config,
            store,
            dynamics,
        })
    }
}

fn dynamics_param_count(d: &Dynamics) -> usize {
    match d {
        Dynamics::Lv { sigma } => sigma.param_ids().len(),
        Dynamics::Lsv {
            sigma_s,
            drift_v,
            sigma_v,
            ..
        } => sigma_s.param_ids().len() + drift_v.param_ids().len() + sigma_v.param_ids().len() + 2,
    }
}
