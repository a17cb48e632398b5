//! Feed-forward networks and per-maturity segmented networks.

mod checkpoint;

pub use checkpoint::{format_f64, Checkpoint};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Activation, Backend, Matrix, ParamId, ParamStore};
use crate::error::{invalid, Result};
use crate::rng::derive_seed;

/// Tolerance used when locating a time inside the maturity grid.
pub(crate) const TIME_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputTransform {
    Identity,
    Softplus,
}

impl OutputTransform {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputTransform::Identity => "identity",
            OutputTransform::Softplus => "softplus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(OutputTransform::Identity),
            "softplus" => Ok(OutputTransform::Softplus),
            other => Err(invalid(format!("unknown output transform {other}"))),
        }
    }
}

/// Initialization knobs applied on top of He initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct InitOptions {
    /// Multiplier on the final layer's weights.
    pub final_weight_scale: f64,
    /// Initial value of every output bias.
    pub output_bias: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            final_weight_scale: 1.0,
            output_bias: 0.0,
        }
    }
}

/// Number of scalars in a fully connected network with the given layer sizes.
pub fn parameter_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Fully connected network: relu hidden layers, then an output transform.
#[derive(Clone, Debug)]
pub struct Mlp {
    name: String,
    sizes: Vec<usize>,
    output: OutputTransform,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
}

impl Mlp {
    /// He-initialized network (weights ~ N(0, 2/fan_in), zero biases).
    pub fn new(store: &mut ParamStore, name: &str, sizes: &[usize], output: OutputTransform, seed: u64) -> Result<Self> {
        Self::with_init(store, name, sizes, output, seed, &InitOptions::default())
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        output: OutputTransform,
        seed: u64,
        init: &InitOptions,
    ) -> Result<Self> {
        validate_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for k in 0..layers {
            let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
            let mut scale = (2.0 / fan_in as f64).sqrt();
            let mut bias = 0.0;
            if k + 1 == layers {
                scale *= init.final_weight_scale;
                bias = init.output_bias;
            }
            let w = Matrix::from_fn(fan_in, fan_out, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            });
            weights.push(store.add(format!("{name}.w{k}"), w)?);
            biases.push(store.add(format!("{name}.b{k}"), Matrix::filled(1, fan_out, bias))?);
        }
        Ok(Self {
            name: name.to_string(),
            sizes: sizes.to_vec(),
            output,
            weights,
            biases,
        })
    }

    /// Attaches to parameters already present in `store` under `name`.
    pub fn bind(store: &ParamStore, name: &str, sizes: &[usize], output: OutputTransform) -> Result<Self> {
        validate_sizes(sizes)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for k in 0..sizes.len() - 1 {
            let lookup = |p: String, shape: (usize, usize)| -> Result<ParamId> {
                let id = store
                    .find(&p)
                    .ok_or_else(|| invalid(format!("missing parameter {p}")))?;
                if store.value(id).shape() != shape {
                    return Err(invalid(format!(
                        "parameter {p} has shape {:?}, architecture expects {shape:?}",
                        store.value(id).shape()
                    )));
                }
                Ok(id)
            };
            weights.push(lookup(format!("{name}.w{k}"), (sizes[k], sizes[k + 1]))?);
            biases.push(lookup(format!("{name}.b{k}"), (1, sizes[k + 1]))?);
        }
        Ok(Self {
            name: name.to_string(),
            sizes: sizes.to_vec(),
            output,
            weights,
            biases,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn output(&self) -> OutputTransform {
        self.output
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        parameter_count(&self.sizes)
    }

    pub fn forward<B: Backend>(&self, be: &mut B, store: &ParamStore, x: &B::Array) -> Result<B::Array> {
        let (_, width) = be.shape(x);
        if width != self.sizes[0] {
            return Err(crate::error::shape_err(
                "mlp",
                format!("{} expects {} inputs, got {width}", self.name, self.sizes[0]),
            ));
        }
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        for (k, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wa = be.param(store, w);
            let ba = be.param(store, b);
            let act = if k == last { Activation::Identity } else { Activation::Relu };
            h = be.affine(&h, &wa, &ba, act)?;
        }
        match self.output {
            OutputTransform::Identity => Ok(h),
            OutputTransform::Softplus => be.softplus(&h),
        }
    }

    /// Rescales any weight matrix whose Frobenius norm exceeds `max_norm`.
    pub fn clip_weights(&self, store: &mut ParamStore, max_norm: f64) {
        for &w in &self.weights {
            if store.is_frozen(w) {
                continue;
            }
            let m = store.value_mut(w);
            let norm = m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > max_norm {
                m.scale_in_place(max_norm / norm);
            }
        }
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(invalid("a network needs at least an input and an output size"));
    }
    if sizes.contains(&0) {
        return Err(invalid("layer sizes must be positive"));
    }
    Ok(())
}

/// Architecture of one segmented network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    /// Spatial inputs, excluding the time feature.
    pub features: usize,
    pub hidden: Vec<usize>,
    pub output: OutputTransform,
    /// Whether normalized time `t / T` is prepended to the inputs.
    pub time_input: bool,
    pub init: InitOptions,
}

impl NetSpec {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.features + usize::from(self.time_input)];
        s.extend_from_slice(&self.hidden);
        s.push(1);
        s
    }
}

/// One network per maturity interval `[T_{i-1}, T_i)`, the last one closed.
#[derive(Clone, Debug)]
pub struct SegmentedNet {
    name: String,
    maturities: Vec<f64>,
    spec: NetSpec,
    segments: Vec<Mlp>,
}

impl SegmentedNet {
    pub fn new(store: &mut ParamStore, name: &str, maturities: &[f64], spec: NetSpec, seed: u64) -> Result<Self> {
        validate_maturities(maturities)?;
        let sizes = spec.sizes();
        let segments = (0..maturities.len())
            .map(|i| {
                Mlp::with_init(
                    store,
                    &format!("{name}.seg{i}"),
                    &sizes,
                    spec.output,
                    derive_seed(seed, i as u64 + 1),
                    &spec.init,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            name: name.to_string(),
            maturities: maturities.to_vec(),
            spec,
            segments,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, maturities: &[f64], spec: NetSpec) -> Result<Self> {
        validate_maturities(maturities)?;
        let sizes = spec.sizes();
        let segments = (0..maturities.len())
            .map(|i| Mlp::bind(store, &format!("{name}.seg{i}"), &sizes, spec.output))
            .collect::<Result<_>>()?;
        Ok(Self {
            name: name.to_string(),
            maturities: maturities.to_vec(),
            spec,
            segments,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    pub fn horizon(&self) -> f64 {
        *self.maturities.last().expect("non-empty maturities")
    }

    pub fn segments(&self) -> &[Mlp] {
        &self.segments
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    /// Index of the segment whose interval contains `t`.
    pub fn segment_index(&self, t: f64) -> Result<usize> {
        segment_for(&self.maturities, t)
    }

    pub fn segment_params(&self, i: usize) -> Vec<ParamId> {
        self.segments[i].param_ids()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.segments.iter().flat_map(|m| m.param_ids()).collect()
    }

    pub fn set_frozen(&self, store: &mut ParamStore, segment: usize, frozen: bool) {
        for id in self.segments[segment].param_ids() {
            store.set_frozen(id, frozen);
        }
    }

    /// Evaluates the segment active at time `t` on `features` (each `n × k`).
    pub fn forward<B: Backend>(&self, be: &mut B, store: &ParamStore, t: f64, features: &[B::Array]) -> Result<B::Array> {
        let seg = self.segment_index(t)?;
        let rows = features
            .first()
            .map(|f| be.shape(f).0)
            .ok_or_else(|| invalid("no input features"))?;
        let mut cols = Vec::with_capacity(features.len() + 1);
        if self.spec.time_input {
            cols.push(be.constant(Matrix::filled(rows, 1, t / self.horizon())));
        }
        cols.extend(features.iter().cloned());
        let input = if cols.len() == 1 {
            cols.pop().unwrap()
        } else {
            be.concat_cols(&cols)?
        };
        self.segments[seg].forward(be, store, &input)
    }

    pub fn clip_weights(&self, store: &mut ParamStore, max_norm: f64) {
        for s in &self.segments {
            s.clip_weights(store, max_norm);
        }
    }
}

pub(crate) fn validate_maturities(maturities: &[f64]) -> Result<()> {
    if maturities.is_empty() {
        return Err(invalid("at least one maturity is required"));
    }
    if maturities[0] <= 0.0 || maturities.windows(2).any(|w| w[1] <= w[0]) || maturities.iter().any(|t| !t.is_finite()) {
        return Err(invalid(format!(
            "maturities must be positive and strictly increasing, got {maturities:?}"
        )));
    }
    Ok(())
}

/// Segment of `t` in the grid of right endpoints `maturities`.
pub(crate) fn segment_for(maturities: &[f64], t: f64) -> Result<usize> {
    let horizon = *maturities.last().expect("non-empty maturities");
    if !(t >= -TIME_EPS && t <= horizon + TIME_EPS) {
        return Err(invalid(format!("time {t} outside [0, {horizon}]")));
    }
    Ok(maturities
        .iter()
        .position(|&m| t < m - TIME_EPS)
        .unwrap_or(maturities.len() - 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{softplus, Eager, Tape};

    fn spec(output: OutputTransform) -> NetSpec {
        NetSpec {
            features: 1,
            hidden: vec![8, 8],
            output,
            time_input: true,
            init: InitOptions::default(),
        }
    }

    #[test]
    fn parameter_count_formula() {
        // 2*50+50 + 3*(50*50+50) + 50*1+1
        assert_eq!(parameter_count(&[2, 50, 50, 50, 50, 1]), 7851);
        let mut s = ParamStore::new();
        let m = Mlp::new(&mut s, "n", &[2, 50, 50, 50, 50, 1], OutputTransform::Softplus, 1).unwrap();
        let stored: usize = m.param_ids().iter().map(|&id| s.value(id).len()).sum();
        assert_eq!(stored, 7851);
        assert_eq!(m.param_count(), 7851);
    }

    #[test]
    fn empty_sizes_rejected() {
        let mut s = ParamStore::new();
        assert!(Mlp::new(&mut s, "n", &[], OutputTransform::Identity, 0).is_err());
        assert!(Mlp::new(&mut s, "n", &[3], OutputTransform::Identity, 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let build = || {
            let mut s = ParamStore::new();
            let m = Mlp::new(&mut s, "n", &[3, 7, 1], OutputTransform::Identity, 99).unwrap();
            s.flat_values(&m.param_ids())
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn he_scale_and_zero_biases() {
        let mut s = ParamStore::new();
        let m = Mlp::new(&mut s, "n", &[400, 300, 1], OutputTransform::Identity, 5).unwrap();
        let w0 = s.value(m.param_ids()[0]);
        let var = w0.as_slice().iter().map(|v| v * v).sum::<f64>() / w0.len() as f64;
        assert!((var - 2.0 / 400.0).abs() < 0.05 * 2.0 / 400.0);
        assert!(s.value(m.param_ids()[1]).as_slice().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_input_gives_output_transform_of_zero() {
        let mut s = ParamStore::new();
        let m = Mlp::new(&mut s, "n", &[2, 5, 1], OutputTransform::Softplus, 0).unwrap();
        let mut e = Eager::new();
        let x = e.constant(Matrix::zeros(3, 2));
        let y = m.forward(&mut e, &s, &x).unwrap();
        assert!(y.as_slice().iter().all(|&v| (v - std::f64::consts::LN_2).abs() < 1e-15));
    }

    #[test]
    fn constant_network() {
        let mut s = ParamStore::new();
        let m = Mlp::new(&mut s, "n", &[2, 4, 1], OutputTransform::Identity, 0).unwrap();
        for id in m.param_ids() {
            s.value_mut(id).fill(0.0);
        }
        s.value_mut(*m.param_ids().last().unwrap()).fill(0.37);
        let mut e = Eager::new();
        let x = e.constant(Matrix::from_fn(4, 2, |i, j| (i * 3 + j) as f64 - 2.5));
        let y = m.forward(&mut e, &s, &x).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn diffusion_style_init() {
        let mut s = ParamStore::new();
        let init = InitOptions {
            final_weight_scale: 0.1,
            output_bias: crate::autodiff::softplus_inverse(0.2),
        };
        let m = Mlp::with_init(&mut s, "sig", &[2, 6, 1], OutputTransform::Softplus, 3, &init).unwrap();
        let ids = m.param_ids();
        assert!((softplus(s.value(ids[3]).get(0, 0)) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn segment_selection() {
        let mut s = ParamStore::new();
        let net = SegmentedNet::new(&mut s, "sig", &[0.5, 1.0], spec(OutputTransform::Softplus), 1).unwrap();
        assert_eq!(net.segment_index(0.0).unwrap(), 0);
        assert_eq!(net.segment_index(0.4999).unwrap(), 0);
        assert_eq!(net.segment_index(0.5).unwrap(), 1);
        assert_eq!(net.segment_index(1.0).unwrap(), 1);
        assert!(net.segment_index(1.01).is_err());
        assert!(net.segment_index(-0.1).is_err());
    }

    #[test]
    fn first_segment_output_ignores_second_segment() {
        let mut s = ParamStore::new();
        let net = SegmentedNet::new(&mut s, "sig", &[0.5, 1.0], spec(OutputTransform::Softplus), 1).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Matrix::column(vec![0.9, 1.0, 1.1]));
        let y = net.forward(&mut t, &s, 0.25, &[x]).unwrap();
        assert!(t.value(&y).as_slice().iter().all(|&v| v > 0.0));
        let m = t.mean(&y).unwrap();
        t.backward(&m, &mut s).unwrap();
        let g0 = s.flat_grad(&net.segment_params(0));
        let g1 = s.flat_grad(&net.segment_params(1));
        assert!(g0.iter().any(|&g| g != 0.0));
        assert!(g1.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn frozen_segment_gets_no_gradient() {
        let mut s = ParamStore::new();
        let net = SegmentedNet::new(&mut s, "sig", &[0.5, 1.0], spec(OutputTransform::Softplus), 1).unwrap();
        net.set_frozen(&mut s, 1, true);
        let mut t = Tape::new();
        let x = t.constant(Matrix::column(vec![0.9, 1.0, 1.1]));
        let y = net.forward(&mut t, &s, 0.75, &[x]).unwrap();
        let m = t.mean(&y).unwrap();
        t.backward(&m, &mut s).unwrap();
        assert!(s.flat_grad(&net.param_ids()).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bind_finds_existing_parameters() {
        let mut s = ParamStore::new();
        let net = SegmentedNet::new(&mut s, "sig", &[0.5, 1.0], spec(OutputTransform::Softplus), 1).unwrap();
        let again = SegmentedNet::bind(&s, "sig", &[0.5, 1.0], spec(OutputTransform::Softplus)).unwrap();
        assert_eq!(net.param_ids(), again.param_ids());
        let mut wrong = spec(OutputTransform::Softplus);
        wrong.hidden = vec![8, 9];
        assert!(SegmentedNet::bind(&s, "sig", &[0.5, 1.0], wrong).is_err());
    }

    #[test]
    fn clipping_bounds_weight_norm() {
        let mut s = ParamStore::new();
        let m = Mlp::new(&mut s, "n", &[20, 20, 1], OutputTransform::Identity, 2).unwrap();
        m.clip_weights(&mut s, 0.5);
        let w = s.value(m.param_ids()[0]);
        let norm = w.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 0.5 + 1e-12);
    }
}
