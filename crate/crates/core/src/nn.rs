//! Parameter bookkeeping and the small layer vocabulary the network is built
//! from. Parameters live outside the tape; each training step binds them as
//! fresh leaves so gradients can be read back per parameter.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Which optimizer group a parameter belongs to. The encoder group covers the
/// backbone, mutual-learning modules and edge modules; the decoder group
/// covers the decoder blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// All trainable parameters of a model, addressable by id and by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn by_name(&self, name: &str) -> Option<(ParamId, &Param)> {
        self.params
            .iter()
            .enumerate()
            .find(|(_, p)| p.name == name)
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Tape leaves for every parameter of one step's forward pass.
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    /// Inserts every parameter as a tape leaf, in registration order.
    pub fn bind(store: &ParamStore, tape: &mut Tape) -> Binding {
        let nodes = store
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        Binding { nodes }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Zero-mean normal with std `sqrt(2 / fan_in)`, biases zero.
    HeNormal,
    /// All zeros (used for the residual edge-feature projection so the
    /// injection starts as the identity).
    Zero,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    // Box-Muller on ChaCha output keeps the draw sequence stable across rand versions.
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(r * theta.cos() * std);
        if data.len() < n {
            data.push(r * theta.sin() * std);
        }
    }
    Tensor::from_vec(shape, data).expect("shape/data mismatch in init")
}

/// Stride-1 same-size convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
        dilation: usize,
        init: Init,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "{name}: convolution kernel must be odd, got {k}"
            )));
        }
        if cin == 0 || cout == 0 {
            return Err(Error::Config(format!("{name}: zero channel count")));
        }
        let shape = [cout, cin, k, k];
        let weight = match init {
            Init::HeNormal => he_normal(rng, &shape, cin * k * k),
            Init::Zero => Tensor::zeros(&shape),
        };
        let weight = store.register(format!("{name}.weight"), group, weight);
        let bias = store.register(format!("{name}.bias"), group, Tensor::zeros(&[cout]));
        Ok(Conv2dLayer {
            weight,
            bias,
            dilation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: NodeId) -> Result<NodeId> {
        tape.conv2d(x, bind.node(self.weight), bind.node(self.bias), self.dilation)
    }
}

/// 2x2-stride-2 transposed convolution (exact x2 spatial upsampling).
#[derive(Debug, Clone)]
pub struct ConvT2Layer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvT2Layer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        if cin == 0 || cout == 0 {
            return Err(Error::Config(format!("{name}: zero channel count")));
        }
        let weight = he_normal(rng, &[cin, cout, 2, 2], cin * 4);
        let weight = store.register(format!("{name}.weight"), group, weight);
        let bias = store.register(format!("{name}.bias"), group, Tensor::zeros(&[cout]));
        Ok(ConvT2Layer { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: NodeId) -> Result<NodeId> {
        tape.conv_transpose2(x, bind.node(self.weight), bind.node(self.bias))
    }
}
