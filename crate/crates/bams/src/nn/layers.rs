//! Layer specifications, the named parameter store, initialization, and
//! tape-level forward builders for conv stacks and MLPs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::{Gradients, NodeId, Tape};
use crate::nn::tensor::Tensor;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub activation: Activation,
}

impl ConvLayerSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        activation: Activation,
    ) -> Self {
        ConvLayerSpec {
            in_channels,
            out_channels,
            kernel_size,
            dilation,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_size == 0
            || self.dilation == 0
        {
            return Err(Error::Config(format!(
                "conv layer fields must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Ordered map of named parameter tensors. Insertion order is canonical:
/// checkpoints serialize in it and the optimizer walks it, which keeps
/// every run of the same configuration bit-identical.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.tensors[i])
    }

    pub fn name_at(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn tensor_at(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_at_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Gradients aligned index-for-index with a [`ParamStore`].
pub type GradVec = Vec<Tensor>;

/// Parameter tensors bound onto a tape as leaf nodes.
pub struct BoundParams {
    map: HashMap<String, NodeId>,
    order: Vec<NodeId>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, store: &ParamStore) -> Self {
        let mut map = HashMap::with_capacity(store.len());
        let mut order = Vec::with_capacity(store.len());
        for (name, tensor) in store.iter() {
            let id = tape.leaf(tensor.clone());
            map.insert(name.to_string(), id);
            order.push(id);
        }
        BoundParams { map, order }
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter: {name}")))
    }

    /// Collects gradients for every bound parameter, in store order.
    pub fn collect_grads(&self, grads: &Gradients) -> GradVec {
        self.order.iter().map(|&id| grads.wrt(id)).collect()
    }
}

/// Uniform init in [-a, a] with a = 1/sqrt(fan_in). Biases use the same
/// range; a nonzero bias keeps relu-dead layers from emitting exact zero
/// vectors, which would park the normalized bootstrap outputs on the
/// epsilon guard.
fn init_weight(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.range_f64(-a, a)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

pub fn init_conv_stack(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    layers: &[ConvLayerSpec],
) -> Result<()> {
    for (i, spec) in layers.iter().enumerate() {
        spec.validate()?;
        let fan_in = spec.in_channels * spec.kernel_size;
        let w = init_weight(
            rng,
            &[spec.out_channels, spec.in_channels, spec.kernel_size],
            fan_in,
        );
        store.insert(format!("{prefix}.conv{i}.weight"), w)?;
        let b = init_weight(rng, &[spec.out_channels], fan_in);
        store.insert(format!("{prefix}.conv{i}.bias"), b)?;
    }
    Ok(())
}

/// `dims` lists layer widths input-first, e.g. [64, 128, 128, 90]. ReLU
/// between layers, linear output.
pub fn init_mlp(store: &mut ParamStore, rng: &mut Rng, prefix: &str, dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "mlp {prefix} needs at least input and output dims"
        )));
    }
    for i in 0..dims.len() - 1 {
        let w = init_weight(rng, &[dims[i], dims[i + 1]], dims[i]);
        store.insert(format!("{prefix}.fc{i}.weight"), w)?;
        let b = init_weight(rng, &[dims[i + 1]], dims[i]);
        store.insert(format!("{prefix}.fc{i}.bias"), b)?;
    }
    Ok(())
}

/// Runs a causal conv stack on the tape. Activations follow each layer's
/// spec; the caller decides what the final layer's activation is.
pub fn conv_stack_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    layers: &[ConvLayerSpec],
    x: NodeId,
) -> Result<NodeId> {
    let mut h = x;
    for (i, spec) in layers.iter().enumerate() {
        let w = bound.id(&format!("{prefix}.conv{i}.weight"))?;
        let b = bound.id(&format!("{prefix}.conv{i}.bias"))?;
        h = tape.causal_conv1d(h, w, Some(b), spec.dilation)?;
        if spec.activation == Activation::Relu {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Affine-ReLU chain with a linear final layer.
pub fn mlp_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    num_layers: usize,
    x: NodeId,
) -> Result<NodeId> {
    let mut h = x;
    for i in 0..num_layers {
        let w = bound.id(&format!("{prefix}.fc{i}.weight"))?;
        let b = bound.id(&format!("{prefix}.fc{i}.bias"))?;
        h = tape.affine(h, w, b)?;
        if i + 1 < num_layers {
            h = tape.relu(h);
        }
    }
    Ok(h)
}
