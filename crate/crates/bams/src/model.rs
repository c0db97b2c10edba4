//! The three-branch temporal encoder and its prediction heads.
//!
//! Three causal dilated conv stacks with different receptive fields run in
//! parallel over the same input frames and their per-frame outputs are
//! concatenated into one embedding. On top of it sit a future-action head,
//! a hidden-feature head, an optional pairwise-distance head for
//! multi-agent data, and one bootstrap predictor per bootstrapped branch
//! (short-term and long-term; the recent-past branch has none).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    conv_stack_forward, init_conv_stack, init_mlp, mlp_forward, Activation, BoundParams,
    ConvLayerSpec, ParamStore,
};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    RecentPast,
    ShortTerm,
    LongTerm,
}

impl Branch {
    pub fn name(&self) -> &'static str {
        match self {
            Branch::RecentPast => "recent_past",
            Branch::ShortTerm => "short_term",
            Branch::LongTerm => "long_term",
        }
    }
}

/// Number of past frames (including the current one) that can influence
/// the output of a conv stack: 1 + sum (k - 1) * d.
pub fn receptive_field(layers: &[ConvLayerSpec]) -> usize {
    1 + layers
        .iter()
        .map(|l| (l.kernel_size - 1) * l.dilation)
        .sum::<usize>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub branch: Branch,
    pub layers: Vec<ConvLayerSpec>,
    pub embedding_dim: usize,
    /// Declared receptive field; validated against the layer stack.
    pub receptive_field: usize,
}

impl EncoderSpec {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config(format!(
                "encoder {} has no layers",
                self.branch.name()
            )));
        }
        let mut dim = input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if layer.in_channels != dim {
                return Err(Error::Config(format!(
                    "encoder {} layer {i}: in_channels {} but previous layer outputs {dim}",
                    self.branch.name(),
                    layer.in_channels
                )));
            }
            dim = layer.out_channels;
        }
        if dim != self.embedding_dim {
            return Err(Error::Config(format!(
                "encoder {}: final layer outputs {dim}, embedding_dim is {}",
                self.branch.name(),
                self.embedding_dim
            )));
        }
        let rf = receptive_field(&self.layers);
        if rf != self.receptive_field {
            return Err(Error::Config(format!(
                "encoder {}: declared receptive field {} but layers give {rf}",
                self.branch.name(),
                self.receptive_field
            )));
        }
        Ok(())
    }
}

/// Default branch realizations. Hidden width 32 throughout; ReLU between
/// layers, linear on the embedding output.
///
/// - recent past: k=3 d=1 then a pointwise layer, receptive field 3
/// - short term: k=2, dilations 1,2,4,8,14, receptive field 30
/// - long term: k=2, dilations 1,2,4,8,16,32,64,125, receptive field 253
pub fn build_default_specs(input_dim: usize) -> Result<[EncoderSpec; 3]> {
    const HIDDEN: usize = 32;
    if input_dim == 0 {
        return Err(Error::Config("input_dim must be positive".into()));
    }
    let conv = ConvLayerSpec::new;
    let recent = EncoderSpec {
        branch: Branch::RecentPast,
        layers: vec![
            conv(input_dim, HIDDEN, 3, 1, Activation::Relu),
            conv(HIDDEN, 16, 1, 1, Activation::Linear),
        ],
        embedding_dim: 16,
        receptive_field: 3,
    };
    let short = EncoderSpec {
        branch: Branch::ShortTerm,
        layers: vec![
            conv(input_dim, HIDDEN, 2, 1, Activation::Relu),
            conv(HIDDEN, HIDDEN, 2, 2, Activation::Relu),
            conv(HIDDEN, HIDDEN, 2, 4, Activation::Relu),
            conv(HIDDEN, HIDDEN, 2, 8, Activation::Relu),
            conv(HIDDEN, 32, 2, 14, Activation::Linear),
        ],
        embedding_dim: 32,
        receptive_field: 30,
    };
    let long = EncoderSpec {
        branch: Branch::LongTerm,
        layers: vec![
            conv(input_dim, HIDDEN, 2, 1, Activation::Relu),
            conv(HIDDEN, HIDDEN, 2, 2, Activation::Relu),
            conv(HIDDEN, HIDDEN, 2, 4, Activation::Relu),
            conv(HIDDEN, HIDDEN, 2, 8, Activation::Relu),
            conv(HIDDEN, HIDDEN, 2, 16, Activation::Relu),
            conv(HIDDEN, HIDDEN, 2, 32, Activation::Relu),
            conv(HIDDEN, HIDDEN, 2, 64, Activation::Relu),
            conv(HIDDEN, 16, 2, 125, Activation::Linear),
        ],
        embedding_dim: 16,
        receptive_field: 253,
    };
    for spec in [&recent, &short, &long] {
        spec.validate(input_dim)?;
    }
    Ok([recent, short, long])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BamsConfig {
    /// Encoder-visible channel count (dataset channels minus hidden ones).
    pub input_dim: usize,
    pub recent_past: EncoderSpec,
    pub short_term: EncoderSpec,
    pub long_term: EncoderSpec,
    /// Future-prediction horizon in frames.
    pub horizon: usize,
    /// Number of future-prediction target channels.
    pub num_targets: usize,
    /// Hidden-feature head output width; 0 disables the head.
    pub num_hidden: usize,
    /// Whether the pairwise-distance head exists (multi-agent data).
    pub pair_head: bool,
    /// Hidden widths of the future / hidden / pair heads.
    pub head_hidden: Vec<usize>,
    /// Weight of the latent bootstrapping losses in the total.
    pub alpha: f64,
    /// Half-width (frames) of the short-term bootstrap sampling window.
    pub delta: usize,
}

impl BamsConfig {
    /// Paper-protocol defaults on top of the given data dimensions.
    pub fn with_defaults(input_dim: usize, num_targets: usize, num_hidden: usize) -> Result<Self> {
        let [recent, short, long] = build_default_specs(input_dim)?;
        let config = BamsConfig {
            input_dim,
            recent_past: recent,
            short_term: short,
            long_term: long,
            horizon: 15,
            num_targets,
            num_hidden,
            pair_head: false,
            head_hidden: vec![128, 128],
            alpha: 0.1,
            delta: 5,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.recent_past.validate(self.input_dim)?;
        self.short_term.validate(self.input_dim)?;
        self.long_term.validate(self.input_dim)?;
        if self.recent_past.branch != Branch::RecentPast
            || self.short_term.branch != Branch::ShortTerm
            || self.long_term.branch != Branch::LongTerm
        {
            return Err(Error::Config("encoder specs assigned to wrong branches".into()));
        }
        if self.horizon == 0 || self.num_targets == 0 {
            return Err(Error::Config(
                "horizon and num_targets must be positive".into(),
            ));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.delta == 0 {
            return Err(Error::Config("delta must be >= 1".into()));
        }
        if self.head_hidden.is_empty() {
            return Err(Error::Config("head_hidden must not be empty".into()));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.recent_past.embedding_dim + self.short_term.embedding_dim + self.long_term.embedding_dim
    }

    /// Column range of one branch inside the concatenated embedding.
    pub fn branch_columns(&self, branch: Branch) -> std::ops::Range<usize> {
        let rp = self.recent_past.embedding_dim;
        let st = self.short_term.embedding_dim;
        match branch {
            Branch::RecentPast => 0..rp,
            Branch::ShortTerm => rp..rp + st,
            Branch::LongTerm => rp + st..rp + st + self.long_term.embedding_dim,
        }
    }

    /// Largest receptive field of the three branches.
    pub fn max_receptive_field(&self) -> usize {
        self.recent_past
            .receptive_field
            .max(self.short_term.receptive_field)
            .max(self.long_term.receptive_field)
    }

    fn spec(&self, branch: Branch) -> &EncoderSpec {
        match branch {
            Branch::RecentPast => &self.recent_past,
            Branch::ShortTerm => &self.short_term,
            Branch::LongTerm => &self.long_term,
        }
    }

    fn future_head_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.embedding_dim()];
        dims.extend(&self.head_hidden);
        dims.push(self.horizon * self.num_targets);
        dims
    }

    fn hidden_head_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.embedding_dim()];
        dims.extend(&self.head_hidden);
        dims.push(self.num_hidden);
        dims
    }

    fn pair_head_dims(&self) -> Vec<usize> {
        let mut dims = vec![2 * self.embedding_dim()];
        dims.extend(&self.head_hidden);
        dims.push(1);
        dims
    }

    fn bootstrap_dims(&self, branch: Branch) -> Vec<usize> {
        let d = self.spec(branch).embedding_dim;
        vec![d, d, d]
    }
}

/// Initializes every parameter of the model in a canonical order.
pub fn init_params(config: &BamsConfig, rng: &mut Rng) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    for spec in [&config.recent_past, &config.short_term, &config.long_term] {
        init_conv_stack(
            &mut store,
            rng,
            &format!("encoder.{}", spec.branch.name()),
            &spec.layers,
        )?;
    }
    init_mlp(&mut store, rng, "head.future", &config.future_head_dims())?;
    if config.num_hidden > 0 {
        init_mlp(&mut store, rng, "head.hidden", &config.hidden_head_dims())?;
    }
    if config.pair_head {
        init_mlp(&mut store, rng, "head.pair", &config.pair_head_dims())?;
    }
    for branch in [Branch::ShortTerm, Branch::LongTerm] {
        init_mlp(
            &mut store,
            rng,
            &format!("bootstrap.{}", branch.name()),
            &config.bootstrap_dims(branch),
        )?;
    }
    Ok(store)
}

/// Checks that a loaded store matches the shapes the config expects,
/// naming the first mismatched tensor.
pub fn check_params(config: &BamsConfig, store: &ParamStore) -> Result<()> {
    let mut rng = Rng::from_seed(0);
    let expected = init_params(config, &mut rng)?;
    if expected.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: config wants {}, checkpoint has {}",
            expected.len(),
            store.len()
        )));
    }
    for idx in 0..expected.len() {
        let name = expected.name_at(idx);
        match store.get(name) {
            None => {
                return Err(Error::Checkpoint(format!("missing parameter {name}")));
            }
            Some(t) if t.shape() != expected.tensor_at(idx).shape() => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} does not match config {:?}",
                    t.shape(),
                    expected.tensor_at(idx).shape()
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Per-frame embeddings of one sequence.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub recent: Tensor,
    pub short: Tensor,
    pub long: Tensor,
    /// Concatenation [recent | short | long] per frame.
    pub full: Tensor,
}

/// Tape node ids of the branch and concatenated embeddings.
pub struct EmbeddingNodes {
    pub recent: NodeId,
    pub short: NodeId,
    pub long: NodeId,
    pub full: NodeId,
}

/// Runs the three encoder branches on the tape and concatenates.
pub fn embed_on_tape(
    tape: &mut Tape,
    config: &BamsConfig,
    bound: &BoundParams,
    x: NodeId,
) -> Result<EmbeddingNodes> {
    let actual_dim = tape.value(x).cols();
    if actual_dim != config.input_dim {
        return Err(Error::shape(
            "embed input",
            &[config.input_dim],
            &[actual_dim],
        ));
    }
    let recent = conv_stack_forward(
        tape,
        bound,
        "encoder.recent_past",
        &config.recent_past.layers,
        x,
    )?;
    let short = conv_stack_forward(
        tape,
        bound,
        "encoder.short_term",
        &config.short_term.layers,
        x,
    )?;
    let long = conv_stack_forward(
        tape,
        bound,
        "encoder.long_term",
        &config.long_term.layers,
        x,
    )?;
    let full = tape.concat_cols(&[recent, short, long])?;
    Ok(EmbeddingNodes {
        recent,
        short,
        long,
        full,
    })
}

/// Forward-only embedding of a full sequence of visible features.
pub fn embed(config: &BamsConfig, params: &ParamStore, features: &Tensor) -> Result<EmbeddingSet> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let x = tape.leaf(features.clone());
    let nodes = embed_on_tape(&mut tape, config, &bound, x)?;
    Ok(EmbeddingSet {
        recent: tape.value(nodes.recent).clone(),
        short: tape.value(nodes.short).clone(),
        long: tape.value(nodes.long).clone(),
        full: tape.value(nodes.full).clone(),
    })
}

/// Future-action head applied to rows of embeddings (M x embed -> M x L*targets).
pub fn future_head_on_tape(
    tape: &mut Tape,
    config: &BamsConfig,
    bound: &BoundParams,
    z: NodeId,
) -> Result<NodeId> {
    mlp_forward(tape, bound, "head.future", config.future_head_dims().len() - 1, z)
}

/// Hidden-feature head (M x embed -> M x num_hidden).
pub fn hidden_head_on_tape(
    tape: &mut Tape,
    config: &BamsConfig,
    bound: &BoundParams,
    z: NodeId,
) -> Result<NodeId> {
    if config.num_hidden == 0 {
        return Err(Error::Config("hidden head not configured".into()));
    }
    mlp_forward(tape, bound, "head.hidden", config.hidden_head_dims().len() - 1, z)
}

/// Pairwise-distance head on two aligned embedding row blocks. The input
/// is symmetrized as [z_i + z_j, |z_i - z_j|] so swapping the agents gives
/// the identical output, and a softplus keeps the predicted distance
/// nonnegative. Returns M x 1 predictions.
pub fn pair_head_on_tape(
    tape: &mut Tape,
    config: &BamsConfig,
    bound: &BoundParams,
    z_i: NodeId,
    z_j: NodeId,
) -> Result<NodeId> {
    if !config.pair_head {
        return Err(Error::Config("pair head not configured".into()));
    }
    let sum = tape.add(z_i, z_j)?;
    let diff = tape.sub(z_i, z_j)?;
    let diff_abs = tape.abs(diff);
    let sym = tape.concat_cols(&[sum, diff_abs])?;
    let raw = mlp_forward(tape, bound, "head.pair", config.pair_head_dims().len() - 1, sym)?;
    Ok(tape.softplus(raw))
}

/// Bootstrap predictor of one branch (M x dim -> M x dim, pre-normalization).
pub fn bootstrap_on_tape(
    tape: &mut Tape,
    config: &BamsConfig,
    bound: &BoundParams,
    branch: Branch,
    z: NodeId,
) -> Result<NodeId> {
    if branch == Branch::RecentPast {
        return Err(Error::Config(
            "no bootstrap predictor on the recent-past branch".into(),
        ));
    }
    let prefix = format!("bootstrap.{}", branch.name());
    mlp_forward(tape, bound, &prefix, config.bootstrap_dims(branch).len() - 1, z)
}

/// Convenience forward of the future head on one embedding row, reshaped
/// to horizon x num_targets.
pub fn predict_future(config: &BamsConfig, params: &ParamStore, z_row: &[f64]) -> Result<Tensor> {
    if z_row.len() != config.embedding_dim() {
        return Err(Error::shape(
            "predict_future",
            &[config.embedding_dim()],
            &[z_row.len()],
        ));
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let z = tape.leaf(Tensor::new(vec![1, z_row.len()], z_row.to_vec())?);
    let out = future_head_on_tape(&mut tape, config, &bound, z)?;
    Tensor::new(
        vec![config.horizon, config.num_targets],
        tape.value(out).data().to_vec(),
    )
}

/// Convenience forward of the pair head on one embedding pair.
pub fn predict_pair_distance(
    config: &BamsConfig,
    params: &ParamStore,
    z_i: &[f64],
    z_j: &[f64],
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let a = tape.leaf(Tensor::new(vec![1, z_i.len()], z_i.to_vec())?);
    let b = tape.leaf(Tensor::new(vec![1, z_j.len()], z_j.to_vec())?);
    let out = pair_head_on_tape(&mut tape, config, &bound, a, b)?;
    Ok(tape.value(out).item())
}

/// Convenience forward of a bootstrap predictor on one branch embedding row.
pub fn bootstrap_predict(
    config: &BamsConfig,
    params: &ParamStore,
    branch: Branch,
    z: &[f64],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let zid = tape.leaf(Tensor::new(vec![1, z.len()], z.to_vec())?);
    let out = bootstrap_on_tape(&mut tape, config, &bound, branch, zid)?;
    Ok(tape.value(out).data().to_vec())
}
