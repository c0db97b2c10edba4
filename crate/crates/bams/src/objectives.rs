//! Loss terms and temporal offset sampling.
//!
//! The total training loss is
//!
//!   total = l_future + l_hidden + alpha * (l_short + l_long)
//!
//! where the first two are pretext mean-squared errors (future-action
//! prediction from the full embedding, hidden-feature or pairwise-distance
//! prediction), and the last two are latent bootstrapping terms: the
//! branch's predictor output, L2-normalized, regresses the stop-gradient
//! normalized embedding of a temporally offset frame. Short-term offsets
//! stay within a +/-delta window; long-term offsets reach any other frame
//! of the sequence. All reductions are means, so alpha's meaning does not
//! depend on batch or anchor counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    bootstrap_on_tape, embed_on_tape, future_head_on_tape, hidden_head_on_tape, pair_head_on_tape,
    BamsConfig, Branch,
};
use crate::nn::layers::{BoundParams, GradVec};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor;
use crate::rng::Rng;

/// Guard for the normalization inside the latent losses.
pub const NORM_EPSILON: f64 = 1e-8;

/// Scalar values of every loss term for one batch, with per-term sample
/// counts. Invariants: all terms nonnegative, the latent terms at most 4
/// (squared distance of unit vectors), and
/// total = l_future + l_hidden + alpha * (l_short + l_long).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_future: f64,
    pub l_hidden: f64,
    pub l_short: f64,
    pub l_long: f64,
    pub total: f64,
    pub n_future: usize,
    pub n_hidden: usize,
    pub n_short: usize,
    pub n_long: usize,
}

/// Assembles and validates the bundle from its parts.
pub fn total_loss(
    l_future: f64,
    l_hidden: f64,
    l_short: f64,
    l_long: f64,
    alpha: f64,
    counts: [usize; 4],
) -> Result<LossBundle> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    for (name, v) in [
        ("l_future", l_future),
        ("l_hidden", l_hidden),
        ("l_short", l_short),
        ("l_long", l_long),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Numerical(format!("{name} = {v}")));
        }
    }
    for (name, v) in [("l_short", l_short), ("l_long", l_long)] {
        if v > 4.0 + 1e-9 {
            return Err(Error::Numerical(format!(
                "{name} = {v} exceeds the unit-vector bound of 4"
            )));
        }
    }
    let total = l_future + l_hidden + alpha * (l_short + l_long);
    Ok(LossBundle {
        l_future,
        l_hidden,
        l_short,
        l_long,
        total,
        n_future: counts[0],
        n_hidden: counts[1],
        n_short: counts[2],
        n_long: counts[3],
    })
}

/// How the bootstrap target frame is drawn relative to the anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaRule {
    /// Uniform over {t-delta..t-1, t+1..t+delta} clipped to the sequence.
    Short { delta: usize },
    /// Uniform over every other frame of the sequence.
    Long,
}

/// Draws the target frame index for an anchor at `t` in a sequence of
/// `total_frames`. Offset zero is never produced.
pub fn sample_delta(rule: DeltaRule, t: usize, total_frames: usize, rng: &mut Rng) -> Result<usize> {
    if t >= total_frames {
        return Err(Error::InvalidData(format!(
            "anchor {t} outside sequence of {total_frames} frames"
        )));
    }
    if total_frames < 2 {
        return Err(Error::InvalidData(
            "empty candidate set: sequence has a single frame".into(),
        ));
    }
    match rule {
        DeltaRule::Short { delta } => {
            if delta == 0 {
                return Err(Error::Config("delta must be >= 1".into()));
            }
            let left = t.min(delta);
            let right = (total_frames - 1 - t).min(delta);
            let count = left + right;
            if count == 0 {
                return Err(Error::InvalidData("empty candidate set".into()));
            }
            let k = rng.range(count);
            Ok(if k < left {
                t - left + k
            } else {
                t + 1 + (k - left)
            })
        }
        DeltaRule::Long => {
            let j = rng.range(total_frames - 1);
            Ok(if j >= t { j + 1 } else { j })
        }
    }
}

// ---------------------------------------------------------------------------
// Tape-level loss builders
// ---------------------------------------------------------------------------

/// Future-action prediction: MSE between the future head on anchor
/// embeddings and the flattened horizon targets (one row per anchor).
pub fn future_action_loss_on_tape(
    tape: &mut Tape,
    config: &BamsConfig,
    bound: &BoundParams,
    z_full: NodeId,
    anchors: &[usize],
    targets: NodeId,
) -> Result<NodeId> {
    if anchors.is_empty() {
        return Err(Error::InvalidData("horizon exceeds window".into()));
    }
    let z_anchors = tape.gather_rows(z_full, anchors)?;
    let pred = future_head_on_tape(tape, config, bound, z_anchors)?;
    tape.mean_squared_error(pred, targets)
}

/// Hidden-feature prediction at the same timestep: MSE between the hidden
/// head on anchor embeddings and the withheld channels.
pub fn hidden_feature_loss_on_tape(
    tape: &mut Tape,
    config: &BamsConfig,
    bound: &BoundParams,
    z_full: NodeId,
    anchors: &[usize],
    targets: NodeId,
) -> Result<NodeId> {
    if anchors.is_empty() {
        return Err(Error::InvalidData("hidden loss needs at least one anchor".into()));
    }
    let z_anchors = tape.gather_rows(z_full, anchors)?;
    let pred = hidden_head_on_tape(tape, config, bound, z_anchors)?;
    tape.mean_squared_error(pred, targets)
}

/// Pairwise-distance prediction for a group of agents: mean over frames
/// and unordered pairs of the squared error between the symmetric pair
/// head and the hidden distances. `agent_embeddings` are aligned M x embed
/// blocks, `pair_targets[p]` the M x 1 distances of the p-th pair in
/// (0,1), (0,2), ..., (1,2), ... order.
pub fn hidden_distance_loss_on_tape(
    tape: &mut Tape,
    config: &BamsConfig,
    bound: &BoundParams,
    agent_embeddings: &[NodeId],
    pair_targets: &[Tensor],
) -> Result<NodeId> {
    let n = agent_embeddings.len();
    if n < 2 {
        return Err(Error::InvalidData(
            "pairwise distance loss needs at least 2 agents".into(),
        ));
    }
    let expected_pairs = n * (n - 1) / 2;
    if pair_targets.len() != expected_pairs {
        return Err(Error::shape(
            "hidden_distance_loss pairs",
            &[expected_pairs],
            &[pair_targets.len()],
        ));
    }
    let mut terms = Vec::with_capacity(expected_pairs);
    let mut p = 0;
    for i in 0..n {
        for j in i + 1..n {
            let pred = pair_head_on_tape(tape, config, bound, agent_embeddings[i], agent_embeddings[j])?;
            let target = tape.leaf(pair_targets[p].clone());
            let mse = tape.mean_squared_error(pred, target)?;
            terms.push((mse, 1.0 / expected_pairs as f64));
            p += 1;
        }
    }
    tape.weighted_sum(&terms)
}

/// Timescale-specific latent bootstrapping: the branch predictor runs on
/// anchor embeddings, both sides are L2-normalized, the target side is
/// wrapped in stop-gradient, and the mean per-anchor squared distance is
/// returned. Gradients reach the encoder only through the anchor path.
pub fn latent_predictive_loss_on_tape(
    tape: &mut Tape,
    config: &BamsConfig,
    bound: &BoundParams,
    branch: Branch,
    z_branch: NodeId,
    anchors: &[usize],
    target_frames: &[usize],
) -> Result<NodeId> {
    if branch == Branch::RecentPast {
        return Err(Error::Config(
            "no bootstrap loss on the recent-past branch".into(),
        ));
    }
    if anchors.is_empty() || anchors.len() != target_frames.len() {
        return Err(Error::InvalidData(format!(
            "latent loss needs matched anchor/target lists, got {} and {}",
            anchors.len(),
            target_frames.len()
        )));
    }
    let z_anchors = tape.gather_rows(z_branch, anchors)?;
    let predicted = bootstrap_on_tape(tape, config, bound, branch, z_anchors)?;
    let predicted_unit = tape.normalize_rows(predicted, NORM_EPSILON);
    let z_targets = tape.gather_rows(z_branch, target_frames)?;
    let target_unit = tape.normalize_rows(z_targets, NORM_EPSILON);
    let target_stopped = tape.stop_gradient(target_unit);
    tape.row_mean_squared_distance(predicted_unit, target_stopped)
}

// ---------------------------------------------------------------------------
// Window plans: everything random drawn up front, evaluation pure
// ---------------------------------------------------------------------------

/// One window's fully sampled loss plan. Building a plan consumes RNG;
/// evaluating it is a pure function of (config, parameters, plan), which is
/// what makes data-parallel training deterministic.
#[derive(Debug, Clone)]
pub struct WindowPlan {
    /// W x D_visible standardized encoder input.
    pub visible: Tensor,
    pub future_anchors: Vec<usize>,
    /// One row per future anchor: the flattened horizon x targets block.
    pub future_targets: Tensor,
    pub hidden_anchors: Vec<usize>,
    /// One row per hidden anchor: the withheld channels at that frame.
    pub hidden_targets: Option<Tensor>,
    pub short_anchors: Vec<usize>,
    pub short_targets: Vec<usize>,
    pub long_anchors: Vec<usize>,
    pub long_targets: Vec<usize>,
}

/// Samples a plan for one standardized full-channel window.
pub fn plan_window(
    config: &BamsConfig,
    window: &Tensor,
    visible_indices: &[usize],
    target_indices: &[usize],
    hidden_indices: &[usize],
    anchors_per_term: usize,
    rng: &mut Rng,
) -> Result<WindowPlan> {
    let w_len = window.rows();
    if anchors_per_term == 0 {
        return Err(Error::Config("anchors_per_term must be >= 1".into()));
    }
    if w_len <= config.horizon {
        return Err(Error::InvalidData("horizon exceeds window".into()));
    }
    let visible = window.select_cols(visible_indices);

    // Future anchors need the whole horizon inside the window.
    let future_limit = w_len - config.horizon;
    let future_anchors: Vec<usize> =
        (0..anchors_per_term).map(|_| rng.range(future_limit)).collect();
    let mut future_rows = Vec::with_capacity(future_anchors.len());
    for &t in &future_anchors {
        let mut row = Vec::with_capacity(config.horizon * config.num_targets);
        for step in 1..=config.horizon {
            let frame = window.row(t + step);
            for &c in target_indices {
                row.push(frame[c]);
            }
        }
        future_rows.push(row);
    }
    let future_targets = Tensor::from_rows(&future_rows)?;

    let (hidden_anchors, hidden_targets) = if config.num_hidden > 0 && !hidden_indices.is_empty() {
        let anchors: Vec<usize> = (0..anchors_per_term).map(|_| rng.range(w_len)).collect();
        let rows: Vec<Vec<f64>> = anchors
            .iter()
            .map(|&t| hidden_indices.iter().map(|&c| window.row(t)[c]).collect())
            .collect();
        (anchors, Some(Tensor::from_rows(&rows)?))
    } else {
        (Vec::new(), None)
    };

    let mut short_anchors = Vec::with_capacity(anchors_per_term);
    let mut short_targets = Vec::with_capacity(anchors_per_term);
    for _ in 0..anchors_per_term {
        let t = rng.range(w_len);
        short_anchors.push(t);
        short_targets.push(sample_delta(
            DeltaRule::Short { delta: config.delta },
            t,
            w_len,
            rng,
        )?);
    }
    let mut long_anchors = Vec::with_capacity(anchors_per_term);
    let mut long_targets = Vec::with_capacity(anchors_per_term);
    for _ in 0..anchors_per_term {
        let t = rng.range(w_len);
        long_anchors.push(t);
        long_targets.push(sample_delta(DeltaRule::Long, t, w_len, rng)?);
    }

    Ok(WindowPlan {
        visible,
        future_anchors,
        future_targets,
        hidden_anchors,
        hidden_targets,
        short_anchors,
        short_targets,
        long_anchors,
        long_targets,
    })
}

/// Scalar loss terms of one evaluated window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowTerms {
    pub l_future: f64,
    pub l_hidden: f64,
    pub l_short: f64,
    pub l_long: f64,
    pub total: f64,
}

pub struct WindowEval {
    pub terms: WindowTerms,
    pub grads: Option<GradVec>,
}

/// Evaluates one window plan: total = l_future + l_hidden + alpha *
/// (l_short + l_long), with gradients for every parameter when requested.
pub fn window_loss(
    config: &BamsConfig,
    params: &crate::nn::layers::ParamStore,
    plan: &WindowPlan,
    want_grads: bool,
) -> Result<WindowEval> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let x = tape.leaf(plan.visible.clone());
    let emb = embed_on_tape(&mut tape, config, &bound, x)?;

    let target_node = tape.leaf(plan.future_targets.clone());
    let l_future = future_action_loss_on_tape(
        &mut tape,
        config,
        &bound,
        emb.full,
        &plan.future_anchors,
        target_node,
    )?;

    let l_hidden = match (&plan.hidden_targets, config.num_hidden) {
        (Some(targets), n) if n > 0 => {
            let t = tape.leaf(targets.clone());
            Some(hidden_feature_loss_on_tape(
                &mut tape,
                config,
                &bound,
                emb.full,
                &plan.hidden_anchors,
                t,
            )?)
        }
        _ => None,
    };

    let l_short = latent_predictive_loss_on_tape(
        &mut tape,
        config,
        &bound,
        Branch::ShortTerm,
        emb.short,
        &plan.short_anchors,
        &plan.short_targets,
    )?;
    let l_long = latent_predictive_loss_on_tape(
        &mut tape,
        config,
        &bound,
        Branch::LongTerm,
        emb.long,
        &plan.long_anchors,
        &plan.long_targets,
    )?;

    let mut terms = vec![(l_future, 1.0)];
    if let Some(h) = l_hidden {
        terms.push((h, 1.0));
    }
    terms.push((l_short, config.alpha));
    terms.push((l_long, config.alpha));
    let total = tape.weighted_sum(&terms)?;

    let values = WindowTerms {
        l_future: tape.value(l_future).item(),
        l_hidden: l_hidden.map(|h| tape.value(h).item()).unwrap_or(0.0),
        l_short: tape.value(l_short).item(),
        l_long: tape.value(l_long).item(),
        total: tape.value(total).item(),
    };

    let grads = if want_grads {
        let g = tape.backward(total)?;
        Some(bound.collect_grads(&g))
    } else {
        None
    };

    Ok(WindowEval {
        terms: values,
        grads,
    })
}
