//! Optimization loop: Adam with two learning-rate groups, windowed batch
//! sampling, JSONL step logging, and lossless checkpointing.
//!
//! All randomness (batch windows, anchors, temporal offsets) is drawn on
//! the coordinator thread from a single sampler stream before windows are
//! dispatched to workers, and per-window gradients are reduced in window
//! order, so runs are bit-identical regardless of the worker count. The
//! bootstrap predictors get a boosted learning rate; everything else
//! trains at the base rate.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::model::{check_params, init_params, BamsConfig};
use crate::nn::layers::{GradVec, ParamStore};
use crate::nn::store::{read_tensors, write_tensors};
use crate::nn::tensor::Tensor;
use crate::objectives::{plan_window, total_loss, window_loss, WindowPlan};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Learning-rate multiplier for the bootstrap predictors.
    pub predictor_lr_multiplier: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub window_length: usize,
    pub anchors_per_window: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_interval: usize,
    /// Optional global gradient-norm clip for divergence rescue.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            base_lr: 1e-3,
            predictor_lr_multiplier: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            window_length: 512,
            anchors_per_window: 64,
            seed: 0,
            checkpoint_interval: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if !self.predictor_lr_multiplier.is_finite() || self.predictor_lr_multiplier < 1.0 {
            return Err(Error::Config(format!(
                "predictor_lr_multiplier must be >= 1, got {}",
                self.predictor_lr_multiplier
            )));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !((0.0..1.0).contains(&v)) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.anchors_per_window == 0 {
            return Err(Error::Config(
                "epochs, batch_size and anchors_per_window must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Bootstrap predictors form the boosted learning-rate group; every other
/// parameter (encoders and heads) trains at the base rate.
pub fn is_boosted_param(name: &str) -> bool {
    name.starts_with("bootstrap.")
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = (0..params.len())
            .map(|i| Tensor::zeros(params.tensor_at(i).shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients must be finite; the first
/// offending parameter is named in the error.
#[allow(clippy::needless_range_loop)] // parallel arrays indexed in lockstep
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradVec,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
    }
    for idx in 0..params.len() {
        if !grads[idx].is_finite() {
            return Err(Error::Numerical(format!(
                "gradient for parameter {} is not finite",
                params.name_at(idx)
            )));
        }
    }
    let clip_scale = match config.grad_clip {
        Some(max_norm) if max_norm > 0.0 => {
            let total: f64 = grads
                .iter()
                .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum();
            let norm = total.sqrt();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        _ => 1.0,
    };
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for idx in 0..params.len() {
        let lr = if is_boosted_param(params.name_at(idx)) {
            config.base_lr * config.predictor_lr_multiplier
        } else {
            config.base_lr
        };
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let g = grads[idx].data();
        let theta = params.tensor_at_mut(idx).data_mut();
        for i in 0..theta.len() {
            let gi = g[i] * clip_scale;
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub adam: AdamState,
    pub completed_epochs: usize,
    pub completed_steps: u64,
    pub sampler_state: [u64; 4],
    pub model_config: BamsConfig,
    pub train_config: TrainConfig,
    pub standardizer: Standardizer,
    pub feature_names: Vec<String>,
    pub target_indices: Vec<usize>,
    pub hidden_indices: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: String,
    completed_epochs: usize,
    completed_steps: u64,
    adam_t: u64,
    sampler_state: [u64; 4],
    model_config: BamsConfig,
    train_config: TrainConfig,
    standardizer: Standardizer,
    feature_names: Vec<String>,
    target_indices: Vec<usize>,
    hidden_indices: Vec<usize>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let meta = CheckpointMeta {
        version: crate::version_string(),
        completed_epochs: ckpt.completed_epochs,
        completed_steps: ckpt.completed_steps,
        adam_t: ckpt.adam.t,
        sampler_state: ckpt.sampler_state,
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        standardizer: ckpt.standardizer.clone(),
        feature_names: ckpt.feature_names.clone(),
        target_indices: ckpt.target_indices.clone(),
        hidden_indices: ckpt.hidden_indices.clone(),
    };
    let mut entries: Vec<(String, &Tensor)> = Vec::with_capacity(ckpt.params.len() * 3);
    for (name, tensor) in ckpt.params.iter() {
        entries.push((name.to_string(), tensor));
    }
    for idx in 0..ckpt.params.len() {
        entries.push((format!("adam.m.{}", ckpt.params.name_at(idx)), &ckpt.adam.m[idx]));
    }
    for idx in 0..ckpt.params.len() {
        entries.push((format!("adam.v.{}", ckpt.params.name_at(idx)), &ckpt.adam.v[idx]));
    }
    write_tensors(path, &entries, &serde_json::to_value(&meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (tensors, meta_value) = read_tensors(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta_value)?;
    let mut params = ParamStore::new();
    let mut adam_m: Vec<(String, Tensor)> = Vec::new();
    let mut adam_v: Vec<(String, Tensor)> = Vec::new();
    for (name, tensor) in tensors {
        if let Some(rest) = name.strip_prefix("adam.m.") {
            adam_m.push((rest.to_string(), tensor));
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            adam_v.push((rest.to_string(), tensor));
        } else {
            params.insert(name, tensor)?;
        }
    }
    check_params(&meta.model_config, &params)?;
    let align = |items: Vec<(String, Tensor)>, what: &str| -> Result<Vec<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..params.len()).map(|_| None).collect();
        for (name, tensor) in items {
            match params.get(&name) {
                Some(p) if p.shape() == tensor.shape() => {
                    let idx = (0..params.len()).find(|&i| params.name_at(i) == name).unwrap();
                    out[idx] = Some(tensor);
                }
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "{what} moment {name} does not match any parameter"
                    )))
                }
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(i, t)| {
                t.ok_or_else(|| {
                    Error::Checkpoint(format!("missing {what} moment for {}", params.name_at(i)))
                })
            })
            .collect()
    };
    let m = align(adam_m, "first")?;
    let v = align(adam_v, "second")?;
    Ok(Checkpoint {
        adam: AdamState { m, v, t: meta.adam_t },
        params,
        completed_epochs: meta.completed_epochs,
        completed_steps: meta.completed_steps,
        sampler_state: meta.sampler_state,
        model_config: meta.model_config,
        train_config: meta.train_config,
        standardizer: meta.standardizer,
        feature_names: meta.feature_names,
        target_indices: meta.target_indices,
        hidden_indices: meta.hidden_indices,
    })
}

// ---------------------------------------------------------------------------
// The loop
// ---------------------------------------------------------------------------

/// One JSONL record per optimization step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_future: f64,
    pub l_hidden: f64,
    pub l_short: f64,
    pub l_long: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub first_epoch_mean_total: f64,
    pub last_epoch_mean_total: f64,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Trains from scratch, writing `train_log.jsonl` and `checkpoint.bt`
/// under `out_dir`.
pub fn train(
    dataset: &Dataset,
    model_config: &BamsConfig,
    train_config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainSummary> {
    model_config.validate()?;
    train_config.validate()?;
    dataset.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidData("train: empty dataset".into()));
    }
    let needed = model_config.max_receptive_field() + model_config.horizon;
    if train_config.window_length < needed {
        return Err(Error::Config(format!(
            "window_length {} is shorter than receptive field + horizon = {needed}",
            train_config.window_length
        )));
    }
    let standardizer = Standardizer::fit(dataset)?;
    let mut init_rng = Rng::from_seed_stream(train_config.seed, 0x1A17);
    let params = init_params(model_config, &mut init_rng)?;
    let adam = AdamState::new(&params);
    let sampler = Rng::from_seed_stream(train_config.seed, 0x5A3B);
    let state = Checkpoint {
        params,
        adam,
        completed_epochs: 0,
        completed_steps: 0,
        sampler_state: sampler.state(),
        model_config: model_config.clone(),
        train_config: train_config.clone(),
        standardizer,
        feature_names: dataset.feature_names.clone(),
        target_indices: dataset.target_indices.clone(),
        hidden_indices: dataset.hidden_indices.clone(),
    };
    run_epochs(dataset, state, out_dir, "train_log.jsonl")
}

/// Continues a checkpointed run until its configured epoch count. The
/// restored sampler state makes the continuation identical to a run that
/// never stopped.
pub fn resume(checkpoint: Checkpoint, dataset: &Dataset, out_dir: &Path) -> Result<TrainSummary> {
    dataset.validate()?;
    run_epochs(dataset, checkpoint, out_dir, "resume_log.jsonl")
}

fn run_epochs(
    dataset: &Dataset,
    mut state: Checkpoint,
    out_dir: &Path,
    log_name: &str,
) -> Result<TrainSummary> {
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(log_name);
    let checkpoint_path = out_dir.join("checkpoint.bt");
    let mut log = BufWriter::new(fs::File::create(&log_path)?);

    let model_config = state.model_config.clone();
    let train_config = state.train_config.clone();
    let mut sampler = Rng::from_state(state.sampler_state);
    let steps_per_epoch = dataset.len().div_ceil(train_config.batch_size);
    let visible = dataset.visible_indices();

    let mut step = state.completed_steps;
    let mut first_epoch_mean = f64::NAN;
    let mut last_epoch_mean = f64::NAN;

    for epoch in state.completed_epochs..train_config.epochs {
        let mut epoch_total = 0.0;
        for _ in 0..steps_per_epoch {
            let batch = sample_batch(
                dataset,
                train_config.batch_size,
                train_config.window_length,
                &mut sampler,
            )?;
            let mut plans: Vec<WindowPlan> = Vec::with_capacity(batch.windows.len());
            for window in &batch.windows {
                let standardized = state.standardizer.apply(window);
                plans.push(plan_window(
                    &model_config,
                    &standardized,
                    &visible,
                    &dataset.target_indices,
                    &dataset.hidden_indices,
                    train_config.anchors_per_window,
                    &mut sampler,
                )?);
            }
            let results = crate::parallel_map(plans, |plan| {
                window_loss(&model_config, &state.params, &plan, true)
            });
            let mut evals = Vec::with_capacity(results.len());
            for r in results {
                evals.push(r?);
            }

            let b = evals.len() as f64;
            let mut grad_sum: GradVec = evals[0].grads.take().expect("grads requested").clone();
            for eval in evals.iter_mut().skip(1) {
                let g = eval.grads.take().expect("grads requested");
                for (acc, add) in grad_sum.iter_mut().zip(&g) {
                    for (a, &x) in acc.data_mut().iter_mut().zip(add.data()) {
                        *a += x;
                    }
                }
            }
            for g in &mut grad_sum {
                for v in g.data_mut() {
                    *v /= b;
                }
            }

            let mean =
                |f: fn(&crate::objectives::WindowTerms) -> f64| -> f64 {
                    evals.iter().map(|e| f(&e.terms)).sum::<f64>() / b
                };
            let n_anchor = train_config.anchors_per_window * evals.len();
            let n_hidden = if model_config.num_hidden > 0 && !dataset.hidden_indices.is_empty() {
                n_anchor
            } else {
                0
            };
            let bundle = total_loss(
                mean(|t| t.l_future),
                mean(|t| t.l_hidden),
                mean(|t| t.l_short),
                mean(|t| t.l_long),
                model_config.alpha,
                [n_anchor, n_hidden, n_anchor, n_anchor],
            );
            let bundle = match bundle {
                Ok(b) => b,
                Err(e) => {
                    // Dump state for post-mortem before aborting.
                    state.sampler_state = sampler.state();
                    state.completed_steps = step;
                    let _ = save_checkpoint(&out_dir.join("abort_checkpoint.bt"), &state);
                    return Err(e);
                }
            };

            adam_step(&mut state.params, &grad_sum, &mut state.adam, &train_config)?;

            step += 1;
            epoch_total += bundle.total;
            let record = LogRecord {
                step,
                epoch,
                l_future: bundle.l_future,
                l_hidden: bundle.l_hidden,
                l_short: bundle.l_short,
                l_long: bundle.l_long,
                total: bundle.total,
                lr: train_config.base_lr,
            };
            serde_json::to_writer(&mut log, &record)?;
            log.write_all(b"\n")?;
        }
        let epoch_mean = epoch_total / steps_per_epoch as f64;
        if epoch == 0 {
            first_epoch_mean = epoch_mean;
        }
        last_epoch_mean = epoch_mean;

        state.completed_epochs = epoch + 1;
        state.completed_steps = step;
        state.sampler_state = sampler.state();
        let interval = train_config.checkpoint_interval;
        if interval > 0 && (epoch + 1) % interval == 0 && epoch + 1 < train_config.epochs {
            save_checkpoint(&checkpoint_path, &state)?;
        }
    }
    log.flush()?;
    save_checkpoint(&checkpoint_path, &state)?;
    Ok(TrainSummary {
        steps: step,
        epochs: state.completed_epochs,
        first_epoch_mean_total: first_epoch_mean,
        last_epoch_mean_total: last_epoch_mean,
        checkpoint_path,
        log_path,
    })
}
