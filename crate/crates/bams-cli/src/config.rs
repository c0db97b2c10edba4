//! The unified run configuration: one JSON document with generator,
//! model, train and eval sections, every field defaulted to the standard
//! protocol constants. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use bams::data::{Dataset, KeypointRoles};
use bams::error::{Error, Result};
use bams::eval::{ProbeOptions, ProbeTask, TaskLevel};
use bams::model::BamsConfig;
use bams::synth::{GeneratorConfig, GLOBAL_LABEL, REGIME_LABEL};
use bams::trainer::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub generator: GeneratorConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

/// Options for datasets assembled from real keypoint recordings: which
/// keypoints play which role when deriving egocentric features.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub keypoint_roles: Option<KeypointRoles>,
}

/// Model hyperparameters independent of the data dimensions. The encoder
/// stacks themselves are resolved against the dataset at train time and
/// stored, fully expanded, in the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub alpha: f64,
    pub delta: usize,
    pub horizon: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            alpha: 0.1,
            delta: 5,
            horizon: 15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub train_fraction: f64,
    /// Sequence-split seed; defaults to the run seed when absent.
    pub split_seed: Option<u64>,
    pub probe: ProbeOptions,
    pub tasks: Vec<ProbeTask>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            train_fraction: 0.8,
            split_seed: None,
            probe: ProbeOptions::default(),
            // Both tasks read out per frame, mirroring challenge-style
            // evaluation where sequence labels are broadcast to frames.
            tasks: vec![
                ProbeTask::categorical(GLOBAL_LABEL, TaskLevel::Frame),
                ProbeTask::categorical(REGIME_LABEL, TaskLevel::Frame),
            ],
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&std::path::Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Ok(serde_json::from_str(&text)?)
            }
        }
    }

    /// Applies a command-line seed to every seeded section.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.generator.seed = s;
            self.train.seed = s;
            if self.eval.split_seed.is_none() {
                self.eval.split_seed = Some(s);
            }
        }
        self
    }

    pub fn split_seed(&self) -> u64 {
        self.eval.split_seed.unwrap_or(self.train.seed)
    }

    /// Resolves the full model configuration against a dataset's channel
    /// assignment.
    pub fn resolve_model(&self, dataset: &Dataset) -> Result<BamsConfig> {
        let input_dim = dataset.visible_indices().len();
        let mut config = BamsConfig::with_defaults(
            input_dim,
            dataset.target_indices.len(),
            dataset.hidden_indices.len(),
        )?;
        config.alpha = self.model.alpha;
        config.delta = self.model.delta;
        config.horizon = self.model.horizon;
        config.validate()?;
        Ok(config)
    }
}
