//! Experiment configuration as a JSON document. Every field is optional and
//! unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::client::SelfDistillConfig;
use crate::error::{invalid, Result};
use crate::server::NoiseGenConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    /// Weighted by client sample counts.
    Weighted,
    Uniform,
}

impl AggregationKind {
    pub fn name(self) -> &'static str {
        match self {
            AggregationKind::Weighted => "weighted",
            AggregationKind::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub class_count: usize,
    /// Synthetic only.
    pub dim: usize,
    /// Synthetic only.
    pub per_class: usize,
    /// Synthetic only.
    pub spread: f64,
    /// Synthetic only: share of samples held out for evaluation.
    pub test_fraction: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            class_count: 10,
            dim: 32,
            per_class: 200,
            spread: 0.35,
            test_fraction: 0.1,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSettings {
    /// Peers per model, as a fraction of the active clients.
    pub participant_fraction: f64,
    /// Server learning rate as a multiple of the client rate.
    pub lr_scale: f64,
    pub epochs: usize,
}

impl Default for DistillSettings {
    fn default() -> Self {
        Self {
            participant_fraction: 0.5,
            lr_scale: 0.1,
            epochs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Registered method name: `fedsnd`, `fedavg`, `self-distill` or
    /// `noise-distill`.
    pub method: String,
    pub clients: usize,
    pub active_fraction: f64,
    pub rounds: usize,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub self_distill: LossWeights,
    pub noise: NoiseGenConfig,
    pub distill: DistillSettings,
    pub aggregation: AggregationKind,
    pub dirichlet_alpha: f64,
    pub min_per_client: usize,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    /// Write the global model every this many rounds; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: "fedsnd".into(),
            clients: 10,
            active_fraction: 1.0,
            rounds: 30,
            batch_size: 32,
            local_epochs: 10,
            lr: 0.05,
            self_distill: LossWeights::default(),
            noise: NoiseGenConfig::default(),
            distill: DistillSettings::default(),
            aggregation: AggregationKind::Weighted,
            dirichlet_alpha: 0.5,
            min_per_client: 5,
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Active clients per round: `max(floor(C·K), 1)`.
    pub fn active_count(&self) -> usize {
        ((self.active_fraction * self.clients as f64).floor() as usize).max(1)
    }

    pub fn local_config(&self) -> SelfDistillConfig {
        SelfDistillConfig {
            alpha: self.self_distill.alpha,
            beta: self.self_distill.beta,
            gamma: self.self_distill.gamma,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            enabled: true,
        }
    }

    pub fn layer_dims(&self, input_dim: usize, class_count: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.model.hidden);
        dims.push(class_count);
        dims
    }

    /// One rate per hidden layer.
    pub fn dropout_rates(&self) -> Vec<f64> {
        vec![self.model.dropout; self.model.hidden.len()]
    }

    /// Semantic checks beyond what parsing enforces.
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(invalid("clients must be at least 1"));
        }
        if !(self.active_fraction > 0.0 && self.active_fraction <= 1.0) {
            return Err(invalid(format!("active_fraction {} outside (0, 1]", self.active_fraction)));
        }
        if self.rounds == 0 {
            return Err(invalid("rounds must be at least 1"));
        }
        self.local_config().validate()?;
        self.noise.validate()?;
        let d = &self.distill;
        if !(0.0..=1.0).contains(&d.participant_fraction) {
            return Err(invalid(format!(
                "distill.participant_fraction {} outside [0, 1]",
                d.participant_fraction
            )));
        }
        if !(d.lr_scale >= 0.0) || !d.lr_scale.is_finite() {
            return Err(invalid(format!("distill.lr_scale {} must be non-negative", d.lr_scale)));
        }
        if !(self.dirichlet_alpha > 0.0) || !self.dirichlet_alpha.is_finite() {
            return Err(invalid(format!("dirichlet_alpha {} must be > 0", self.dirichlet_alpha)));
        }
        if self.model.hidden.contains(&0) {
            return Err(invalid("hidden layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(invalid(format!("dropout {} outside [0, 1)", self.model.dropout)));
        }
        let ds = &self.dataset;
        if ds.class_count < 2 {
            return Err(invalid("dataset.class_count must be at least 2"));
        }
        match ds.kind {
            DatasetKind::Synthetic => {
                if !(ds.test_fraction > 0.0 && ds.test_fraction < 1.0) {
                    return Err(invalid(format!(
                        "dataset.test_fraction {} outside (0, 1)",
                        ds.test_fraction
                    )));
                }
            }
            DatasetKind::Idx => {
                if ds.train_images.is_none()
                    || ds.train_labels.is_none()
                    || ds.test_images.is_none()
                    || ds.test_labels.is_none()
                {
                    return Err(invalid(
                        "idx dataset needs train_images, train_labels, test_images and test_labels",
                    ));
                }
            }
        }
        Ok(())
    }
}
