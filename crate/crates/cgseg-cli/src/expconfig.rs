//! Experiment configuration files: JSON documents selecting the dataset,
//! feature set, model and training options. Flags override file keys; the
//! fully resolved configuration is echoed into the run directory.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use cgseg_core::data::{compute_class_weights, ClassFrequencies, WeightScheme};
use cgseg_core::loss::{
    CeReduction, ClassWeights, LossSpec, LossVariant, TverskyParams, WeightNorm,
};
use cgseg_core::model::ModelConfig;
use cgseg_core::train::{AdamParams, SchedulerConfig, Selection, TrainConfig};

use crate::error::{invalid, Result};

/// Which channel set feeds the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// TMQ, U850, V850, PSL.
    Baseline,
    /// The baseline four plus WS850, VRT850, WSBOT, VRTBOT.
    Engineered,
}

impl FeatureSet {
    pub fn channels(&self) -> Vec<String> {
        let mut names: Vec<String> = cgseg_core::data::channels::BASELINE_INPUT
            .iter()
            .map(|s| s.to_string())
            .collect();
        if *self == FeatureSet::Engineered {
            names.extend(
                cgseg_core::data::channels::ENGINEERED
                    .iter()
                    .map(|s| s.to_string()),
            );
        }
        names
    }
}

/// How the class weights of a weighted loss are obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum WeightConfig {
    /// Inverse train-split pixel frequency.
    Inverse { norm: WeightNorm },
    /// Inverse square root of the train-split pixel frequency.
    InverseSqrt { norm: WeightNorm },
    Manual { values: Vec<f64>, norm: WeightNorm },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    #[serde(default)]
    pub weights: Option<WeightConfig>,
    #[serde(default)]
    pub tversky: Option<TverskyParams>,
    /// None keeps the per-variant default smoothing.
    #[serde(default)]
    pub smoothing: Option<f64>,
    #[serde(default)]
    pub ce_reduction: Option<CeReduction>,
}

impl LossConfig {
    /// Resolves the weight scheme against the train-split frequencies.
    /// Weighted variants without an explicit scheme default to
    /// inverse-frequency weights.
    pub fn resolve(&self, train_freqs: &ClassFrequencies) -> Result<LossSpec> {
        let weighted = matches!(
            self.variant,
            LossVariant::WeightedCrossEntropy | LossVariant::WeightedJaccard
        );
        let weights: Option<ClassWeights> = if weighted {
            let default_norm = match self.variant {
                LossVariant::WeightedJaccard => WeightNorm::Convex,
                _ => WeightNorm::MeanOne,
            };
            let config = self
                .weights
                .clone()
                .unwrap_or(WeightConfig::Inverse { norm: default_norm });
            let (scheme, norm) = match config {
                WeightConfig::Inverse { norm } => (WeightScheme::Inverse, norm),
                WeightConfig::InverseSqrt { norm } => (WeightScheme::InverseSqrt, norm),
                WeightConfig::Manual { values, norm } => (WeightScheme::Manual(values), norm),
            };
            Some(compute_class_weights(train_freqs, &scheme, norm)?)
        } else {
            if self.weights.is_some() {
                return Err(invalid(format!(
                    "{:?} does not take class weights",
                    self.variant
                )));
            }
            None
        };

        let mut spec = match self.variant {
            LossVariant::Jaccard => LossSpec::jaccard(),
            LossVariant::Dice => LossSpec::dice(),
            LossVariant::CrossEntropy => LossSpec::cross_entropy(),
            LossVariant::WeightedCrossEntropy => {
                LossSpec::weighted_cross_entropy(weights.clone().expect("weighted"))
            }
            LossVariant::FocalTversky => {
                LossSpec::focal_tversky(self.tversky.unwrap_or_default())
            }
            LossVariant::WeightedJaccard => {
                LossSpec::weighted_jaccard(weights.clone().expect("weighted"))
            }
        };
        if let Some(s) = self.smoothing {
            spec.smoothing = s;
        }
        if let Some(r) = self.ce_reduction {
            spec.ce_reduction = r;
        }
        Ok(spec)
    }
}

fn default_selection() -> Selection {
    Selection::BestTcRecall
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamParams,
    pub loss: LossConfig,
    #[serde(default)]
    pub scheduler: Option<SchedulerConfig>,
    #[serde(default = "default_selection")]
    pub selection: Selection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub features: FeatureSet,
    #[serde(default)]
    pub augment_roll: bool,
    pub model: ModelConfig,
    pub train: TrainSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let expected = self.features.channels().len();
        if self.model.input_channels != expected {
            return Err(invalid(format!(
                "model takes {} channels but the {:?} feature set provides {expected}",
                self.model.input_channels, self.features
            )));
        }
        Ok(())
    }

    /// Core train config with the loss resolved against train frequencies.
    pub fn train_config(&self, train_freqs: &ClassFrequencies) -> Result<TrainConfig> {
        let loss = self.train.loss.resolve(train_freqs)?;
        let mut cfg = TrainConfig::new(loss, self.features.channels());
        cfg.epochs = self.train.epochs;
        cfg.batch_size = self.train.batch_size;
        cfg.seed = self.train.seed;
        cfg.adam = self.train.adam;
        cfg.scheduler = self.train.scheduler;
        cfg.augment_roll = self.augment_roll;
        cfg.selection = self.train.selection;
        Ok(cfg)
    }
}

/// The fully-resolved experiment, echoed into the run directory.
#[derive(Serialize)]
pub struct ResolvedExperiment<'a> {
    pub name: &'a str,
    pub dataset: &'a std::path::Path,
    pub output: &'a std::path::Path,
    pub features: FeatureSet,
    pub augment_roll: bool,
    pub channels: &'a [String],
    pub model: &'a ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamParams,
    pub loss: &'a LossSpec,
    pub scheduler: Option<SchedulerConfig>,
    pub selection: Selection,
}
