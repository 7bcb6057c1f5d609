//! Adam optimization, reduce-on-plateau scheduling with early termination,
//! and the epoch loop tying model, losses and data together.
//!
//! Everything is sequential and seeded, so a fixed configuration reproduces
//! its history bitwise.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{assemble_input, ClimateSample, Dataset, Split, CLASS_TC};
use crate::error::{invalid, Error, Result};
use crate::loss::{loss_node, loss_value, LossSpec, OneHotLabels};
use crate::metrics::{metrics_from_cm, ConfusionMatrix, MetricsReport};
use crate::model::{init_model, predict_labels, Model, ModelConfig, ModelParams};
use crate::tape::Tape;
use crate::tensor::GridTensor;

/// Adam hyperparameters; `lr` is the initial learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("adam: learning rate must be finite and >= 0"));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(invalid("adam: betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("adam: eps must be > 0"));
        }
        Ok(())
    }
}

/// Per-parameter moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub hyper: AdamParams,
    step: u64,
    m: BTreeMap<String, GridTensor>,
    v: BTreeMap<String, GridTensor>,
}

impl AdamState {
    pub fn new(hyper: AdamParams) -> Self {
        AdamState {
            hyper,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. The gradient map must carry exactly
    /// the parameter names.
    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, GridTensor>,
    ) -> Result<()> {
        for name in grads.keys() {
            params
                .get(name)
                .map_err(|_| invalid(format!("gradient for unknown parameter {name}")))?;
        }
        self.step += 1;
        let t = self.step as i32;
        let h = self.hyper;
        let bias1 = 1.0 - libm::pow(h.beta1, t as f64);
        let bias2 = 1.0 - libm::pow(h.beta2, t as f64);
        for (name, value) in params.iter_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::MissingGradient(String::from(name)))?;
            value.same_shape(grad, "adam gradient")?;
            let m = self
                .m
                .entry(String::from(name))
                .or_insert_with(|| GridTensor::zeros(value.shape().to_vec()));
            let v = self
                .v
                .entry(String::from(name))
                .or_insert_with(|| GridTensor::zeros(value.shape().to_vec()));
            for i in 0..value.len() {
                let g = grad.data()[i];
                let mi = h.beta1 * m.data()[i] + (1.0 - h.beta1) * g;
                let vi = h.beta2 * v.data()[i] + (1.0 - h.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                value.data_mut()[i] -= h.lr * m_hat / (libm::sqrt(v_hat) + h.eps);
            }
            value.check_finite("adam update")?;
        }
        Ok(())
    }
}

/// Reduce-on-plateau policy constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    /// Multiplier applied to the learning rate on a plateau.
    pub factor: f64,
    /// Non-improving evaluations before a decay.
    pub patience: usize,
    /// Required improvement of the validation score.
    pub min_delta: f64,
    /// Falling below this learning rate raises the stop flag.
    pub min_lr: f64,
    /// Evaluations without improvement before early termination.
    pub early_stop_evals: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            factor: 0.5,
            patience: 3,
            min_delta: 1e-4,
            min_lr: 1e-6,
            early_stop_evals: 10,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(invalid("scheduler: factor must lie in (0, 1)"));
        }
        if self.patience == 0 {
            return Err(invalid("scheduler: patience must be >= 1"));
        }
        if self.early_stop_evals < self.patience {
            return Err(invalid(
                "scheduler: early_stop_evals must be >= patience",
            ));
        }
        if !(self.min_lr > 0.0) {
            return Err(invalid("scheduler: min_lr must be > 0"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(invalid("scheduler: min_delta must be >= 0"));
        }
        Ok(())
    }
}

/// Plateau tracker over a to-be-minimized validation score.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerState {
    cfg: SchedulerConfig,
    pub lr: f64,
    best: Option<f64>,
    bad_evals: usize,
    evals_since_best: usize,
    pub stop: bool,
}

impl SchedulerState {
    pub fn new(cfg: SchedulerConfig, initial_lr: f64) -> Result<Self> {
        cfg.validate()?;
        if !(initial_lr > 0.0) {
            return Err(invalid("scheduler: initial lr must be > 0"));
        }
        Ok(SchedulerState {
            cfg,
            lr: initial_lr,
            best: None,
            bad_evals: 0,
            evals_since_best: 0,
            stop: false,
        })
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Consumes one validation score (lower is better). An improvement by at
    /// least `min_delta` resets the counters; `patience` non-improving
    /// evaluations halve the rate; a rate below `min_lr` stops on the
    /// following step, and so does a long stretch without improvement.
    pub fn step(&mut self, val_score: f64) {
        if self.stop {
            return;
        }
        if self.lr < self.cfg.min_lr {
            self.stop = true;
            return;
        }
        let improved = match self.best {
            None => true,
            Some(best) => val_score < best - self.cfg.min_delta,
        };
        if improved {
            self.best = Some(val_score);
            self.bad_evals = 0;
            self.evals_since_best = 0;
        } else {
            self.bad_evals += 1;
            self.evals_since_best += 1;
            if self.bad_evals >= self.cfg.patience {
                self.lr *= self.cfg.factor;
                self.bad_evals = 0;
            }
            if self.evals_since_best >= self.cfg.early_stop_evals {
                self.stop = true;
            }
        }
    }
}

/// Which parameters `train` returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// The parameters after the last epoch.
    Final,
    /// The epoch with the best validation recall on the cyclone class.
    BestTcRecall,
    /// The epoch with the lowest validation loss.
    BestValLoss,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossSpec,
    /// Ordered channel names fed to the model.
    pub channels: Vec<String>,
    pub adam: AdamParams,
    /// None trains at a fixed rate for the full epoch budget.
    pub scheduler: Option<SchedulerConfig>,
    /// Random longitudinal roll of each training sample, once per draw.
    pub augment_roll: bool,
    pub selection: Selection,
}

impl TrainConfig {
    pub fn new(loss: LossSpec, channels: Vec<String>) -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 4,
            seed: 0,
            loss,
            channels,
            adam: AdamParams::default(),
            scheduler: None,
            augment_roll: false,
            selection: Selection::BestTcRecall,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(invalid("train: epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(invalid("train: batch_size must be >= 1"));
        }
        if self.channels.is_empty() {
            return Err(invalid("train: no input channels selected"));
        }
        self.adam.validate()?;
        if !(self.adam.lr > 0.0) {
            return Err(invalid("train: initial learning rate must be > 0"));
        }
        if let Some(s) = &self.scheduler {
            s.validate()?;
        }
        Ok(())
    }
}

/// One epoch's record; validation entries are absent when the dataset has
/// no validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_metrics: Option<MetricsReport>,
    /// Learning rate in effect during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

pub struct TrainOutput {
    pub model: Model,
    pub history: TrainHistory,
}

/// Initializes a model from `model_config` and runs the epoch loop:
/// seeded shuffle, full-grid batches, forward/loss/backward/Adam, one
/// validation pass per epoch, plateau scheduling, and checkpoint selection.
pub fn train(
    model_config: &ModelConfig,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    model_config.validate()?;
    if cfg.channels.len() != model_config.input_channels {
        return Err(invalid(format!(
            "train: {} channels selected but the model takes {}",
            cfg.channels.len(),
            model_config.input_channels
        )));
    }
    cfg.loss.validate(model_config.class_count)?;
    let train_idx = dataset.indices_in(Split::Train);
    if train_idx.is_empty() {
        return Err(invalid("train: dataset has no train split"));
    }
    let val_idx = dataset.indices_in(Split::Val);
    if cfg.scheduler.is_some() && val_idx.is_empty() {
        return Err(invalid(
            "train: learning-rate scheduling needs a validation split",
        ));
    }

    let mut model = init_model(model_config)?;
    let mut adam = AdamState::new(cfg.adam);
    let mut scheduler = match &cfg.scheduler {
        Some(sc) => Some(SchedulerState::new(*sc, cfg.adam.lr)?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model)> = None;

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut rolled: Vec<ClimateSample> = Vec::new();
            let batch_samples: Vec<&ClimateSample> = if cfg.augment_roll {
                for &i in chunk {
                    let s = dataset.sample(i);
                    let offset = rng.random_range(0..s.width());
                    rolled.push(s.roll_longitude(offset)?);
                }
                rolled.iter().collect()
            } else {
                chunk.iter().map(|&i| dataset.sample(i)).collect()
            };
            let batch_loss = train_step(&mut model, &mut adam, cfg, &batch_samples)
                .map_err(|e| invalid(format!("epoch {epoch}, batch {batch_no}: {e}")))?;
            loss_sum += batch_loss * batch_samples.len() as f64;
            seen += batch_samples.len();
        }
        let train_loss = loss_sum / seen as f64;

        let lr_in_effect = adam.hyper.lr;
        let (val_loss, val_metrics) = if val_idx.is_empty() {
            (None, None)
        } else {
            let (vl, _, report) = validation_pass(&model, dataset, &val_idx, cfg)?;
            (Some(vl), Some(report))
        };

        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_metrics: val_metrics.clone(),
            lr: lr_in_effect,
        });

        if let Some(report) = &val_metrics {
            let score = match cfg.selection {
                Selection::Final => None,
                Selection::BestTcRecall => report.class(CLASS_TC as usize).recall,
                // Negated so "higher is better" covers both keys.
                Selection::BestValLoss => val_loss.map(|v| -v),
            };
            if let Some(s) = score {
                let better = best.as_ref().map_or(true, |(b, _)| s > *b);
                if better {
                    best = Some((s, model.clone()));
                }
            }
        }

        if let (Some(sched), Some(vl)) = (scheduler.as_mut(), val_loss) {
            sched.step(vl);
            adam.hyper.lr = sched.lr;
            if sched.stop {
                break;
            }
        }
    }

    let model = match (cfg.selection, best) {
        (Selection::Final, _) | (_, None) => model,
        (_, Some((_, best_model))) => best_model,
    };
    Ok(TrainOutput { model, history })
}

fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    batch: &[&ClimateSample],
) -> Result<f64> {
    let input = assemble_input(batch, &cfg.channels)?;
    let labels: Vec<_> = batch.iter().map(|s| &s.labels).collect();
    let onehot = OneHotLabels::stack_batch(&labels, model.config.class_count)?;
    let mut tape = Tape::new();
    let x = tape.constant(input)?;
    let probs = model.forward_graph_train(&mut tape, x)?;
    let loss = loss_node(&mut tape, probs, &onehot, &cfg.loss)?;
    let loss_value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    adam.apply(&mut model.params, &grads)?;
    Ok(loss_value)
}

/// Mean per-sample loss, pooled confusion counts and metrics over a split.
fn validation_pass(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, ConfusionMatrix, MetricsReport)> {
    let class_count = model.config.class_count;
    let mut cm = ConfusionMatrix::zero(class_count);
    let mut loss_sum = 0.0;
    for &i in indices {
        let sample = dataset.sample(i);
        let input = sample_input(sample, &cfg.channels)?;
        let probs = model.forward_sample(&input)?;
        let onehot = OneHotLabels::from_labels(&sample.labels, class_count)?;
        loss_sum += loss_value(&probs, &onehot, &cfg.loss)?;
        let pred = predict_labels(&probs)?;
        cm.merge_in_place(&ConfusionMatrix::from_predictions(
            &pred,
            &sample.labels,
            class_count,
        )?)?;
    }
    let report = metrics_from_cm(&cm);
    Ok((loss_sum / indices.len() as f64, cm, report))
}

/// The C×H×W channel stack of one sample, in the given channel order.
pub fn sample_input(sample: &ClimateSample, channels: &[String]) -> Result<GridTensor> {
    let batch = assemble_input(&[sample], channels)?;
    let (h, w) = (sample.height(), sample.width());
    batch.reshaped(alloc::vec![channels.len(), h, w])
}

/// Eval-mode forward over every sample of a split; pooled confusion counts
/// and the per-class report.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    channels: &[String],
) -> Result<(MetricsReport, ConfusionMatrix)> {
    let indices = dataset.indices_in(split);
    if indices.is_empty() {
        return Err(invalid(format!("evaluate: no samples in {} split", split.tag())));
    }
    let class_count = model.config.class_count;
    let mut cm = ConfusionMatrix::zero(class_count);
    for &i in indices.iter() {
        let sample = dataset.sample(i);
        let input = sample_input(sample, channels)?;
        let probs = model.forward_sample(&input)?;
        let pred = predict_labels(&probs)?;
        cm.merge_in_place(&ConfusionMatrix::from_predictions(
            &pred,
            &sample.labels,
            class_count,
        )?)?;
    }
    Ok((metrics_from_cm(&cm), cm))
}
