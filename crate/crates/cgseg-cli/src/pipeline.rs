//! The shared data pipeline behind the training and evaluation commands:
//! load a dataset directory, engineer the derived wind channels on demand,
//! and standardize with train-split statistics.

use std::path::Path;

use cgseg_core::data::{
    class_frequencies, compute_channel_stats, standardize_sample, ChannelStats, ClassFrequencies,
    Dataset, Split,
};
use cgseg_core::features::engineer_features;

use crate::checkpoint::Checkpoint;
use crate::dataset_io::read_dataset;
use crate::error::{invalid, Result};
use crate::expconfig::FeatureSet;

pub struct PreparedData {
    pub dataset: Dataset,
    pub channels: Vec<String>,
    pub stats: ChannelStats,
}

/// Appends the engineered channels to every sample that lacks them.
pub fn ensure_engineered(dataset: &mut Dataset) -> Result<()> {
    for i in 0..dataset.len() {
        let has = dataset
            .sample(i)
            .channel(cgseg_core::data::channels::WS850)
            .is_some();
        if !has {
            let engineered = engineer_features(dataset.sample(i))?;
            *dataset.sample_mut(i) = engineered;
        }
    }
    Ok(())
}

fn standardize_all(dataset: &mut Dataset, stats: &ChannelStats, channels: &[String]) -> Result<()> {
    for i in 0..dataset.len() {
        let selected = dataset.sample(i).select_channels(channels)?;
        *dataset.sample_mut(i) = standardize_sample(&selected, stats)?;
    }
    Ok(())
}

/// Loads and prepares a dataset for training: channel selection, train-split
/// statistics, standardization. Returns the train-split class frequencies
/// for weight resolution.
pub fn prepare_for_training(
    dataset_dir: &Path,
    features: FeatureSet,
) -> Result<(PreparedData, ClassFrequencies)> {
    let (mut dataset, _) = read_dataset(dataset_dir)?;
    if features == FeatureSet::Engineered {
        ensure_engineered(&mut dataset)?;
    }
    let channels = features.channels();
    let train = dataset.samples_in(Split::Train);
    if train.is_empty() {
        return Err(invalid(format!(
            "{}: dataset has no train split",
            dataset_dir.display()
        )));
    }
    let stats = compute_channel_stats(&train, &channels)?;
    let freqs = class_frequencies(train.iter().map(|s| &s.labels))?;
    standardize_all(&mut dataset, &stats, &channels)?;
    Ok((
        PreparedData {
            dataset,
            channels,
            stats,
        },
        freqs,
    ))
}

/// Loads a dataset and standardizes it with the statistics stored in a
/// checkpoint, reproducing the training-time pipeline exactly.
pub fn prepare_with_checkpoint(dataset_dir: &Path, ckpt: &Checkpoint) -> Result<PreparedData> {
    let (mut dataset, _) = read_dataset(dataset_dir)?;
    let engineered = ckpt
        .channels
        .iter()
        .any(|c| cgseg_core::data::channels::ENGINEERED.contains(&c.as_str()));
    if engineered {
        ensure_engineered(&mut dataset)?;
    }
    standardize_all(&mut dataset, &ckpt.stats, &ckpt.channels)?;
    Ok(PreparedData {
        dataset,
        channels: ckpt.channels.clone(),
        stats: ckpt.stats.clone(),
    })
}
