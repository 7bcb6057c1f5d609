//! Model checkpoints in the manifest-plus-raw-tensor container: a JSON
//! manifest holding the model configuration, the input channel order and the
//! normalization stats, next to one CGT1 file per named tensor (parameters
//! and batchnorm running statistics).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use cgseg_core::data::ChannelStats;
use cgseg_core::model::{BnStates, Model, ModelConfig, ModelParams};
use cgseg_core::tape::RunningStats;
use cgseg_core::GridTensor;

use crate::cgt;
use crate::dataset_io::{
    read_json, records_to_stats, write_json_atomic, NormalizationRecord,
};
use crate::error::{invalid, io_err, CliError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub file: String,
    pub kind: TensorKind,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    /// Input channels, in the order the model consumes them.
    pub channels: Vec<String>,
    /// Standardization fitted on the training split.
    pub normalization: BTreeMap<String, NormalizationRecord>,
    pub tensors: Vec<TensorRecord>,
}

pub struct Checkpoint {
    pub model: Model,
    pub channels: Vec<String>,
    pub stats: ChannelStats,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    channels: &[String],
    stats: &ChannelStats,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tensor_dir = dir.join("tensors");
    std::fs::create_dir_all(&tensor_dir).map_err(io_err(&tensor_dir))?;

    let mut records = Vec::new();
    let mut counter = 0usize;
    let mut emit = |name: &str, kind: TensorKind, tensor: &GridTensor| -> Result<()> {
        let file = format!("tensors/t{counter:04}.cgt");
        cgt::write_grid(&dir.join(&file), tensor)?;
        records.push(TensorRecord {
            name: name.to_string(),
            file,
            kind,
        });
        counter += 1;
        Ok(())
    };
    for (name, tensor) in model.params.iter() {
        emit(name, TensorKind::Param, tensor)?;
    }
    for (name, stats) in model.bn.iter() {
        emit(
            name,
            TensorKind::RunningMean,
            &GridTensor::new(vec![stats.mean.len()], stats.mean.clone())?,
        )?;
        emit(
            name,
            TensorKind::RunningVar,
            &GridTensor::new(vec![stats.var.len()], stats.var.clone())?,
        )?;
    }

    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        model_config: model.config.clone(),
        channels: channels.to_vec(),
        normalization: stats
            .iter()
            .map(|(n, (mean, std))| (n.to_string(), NormalizationRecord { mean, std }))
            .collect(),
        tensors: records,
    };
    write_json_atomic(&dir.join("manifest.json"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.json");
    let manifest: CheckpointManifest = read_json(&manifest_path)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(CliError::Malformed {
            path: manifest_path,
            reason: format!("unsupported checkpoint version {}", manifest.format_version),
        });
    }
    manifest.model_config.validate()?;

    let mut params = ModelParams::default();
    let mut means: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut vars: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for record in &manifest.tensors {
        let tensor = cgt::read_grid(&dir.join(&record.file))?;
        match record.kind {
            TensorKind::Param => params.insert(&record.name, tensor)?,
            TensorKind::RunningMean => {
                means.insert(record.name.clone(), tensor.into_data());
            }
            TensorKind::RunningVar => {
                vars.insert(record.name.clone(), tensor.into_data());
            }
        }
    }
    let mut bn = BnStates::default();
    for (name, mean) in means {
        let var = vars
            .remove(&name)
            .ok_or_else(|| invalid(format!("checkpoint lacks running variance for {name}")))?;
        bn.insert(&name, RunningStats { mean, var });
    }
    if let Some(name) = vars.keys().next() {
        return Err(invalid(format!("checkpoint lacks running mean for {name}")));
    }

    let model = Model {
        config: manifest.model_config.clone(),
        params,
        bn,
    };
    if model.param_count() != manifest.model_config.param_count()? {
        return Err(CliError::Malformed {
            path: manifest_path,
            reason: "stored tensors disagree with the model configuration".to_string(),
        });
    }
    Ok(Checkpoint {
        model,
        channels: manifest.channels,
        stats: records_to_stats(&manifest.normalization),
    })
}
