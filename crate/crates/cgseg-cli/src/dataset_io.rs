//! On-disk dataset container: `manifest.json` plus one CGT1 file per channel
//! per sample and one label file per sample.
//!
//! ```text
//! dataset/
//!   manifest.json
//!   samples/s0000/TMQ.cgt ... LABELS.cgt
//!   samples/s0001/...
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cgseg_core::data::{channels, ChannelStats, ClimateSample, Dataset, Split};
use cgseg_core::features::GridGeometry;

use crate::cgt;
use crate::error::{invalid, io_err, CliError, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const LABELS_FILE: &str = "LABELS.cgt";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeometryRecord {
    pub lat_deg: Vec<f64>,
    pub lon_deg: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChannelRecord {
    pub name: String,
    pub units: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Directory of the sample's CGT1 files, relative to the dataset root.
    pub dir: String,
    pub year: u32,
    pub index: u32,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub geometry: GeometryRecord,
    pub channels: Vec<ChannelRecord>,
    /// Per-channel mean/std fitted on the train split, when available.
    pub normalization: Option<BTreeMap<String, NormalizationRecord>>,
    pub samples: Vec<SampleRecord>,
}

/// Serializes JSON through a temp file and a rename, so readers never see a
/// partial manifest.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, json.as_bytes()).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn stats_to_records(stats: &ChannelStats) -> BTreeMap<String, NormalizationRecord> {
    stats
        .iter()
        .map(|(name, (mean, std))| (name.to_string(), NormalizationRecord { mean, std }))
        .collect()
}

pub fn records_to_stats(records: &BTreeMap<String, NormalizationRecord>) -> ChannelStats {
    let mut stats = ChannelStats::default();
    for (name, r) in records {
        stats.insert(name, r.mean, r.std);
    }
    stats
}

/// Writes a dataset directory. Every sample must carry the same channel set
/// in the same order.
pub fn write_dataset(
    dir: &Path,
    dataset: &Dataset,
    normalization: Option<&ChannelStats>,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(invalid("refusing to write an empty dataset"));
    }
    let names: Vec<String> = dataset.sample(0).channel_names().map(String::from).collect();
    for s in dataset.samples() {
        let theirs: Vec<String> = s.channel_names().map(String::from).collect();
        if theirs != names {
            return Err(invalid(format!(
                "sample {} has channels {theirs:?}, expected {names:?}",
                s.index
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let samples_root = dir.join("samples");
    std::fs::create_dir_all(&samples_root).map_err(io_err(&samples_root))?;

    let mut records = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let sample = dataset.sample(i);
        let rel = format!("samples/s{i:04}");
        let sdir = dir.join(&rel);
        std::fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
        for (name, grid) in sample.channels() {
            cgt::write_grid(&sdir.join(format!("{name}.cgt")), grid)?;
        }
        cgt::write_labels(&sdir.join(LABELS_FILE), &sample.labels)?;
        records.push(SampleRecord {
            dir: rel,
            year: sample.year,
            index: sample.index,
            split: dataset.split_of(i),
        });
    }

    let geometry = dataset.sample(0).geometry.clone();
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        geometry: GeometryRecord {
            lat_deg: geometry.lat_deg().to_vec(),
            lon_deg: geometry.lon_deg().to_vec(),
        },
        channels: names
            .iter()
            .map(|n| ChannelRecord {
                name: n.clone(),
                units: channels::units(n).to_string(),
            })
            .collect(),
        normalization: normalization.map(stats_to_records),
        samples: records,
    };
    write_json_atomic(&dir.join("manifest.json"), &manifest)
}

/// Loads a dataset directory fully into memory.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(CliError::Malformed {
            path: manifest_path,
            reason: format!(
                "unsupported manifest version {}",
                manifest.format_version
            ),
        });
    }
    let geometry = GridGeometry::new(
        manifest.geometry.lat_deg.clone(),
        manifest.geometry.lon_deg.clone(),
    )?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut splits = Vec::with_capacity(manifest.samples.len());
    for record in &manifest.samples {
        let sdir = dir.join(&record.dir);
        let mut chans = Vec::with_capacity(manifest.channels.len());
        for ch in &manifest.channels {
            let grid = cgt::read_grid(&sdir.join(format!("{}.cgt", ch.name)))?;
            chans.push((ch.name.clone(), grid));
        }
        let labels = cgt::read_labels(&sdir.join(LABELS_FILE))?;
        samples.push(ClimateSample::new(
            record.year,
            record.index,
            chans,
            labels,
            geometry.clone(),
        )?);
        splits.push(record.split);
    }
    let dataset = Dataset::with_splits(samples, splits)?;
    Ok((dataset, manifest))
}

/// Recursive (path, size, bytes-hash) digest of a directory tree. Used by
/// tests to prove commands leave their input datasets untouched.
pub fn dir_digest(dir: &Path) -> Result<Vec<(PathBuf, u64)>> {
    let mut entries = Vec::new();
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(PathBuf, u64)>) -> Result<()> {
        let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(io_err(dir))?;
        names.sort();
        for path in names {
            if path.is_dir() {
                walk(&path, root, out)?;
            } else {
                let bytes = std::fs::read(&path).map_err(io_err(&path))?;
                // FNV-1a over the contents.
                let mut h: u64 = 0xcbf29ce484222325;
                for b in bytes {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), h));
            }
        }
        Ok(())
    }
    walk(dir, dir, &mut entries)?;
    Ok(entries)
}
