//! In-memory dataset model: labeled climate samples, year-based splits,
//! class statistics and weighting, per-channel standardization, and the
//! longitudinal-roll augmentation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::features::GridGeometry;
use crate::loss::{ClassWeights, WeightNorm};
use crate::tensor::GridTensor;

/// Background, tropical cyclone, atmospheric river.
pub const CLASS_COUNT: usize = 3;
pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_TC: u8 = 1;
pub const CLASS_AR: u8 = 2;

/// Short per-class tags used in reports.
pub const CLASS_NAMES: [&str; CLASS_COUNT] = ["bg", "tc", "ar"];

/// The channel catalog: the sixteen raw fields plus the four engineered ones.
pub mod channels {
    pub const TMQ: &str = "TMQ";
    pub const U850: &str = "U850";
    pub const V850: &str = "V850";
    pub const UBOT: &str = "UBOT";
    pub const VBOT: &str = "VBOT";
    pub const QREFHT: &str = "QREFHT";
    pub const PS: &str = "PS";
    pub const PSL: &str = "PSL";
    pub const T200: &str = "T200";
    pub const T500: &str = "T500";
    pub const PRECT: &str = "PRECT";
    pub const TS: &str = "TS";
    pub const TREFHT: &str = "TREFHT";
    pub const Z1000: &str = "Z1000";
    pub const Z200: &str = "Z200";
    pub const ZBOT: &str = "ZBOT";
    pub const WS850: &str = "WS850";
    pub const VRT850: &str = "VRT850";
    pub const WSBOT: &str = "WSBOT";
    pub const VRTBOT: &str = "VRTBOT";

    pub const RAW: [&str; 16] = [
        TMQ, U850, V850, UBOT, VBOT, QREFHT, PS, PSL, T200, T500, PRECT, TS, TREFHT, Z1000, Z200,
        ZBOT,
    ];
    pub const ENGINEERED: [&str; 4] = [WS850, VRT850, WSBOT, VRTBOT];

    /// The four channels the baseline model trains on.
    pub const BASELINE_INPUT: [&str; 4] = [TMQ, U850, V850, PSL];

    pub fn is_known(name: &str) -> bool {
        RAW.contains(&name) || ENGINEERED.contains(&name)
    }

    /// Units for the manifest, by channel name.
    pub fn units(name: &str) -> &'static str {
        match name {
            TMQ => "kg/m^2",
            U850 | V850 | UBOT | VBOT | WS850 | WSBOT | VRT850 | VRTBOT => "m/s",
            QREFHT => "kg/kg",
            PS | PSL => "Pa",
            T200 | T500 | TS | TREFHT => "K",
            PRECT => "m/s",
            Z1000 | Z200 | ZBOT => "m",
            _ => "-",
        }
    }
}

/// Per-pixel class labels on an H×W grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid(format!(
                "label grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelGrid {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelGrid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn as_slice_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Errors with the first offending pixel if any label >= class_count.
    pub fn check_classes(&self, class_count: usize) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if (v as usize) >= class_count {
                return Err(Error::LabelOutOfRange {
                    row: i / self.width,
                    col: i % self.width,
                    value: v,
                    class_count,
                });
            }
        }
        Ok(())
    }

    /// Circular shift of the columns by `offset`.
    pub fn roll_columns(&self, offset: usize) -> LabelGrid {
        let w = self.width;
        if w == 0 {
            return self.clone();
        }
        let k = offset % w;
        let mut data = vec![0u8; self.data.len()];
        for r in 0..self.height {
            for c in 0..w {
                data[r * w + c] = self.data[r * w + (c + w - k) % w];
            }
        }
        LabelGrid {
            height: self.height,
            width: w,
            data,
        }
    }
}

/// Circular shift of the columns of an H×W channel grid.
pub fn roll_grid_columns(grid: &GridTensor, offset: usize) -> Result<GridTensor> {
    let (h, w) = grid.dims2("roll_grid_columns")?;
    if w == 0 {
        return Ok(grid.clone());
    }
    let k = offset % w;
    let mut data = vec![0.0; grid.len()];
    for r in 0..h {
        for c in 0..w {
            data[r * w + c] = grid.data()[r * w + (c + w - k) % w];
        }
    }
    Ok(GridTensor::from_parts(vec![h, w], data))
}

/// One simulation time step: named H×W channels, a label grid, and the
/// grid geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ClimateSample {
    pub year: u32,
    pub index: u32,
    channels: Vec<(String, GridTensor)>,
    pub labels: LabelGrid,
    pub geometry: GridGeometry,
}

impl ClimateSample {
    pub fn new(
        year: u32,
        index: u32,
        channels: Vec<(String, GridTensor)>,
        labels: LabelGrid,
        geometry: GridGeometry,
    ) -> Result<Self> {
        let (h, w) = (geometry.height(), geometry.width());
        if labels.height() != h || labels.width() != w {
            return Err(invalid(format!(
                "labels are {}x{} but the geometry is {h}x{w}",
                labels.height(),
                labels.width()
            )));
        }
        labels.check_classes(CLASS_COUNT)?;
        let mut seen = BTreeMap::new();
        for (name, grid) in &channels {
            if !channels_is_known(name) {
                return Err(invalid(format!("channel {name} is not in the catalog")));
            }
            if seen.insert(name.clone(), ()).is_some() {
                return Err(Error::DuplicateChannel(name.clone()));
            }
            let (gh, gw) = grid.dims2("channel grid")?;
            if gh != h || gw != w {
                return Err(invalid(format!(
                    "channel {name} is {gh}x{gw} but the geometry is {h}x{w}"
                )));
            }
        }
        Ok(ClimateSample {
            year,
            index,
            channels,
            labels,
            geometry,
        })
    }

    pub fn height(&self) -> usize {
        self.geometry.height()
    }

    pub fn width(&self) -> usize {
        self.geometry.width()
    }

    pub fn channel(&self, name: &str) -> Option<&GridTensor> {
        self.channels
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g)
    }

    pub fn channel_names(&self) -> impl Iterator<Item = &str> {
        self.channels.iter().map(|(n, _)| n.as_str())
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[(String, GridTensor)] {
        &self.channels
    }

    /// Appends a channel; the name must be new and in the catalog.
    pub fn push_channel(&mut self, name: &str, grid: GridTensor) -> Result<()> {
        if !channels_is_known(name) {
            return Err(invalid(format!("channel {name} is not in the catalog")));
        }
        if self.channel(name).is_some() {
            return Err(Error::DuplicateChannel(name.to_string()));
        }
        let (gh, gw) = grid.dims2("channel grid")?;
        if gh != self.height() || gw != self.width() {
            return Err(invalid(format!(
                "channel {name} is {gh}x{gw} but the sample is {}x{}",
                self.height(),
                self.width()
            )));
        }
        self.channels.push((name.to_string(), grid));
        Ok(())
    }

    /// A copy restricted to the named channels, in the given order.
    pub fn select_channels(&self, names: &[String]) -> Result<ClimateSample> {
        let mut selected = Vec::with_capacity(names.len());
        for name in names {
            let grid = self
                .channel(name)
                .ok_or_else(|| Error::MissingChannel(name.clone()))?;
            selected.push((name.clone(), grid.clone()));
        }
        Ok(ClimateSample {
            year: self.year,
            index: self.index,
            channels: selected,
            labels: self.labels.clone(),
            geometry: self.geometry.clone(),
        })
    }

    /// Circular shift of every channel, the labels, and the longitudes by
    /// `offset` columns.
    pub fn roll_longitude(&self, offset: usize) -> Result<ClimateSample> {
        let mut channels = Vec::with_capacity(self.channels.len());
        for (name, grid) in &self.channels {
            channels.push((name.clone(), roll_grid_columns(grid, offset)?));
        }
        Ok(ClimateSample {
            year: self.year,
            index: self.index,
            channels,
            labels: self.labels.roll_columns(offset),
            geometry: self.geometry.rolled(offset),
        })
    }
}

fn channels_is_known(name: &str) -> bool {
    channels::is_known(name)
}

/// Train/validation/test membership.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl core::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!(
                "unknown split {other}, expected train, val or test"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// An ordered collection of samples with optional split assignments.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<ClimateSample>,
    splits: Vec<Option<Split>>,
}

impl Dataset {
    pub fn new(samples: Vec<ClimateSample>) -> Self {
        let splits = vec![None; samples.len()];
        Dataset { samples, splits }
    }

    pub fn with_splits(samples: Vec<ClimateSample>, splits: Vec<Option<Split>>) -> Result<Self> {
        if samples.len() != splits.len() {
            return Err(invalid("one split assignment per sample required"));
        }
        Ok(Dataset { samples, splits })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &ClimateSample {
        &self.samples[i]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut ClimateSample {
        &mut self.samples[i]
    }

    pub fn samples(&self) -> &[ClimateSample] {
        &self.samples
    }

    pub fn split_of(&self, i: usize) -> Option<Split> {
        self.splits[i]
    }

    pub fn set_split(&mut self, i: usize, split: Option<Split>) {
        self.splits[i] = split;
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == Some(split))
            .collect()
    }

    pub fn samples_in(&self, split: Split) -> Vec<&ClimateSample> {
        self.indices_in(split)
            .into_iter()
            .map(|i| &self.samples[i])
            .collect()
    }

    /// Assigns every sample to the split whose year list contains its year.
    /// Year lists must be disjoint and jointly cover all sample years; an
    /// empty val list gives a two-way split.
    pub fn split_by_year(
        &mut self,
        train_years: &[u32],
        val_years: &[u32],
        test_years: &[u32],
    ) -> Result<SplitCounts> {
        for y in train_years {
            if val_years.contains(y) || test_years.contains(y) {
                return Err(invalid(format!("year {y} appears in more than one split")));
            }
        }
        for y in val_years {
            if test_years.contains(y) {
                return Err(invalid(format!("year {y} appears in more than one split")));
            }
        }
        let mut counts = SplitCounts {
            train: 0,
            val: 0,
            test: 0,
        };
        for i in 0..self.samples.len() {
            let y = self.samples[i].year;
            let split = if train_years.contains(&y) {
                counts.train += 1;
                Split::Train
            } else if val_years.contains(&y) {
                counts.val += 1;
                Split::Val
            } else if test_years.contains(&y) {
                counts.test += 1;
                Split::Test
            } else {
                return Err(invalid(format!(
                    "sample year {y} is not covered by any split"
                )));
            };
            self.splits[i] = Some(split);
        }
        Ok(counts)
    }
}

/// Pixel counts and fractions per class over some set of label grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassFrequencies {
    pub counts: [u64; CLASS_COUNT],
    pub total: u64,
}

impl ClassFrequencies {
    pub fn fractions(&self) -> [f64; CLASS_COUNT] {
        let t = self.total as f64;
        [
            self.counts[0] as f64 / t,
            self.counts[1] as f64 / t,
            self.counts[2] as f64 / t,
        ]
    }
}

/// Exact per-class pixel fractions over the given label grids.
pub fn class_frequencies<'a>(
    labels: impl IntoIterator<Item = &'a LabelGrid>,
) -> Result<ClassFrequencies> {
    let mut counts = [0u64; CLASS_COUNT];
    let mut total = 0u64;
    for grid in labels {
        grid.check_classes(CLASS_COUNT)?;
        for &v in grid.as_slice() {
            counts[v as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(invalid("class_frequencies: no pixels counted"));
    }
    Ok(ClassFrequencies { counts, total })
}

/// How raw per-class weights are derived from frequencies.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightScheme {
    /// w_c proportional to 1/f_c.
    Inverse,
    /// w_c proportional to 1/sqrt(f_c).
    InverseSqrt,
    /// Caller-provided weights, normalized like the derived ones.
    Manual(Vec<f64>),
}

/// Class weights from split frequencies, normalized per `norm`.
pub fn compute_class_weights(
    freqs: &ClassFrequencies,
    scheme: &WeightScheme,
    norm: WeightNorm,
) -> Result<ClassWeights> {
    let fractions = freqs.fractions();
    let raw: Vec<f64> = match scheme {
        WeightScheme::Inverse => {
            for (c, &f) in fractions.iter().enumerate() {
                if f == 0.0 {
                    return Err(invalid(format!(
                        "class {c} has zero frequency; inverse weighting is undefined \
                         (smooth the frequencies or use manual weights)"
                    )));
                }
            }
            fractions.iter().map(|&f| 1.0 / f).collect()
        }
        WeightScheme::InverseSqrt => {
            for (c, &f) in fractions.iter().enumerate() {
                if f == 0.0 {
                    return Err(invalid(format!(
                        "class {c} has zero frequency; inverse-sqrt weighting is undefined \
                         (smooth the frequencies or use manual weights)"
                    )));
                }
            }
            fractions.iter().map(|&f| 1.0 / libm::sqrt(f)).collect()
        }
        WeightScheme::Manual(values) => {
            if values.len() != CLASS_COUNT {
                return Err(invalid(format!(
                    "manual weights need {CLASS_COUNT} entries, got {}",
                    values.len()
                )));
            }
            values.clone()
        }
    };
    let normalized = ClassWeights::new(raw, norm)?.normalized();
    ClassWeights::new(normalized, norm)
}

/// Per-channel mean and standard deviation, fitted on one split only.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ChannelStats {
    entries: BTreeMap<String, (f64, f64)>,
}

impl ChannelStats {
    pub fn new(entries: BTreeMap<String, (f64, f64)>) -> Self {
        ChannelStats { entries }
    }

    pub fn get(&self, name: &str) -> Option<(f64, f64)> {
        self.entries.get(name).copied()
    }

    pub fn insert(&mut self, name: &str, mean: f64, std: f64) {
        self.entries.insert(name.to_string(), (mean, std));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, (f64, f64))> {
        self.entries.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Population mean/std of each named channel over the given samples.
pub fn compute_channel_stats(
    samples: &[&ClimateSample],
    channel_names: &[String],
) -> Result<ChannelStats> {
    if samples.is_empty() {
        return Err(invalid("compute_channel_stats: no samples"));
    }
    let mut stats = ChannelStats::default();
    for name in channel_names {
        let mut sum = 0.0;
        let mut count = 0usize;
        for s in samples {
            let grid = s
                .channel(name)
                .ok_or_else(|| Error::MissingChannel(name.clone()))?;
            sum += grid.sum();
            count += grid.len();
        }
        let mean = sum / count as f64;
        let mut sq = 0.0;
        for s in samples {
            let grid = s.channel(name).expect("checked above");
            for &v in grid.data() {
                let d = v - mean;
                sq += d * d;
            }
        }
        let std = libm::sqrt(sq / count as f64);
        stats.insert(name, mean, std);
    }
    Ok(stats)
}

const STD_FLOOR: f64 = 1e-8;

/// (x - mean)/std per channel; labels and geometry untouched. Every channel
/// on the sample must have fitted stats.
pub fn standardize_sample(sample: &ClimateSample, stats: &ChannelStats) -> Result<ClimateSample> {
    let mut out = sample.clone();
    for (name, grid) in out.channels.iter_mut() {
        let (mean, std) = stats
            .get(name)
            .ok_or_else(|| Error::MissingChannel(name.clone()))?;
        let denom = std.max(STD_FLOOR);
        *grid = grid.map(|v| (v - mean) / denom);
    }
    Ok(out)
}

/// Stacks the named channels of each sample into one N×C×H×W batch input.
pub fn assemble_input(samples: &[&ClimateSample], channel_names: &[String]) -> Result<GridTensor> {
    if samples.is_empty() {
        return Err(invalid("assemble_input: empty batch"));
    }
    let (h, w) = (samples[0].height(), samples[0].width());
    let (n, c) = (samples.len(), channel_names.len());
    let mut data = Vec::with_capacity(n * c * h * w);
    for s in samples {
        if s.height() != h || s.width() != w {
            return Err(invalid(format!(
                "assemble_input: sample grids disagree ({h}x{w} vs {}x{})",
                s.height(),
                s.width()
            )));
        }
        for name in channel_names {
            let grid = s
                .channel(name)
                .ok_or_else(|| Error::MissingChannel(name.clone()))?;
            data.extend_from_slice(grid.data());
        }
    }
    Ok(GridTensor::from_parts(vec![n, c, h, w], data))
}
