//! The seven batch commands. Each writes only inside its output directory
//! and never mutates its input dataset.

use std::path::{Path, PathBuf};

use clap::Args;

use cgseg_core::data::{class_frequencies, Dataset, Split, CLASS_NAMES};
use cgseg_core::data::{compute_channel_stats, ClimateSample};
use cgseg_core::metrics::{default_thresholds, pr_roc_curves};
use cgseg_core::model::predict_labels;
use cgseg_core::synth::{gen_synthetic_dataset, SynthConfig};
use cgseg_core::train::{evaluate, sample_input, train};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset_io::{dir_digest, read_dataset, write_dataset, write_json_atomic};
use crate::error::{invalid, io_err, Result};
use crate::expconfig::{ExperimentConfig, ResolvedExperiment};
use crate::pipeline::{ensure_engineered, prepare_for_training, prepare_with_checkpoint};
use crate::report::{curves_csv, format_report, history_csv, metrics_csv};
use crate::{cgt, ppm};

/// Inclusive "A-B" year range or a single year; empty for no years.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct YearList(pub Vec<u32>);

impl std::str::FromStr for YearList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parse =
            |p: &str| p.trim().parse::<u32>().map_err(|e| format!("bad year {p}: {e}"));
        match s.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    return Err(format!("empty year range {s}"));
                }
                Ok(YearList((a..=b).collect()))
            }
            None if s.trim().is_empty() => Ok(YearList(Vec::new())),
            None => Ok(YearList(vec![parse(s)?])),
        }
    }
}

#[derive(Args, Debug)]
pub struct GenSyntheticArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 24)]
    pub samples: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 1996)]
    pub start_year: u32,
    #[arg(long, default_value_t = 2)]
    pub samples_per_year: usize,
    /// Tropical cyclones per sample, inclusive bounds.
    #[arg(long, default_value_t = 1)]
    pub tc_min: usize,
    #[arg(long, default_value_t = 2)]
    pub tc_max: usize,
    /// Atmospheric rivers per sample, inclusive bounds.
    #[arg(long, default_value_t = 0)]
    pub ar_min: usize,
    #[arg(long, default_value_t = 1)]
    pub ar_max: usize,
    #[arg(long, default_value_t = 3.5)]
    pub tc_radius: f64,
    #[arg(long, default_value_t = 2.0)]
    pub ar_half_width: f64,
    /// Minimum fraction of background pixels per sample.
    #[arg(long, default_value_t = 0.90)]
    pub min_background: f64,
    /// Years assigned to each split, as inclusive ranges.
    #[arg(long, default_value = "1996-2007")]
    pub train_years: YearList,
    #[arg(long, default_value = "2008-2010")]
    pub val_years: YearList,
    #[arg(long, default_value = "2011-2013")]
    pub test_years: YearList,
}

pub fn cmd_gen_synthetic(args: &GenSyntheticArgs) -> Result<()> {
    let cfg = SynthConfig {
        samples: args.samples,
        height: args.height,
        width: args.width,
        seed: args.seed,
        start_year: args.start_year,
        samples_per_year: args.samples_per_year,
        tc_count: (args.tc_min, args.tc_max),
        ar_count: (args.ar_min, args.ar_max),
        tc_radius: args.tc_radius,
        ar_half_width: args.ar_half_width,
        min_background_fraction: args.min_background,
        ..SynthConfig::default()
    };
    let mut dataset = gen_synthetic_dataset(&cfg)?;
    let years: Vec<u32> = dataset.samples().iter().map(|s| s.year).collect();
    let clip = |list: &[u32]| -> Vec<u32> {
        list.iter().copied().filter(|y| years.contains(y)).collect()
    };
    let counts = dataset.split_by_year(
        &clip(&args.train_years.0),
        &clip(&args.val_years.0),
        &clip(&args.test_years.0),
    )?;
    let names: Vec<String> = dataset.sample(0).channel_names().map(String::from).collect();
    let train = dataset.samples_in(Split::Train);
    let stats = if train.is_empty() {
        None
    } else {
        Some(compute_channel_stats(&train, &names)?)
    };
    write_dataset(&args.out, &dataset, stats.as_ref())?;
    println!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        dataset.len(),
        counts.train,
        counts.val,
        counts.test,
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    /// Input dataset directory (left untouched).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output dataset directory with the engineered channels appended.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_features(args: &FeaturesArgs) -> Result<()> {
    if args.out == args.dataset {
        return Err(invalid(
            "features: the output directory must differ from the input dataset",
        ));
    }
    let before = dir_digest(&args.dataset)?;
    let (mut dataset, _) = read_dataset(&args.dataset)?;
    ensure_engineered(&mut dataset)?;
    let names: Vec<String> = dataset.sample(0).channel_names().map(String::from).collect();
    let train = dataset.samples_in(Split::Train);
    let stats = if train.is_empty() {
        None
    } else {
        Some(compute_channel_stats(&train, &names)?)
    };
    write_dataset(&args.out, &dataset, stats.as_ref())?;
    debug_assert_eq!(before, dir_digest(&args.dataset)?);
    println!(
        "wrote {} samples with engineered channels to {}",
        dataset.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Restrict to one split (train/val/test); default covers everything.
    #[arg(long)]
    pub split: Option<Split>,
}

pub fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let (dataset, _) = read_dataset(&args.dataset)?;
    let samples: Vec<&ClimateSample> = match args.split {
        Some(split) => dataset.samples_in(split),
        None => dataset.samples().iter().collect(),
    };
    if samples.is_empty() {
        return Err(invalid("stats: no samples in the requested split"));
    }
    let freqs = class_frequencies(samples.iter().map(|s| &s.labels))?;
    let fr = freqs.fractions();
    println!(
        "samples: {}  pixels: {}",
        samples.len(),
        freqs.total
    );
    println!("class frequencies: ({}, {}, {})", fr[0], fr[1], fr[2]);
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        println!("  {name}: {} pixels ({})", freqs.counts[c], fr[c]);
    }
    let names: Vec<String> = samples[0].channel_names().map(String::from).collect();
    let stats = compute_channel_stats(&samples, &names)?;
    println!("channel statistics (mean / std):");
    for (name, (mean, std)) in stats.iter() {
        println!("  {name}: {mean} / {std}");
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Experiment configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config's training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single-threaded fixed-order execution. This implementation is always
    /// deterministic; the flag asserts the contract explicitly.
    #[arg(long)]
    pub deterministic: bool,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut config: ExperimentConfig = crate::dataset_io::read_json(&args.config)?;
    if let Some(d) = &args.dataset {
        config.dataset = d.clone();
    }
    if let Some(o) = &args.out {
        config.output = o.clone();
    }
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    config.validate()?;

    let input_digest = dir_digest(&config.dataset)?;
    let (prepared, train_freqs) = prepare_for_training(&config.dataset, config.features)?;
    let train_cfg = config.train_config(&train_freqs)?;

    let out_dir = config.output.clone();
    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let resolved = ResolvedExperiment {
        name: &config.name,
        dataset: &config.dataset,
        output: &out_dir,
        features: config.features,
        augment_roll: config.augment_roll,
        channels: &prepared.channels,
        model: &config.model,
        epochs: train_cfg.epochs,
        batch_size: train_cfg.batch_size,
        seed: train_cfg.seed,
        adam: train_cfg.adam,
        loss: &train_cfg.loss,
        scheduler: train_cfg.scheduler,
        selection: train_cfg.selection,
    };
    write_json_atomic(&out_dir.join("resolved_config.json"), &resolved)?;

    let output = train(&config.model, &prepared.dataset, &train_cfg)?;

    std::fs::write(
        out_dir.join("history.csv"),
        history_csv(&output.history),
    )
    .map_err(io_err(out_dir.join("history.csv")))?;
    save_checkpoint(
        &out_dir.join("checkpoint"),
        &output.model,
        &prepared.channels,
        &prepared.stats,
    )?;

    debug_assert_eq!(input_digest, dir_digest(&config.dataset)?);
    let last = output.history.epochs.last().expect("at least one epoch");
    println!(
        "{}: trained {} epochs, final train loss {}",
        config.name,
        output.history.epochs.len(),
        last.train_loss
    );
    if let Some(report) = &last.val_metrics {
        print!("validation metrics (last epoch):\n{}", format_report(report));
    }
    println!("checkpoint: {}", out_dir.join("checkpoint").display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Where metrics.csv is written; stdout only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let prepared = prepare_with_checkpoint(&args.dataset, &ckpt)?;
    let (report, cm) = evaluate(
        &ckpt.model,
        &prepared.dataset,
        args.split,
        &prepared.channels,
    )?;
    print!(
        "{} split metrics:\n{}",
        args.split.tag(),
        format_report(&report)
    );
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(io_err(out))?;
        let path = out.join("metrics.csv");
        std::fs::write(&path, metrics_csv(args.split.tag(), &report, &cm))
            .map_err(io_err(&path))?;
        println!("metrics: {}", path.display());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Index of the sample in the dataset manifest.
    #[arg(long)]
    pub sample: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also render the prediction as a PPM image.
    #[arg(long)]
    pub ppm: bool,
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let prepared = prepare_with_checkpoint(&args.dataset, &ckpt)?;
    if args.sample >= prepared.dataset.len() {
        return Err(invalid(format!(
            "sample {} out of range, dataset has {}",
            args.sample,
            prepared.dataset.len()
        )));
    }
    let sample = prepared.dataset.sample(args.sample);
    let input = sample_input(sample, &prepared.channels)?;
    let probs = ckpt.model.forward_sample(&input)?;
    let labels = predict_labels(&probs)?;

    std::fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let label_path = args.out.join(format!("prediction_s{:04}.cgt", args.sample));
    cgt::write_labels(&label_path, &labels)?;
    println!("prediction: {}", label_path.display());
    if args.ppm {
        let ppm_path = args.out.join(format!("prediction_s{:04}.ppm", args.sample));
        ppm::write_labels(&ppm_path, &labels)?;
        println!("image: {}", ppm_path.display());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct CurvesArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of uniformly spaced thresholds from 1.00 down to 0.00.
    #[arg(long, default_value_t = 101)]
    pub threshold_count: usize,
}

pub fn cmd_curves(args: &CurvesArgs) -> Result<()> {
    if args.threshold_count < 2 {
        return Err(invalid("curves: threshold count must be at least 2"));
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let prepared = prepare_with_checkpoint(&args.dataset, &ckpt)?;
    let indices = prepared.dataset.indices_in(args.split);
    if indices.is_empty() {
        return Err(invalid(format!(
            "curves: no samples in {} split",
            args.split.tag()
        )));
    }
    let mut probs = Vec::with_capacity(indices.len());
    let mut truths = Vec::with_capacity(indices.len());
    for &i in &indices {
        let sample = prepared.dataset.sample(i);
        let input = sample_input(sample, &prepared.channels)?;
        probs.push(ckpt.model.forward_sample(&input)?);
        truths.push(sample.labels.clone());
    }
    let thresholds = default_thresholds(args.threshold_count);
    // The storm classes of interest: tropical cyclone and atmospheric river.
    let mut series = Vec::new();
    for class in [1usize, 2] {
        let (pr, roc) = pr_roc_curves(&probs, &truths, class, &thresholds)?;
        series.push(pr);
        series.push(roc);
    }
    std::fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let path = args.out.join("curves.csv");
    std::fs::write(&path, curves_csv(&series)).map_err(io_err(&path))?;
    println!("curves: {}", path.display());
    Ok(())
}

/// Reconstructs a `Dataset` already on disk, used by tests.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(read_dataset(dir)?.0)
}
