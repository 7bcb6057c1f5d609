//! Acceptance suite: one test per criterion, each printing a PASS line
//! (visible with `--nocapture`) and enforcing its runtime budget.
//!
//! Run with:
//! ```text
//! cargo test -p cgseg-cli --test acceptance -- --nocapture
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cgseg_core::data::{
    class_frequencies, compute_channel_stats, compute_class_weights, standardize_sample,
    channels, Dataset, LabelGrid, Split, WeightScheme,
};
use cgseg_core::features::{relative_vorticity, GridGeometry, WindComponents, WindLevel};
use cgseg_core::gradcheck::{max_fd_error_refined, DEFAULT_STEP, DEFAULT_TOLERANCE};
use cgseg_core::loss::{
    loss_node, loss_value, CeReduction, ClassWeights, LossSpec, OneHotLabels, TverskyParams,
    WeightNorm,
};
use cgseg_core::metrics::{metrics_from_cm, pixel_accuracy, pr_roc_curves, ConfusionMatrix};
use cgseg_core::model::{init_model, JoinActivation, Model, ModelConfig};
use cgseg_core::synth::{gen_synthetic_dataset, SynthConfig};
use cgseg_core::tape::{BnForward, ConvSpec, NodeId, RunningStats, Tape};
use cgseg_core::train::{evaluate, train, AdamParams, Selection, TrainConfig};
use cgseg_core::{GridTensor, Result};

use cgseg_cli::checkpoint::{load_checkpoint, save_checkpoint};
use cgseg_cli::cgt;
use cgseg_cli::dataset_io::dir_digest;

/// Runtime budgets assume exclusive use of the machine, so the criteria
/// serialize on this lock regardless of the test-thread count.
static SEQUENTIAL: Mutex<()> = Mutex::new(());

fn guard() -> std::sync::MutexGuard<'static, ()> {
    SEQUENTIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn pass(criterion: usize, label: &str, elapsed: Duration, budget: Duration) {
    assert!(
        elapsed <= budget,
        "criterion {criterion} exceeded its {budget:?} budget: {elapsed:?}"
    );
    println!("ACCEPTANCE criterion {criterion} ({label}): PASS in {elapsed:.2?}");
}

fn rng_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> GridTensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = lo + (hi - lo) * rng.random::<f64>();
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    GridTensor::new(shape.to_vec(), data).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelGrid {
    LabelGrid::new(
        h,
        w,
        (0..h * w).map(|_| (rng.random::<u32>() % 3) as u8).collect(),
    )
    .unwrap()
}

fn random_probs(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> GridTensor {
    let mut data = vec![0.0; c * h * w];
    for hi in 0..h {
        for wi in 0..w {
            let raw: Vec<f64> = (0..c).map(|_| 0.02 + rng.random::<f64>()).collect();
            let sum: f64 = raw.iter().sum();
            for ci in 0..c {
                data[(ci * h + hi) * w + wi] = raw[ci] / sum;
            }
        }
    }
    GridTensor::new(vec![c, h, w], data).unwrap()
}

fn baseline_channels() -> Vec<String> {
    channels::BASELINE_INPUT.iter().map(|s| s.to_string()).collect()
}

/// Standardizes every sample in place with train-split statistics.
fn standardize_dataset(ds: &mut Dataset, names: &[String]) {
    let train = ds.samples_in(Split::Train);
    let stats = compute_channel_stats(&train, names).unwrap();
    for i in 0..ds.len() {
        let sel = ds.sample(i).select_channels(names).unwrap();
        *ds.sample_mut(i) = standardize_sample(&sel, &stats).unwrap();
    }
}

fn check_param(
    build: &dyn Fn(&mut Tape, &BTreeMap<String, GridTensor>) -> Result<NodeId>,
    inputs: &BTreeMap<String, GridTensor>,
    checked: &str,
) {
    let mut tape = Tape::new();
    let root = build(&mut tape, inputs).expect("forward");
    let grads = tape.backward(root).expect("backward");
    let mut f = |probe: &GridTensor| -> Result<f64> {
        let mut vals = inputs.clone();
        vals.insert(checked.to_string(), probe.clone());
        let mut tape = Tape::new();
        let root = build(&mut tape, &vals)?;
        Ok(tape.value(root).item())
    };
    let err = max_fd_error_refined(
        &mut f,
        &inputs[checked],
        &grads[checked],
        DEFAULT_STEP,
        DEFAULT_TOLERANCE,
    )
    .unwrap();
    assert!(err < DEFAULT_TOLERANCE, "{checked}: rel error {err:.3e}");
}

/// A complete network under five thousand parameters.
fn sub_5k_config(seed: u64) -> ModelConfig {
    let cfg = ModelConfig {
        input_channels: 4,
        stage_channels: [4, 8, 12],
        stage2_blocks: 2,
        stage3_blocks: 2,
        dilations: [1, 2],
        glo_reduction: 16,
        extra_conv_bn_relu_layers: 0,
        final_upsample_factor: 8,
        class_count: 3,
        join_activation: JoinActivation::PRelu,
        seed,
    };
    assert!(cfg.param_count().unwrap() < 5_000);
    cfg
}

fn model_loss_gradients(
    model: &Model,
    input: &GridTensor,
    onehot: &OneHotLabels,
    spec: &LossSpec,
) -> (BTreeMap<String, GridTensor>, f64) {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let x = tape.constant(input.clone()).unwrap();
    let probs = m.forward_graph_train(&mut tape, x).unwrap();
    let node = loss_node(&mut tape, probs, onehot, spec).unwrap();
    (tape.backward(node).unwrap(), tape.value(node).item())
}

fn model_loss_value(
    model: &Model,
    input: &GridTensor,
    onehot: &OneHotLabels,
    spec: &LossSpec,
) -> Result<f64> {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let x = tape.constant(input.clone())?;
    let probs = m.forward_graph_train(&mut tape, x)?;
    let node = loss_node(&mut tape, probs, onehot, spec)?;
    Ok(tape.value(node).item())
}

#[test]
fn criterion_1_gradient_integrity() {
    let _serial = guard();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE97);

    // Every primitive against central differences, 20 random instances.
    for i in 0..20 {
        let spec = match i % 4 {
            0 => ConvSpec::plain(),
            1 => ConvSpec { stride: 2, dilation: 1, groups: 1, padding: 1 },
            2 => ConvSpec { stride: 1, dilation: 2, groups: 2, padding: 2 },
            _ => ConvSpec { stride: 1, dilation: 1, groups: 4, padding: 1 },
        };
        let cout = if spec.groups == 4 { 4 } else { 2 };
        let mut inputs = BTreeMap::new();
        inputs.insert("x".into(), rng_tensor(&mut rng, &[1, 4, 5, 5], 0.1, 1.0));
        inputs.insert(
            "k".into(),
            rng_tensor(&mut rng, &[cout, 4 / spec.groups, 3, 3], 0.1, 0.8),
        );
        inputs.insert("b".into(), rng_tensor(&mut rng, &[cout], 0.1, 0.5));
        inputs.insert("scale".into(), rng_tensor(&mut rng, &[cout], 0.5, 1.5));
        inputs.insert("shift".into(), rng_tensor(&mut rng, &[cout], 0.1, 0.5));
        inputs.insert("slope".into(), rng_tensor(&mut rng, &[cout], 0.1, 0.4));
        let train_bn = i % 2 == 0;
        let factor = 2 + i % 2;
        let running = RunningStats {
            mean: (0..cout).map(|_| rng.random::<f64>() - 0.5).collect(),
            var: (0..cout).map(|_| 0.5 + rng.random::<f64>()).collect(),
        };
        // One pipeline through conv, batchnorm, prelu, pooling, upsampling,
        // concat, gating, softmax and the element-wise tail; non-uniform
        // adjoints come from a random projection.
        let ho = (5 + 2 * spec.padding - spec.dilation * 2 - 1) / spec.stride + 1;
        // Positive projection: the channel sums stay in the domain of the
        // fractional power and the log.
        let proj =
            rng_tensor(&mut rng, &[1, 2 * cout, ho * factor, ho * factor], 0.1, 1.0).map(f64::abs);
        let build = move |tape: &mut Tape, vals: &BTreeMap<String, GridTensor>| {
            let x = tape.param("x", vals["x"].clone())?;
            let k = tape.param("k", vals["k"].clone())?;
            let b = tape.param("b", vals["b"].clone())?;
            let y = tape.conv2d(x, k, Some(b), spec)?;
            let scale = tape.param("scale", vals["scale"].clone())?;
            let shift = tape.param("shift", vals["shift"].clone())?;
            let mut fresh = running.clone();
            let stats = if train_bn {
                BnForward::Train { running: &mut fresh, momentum: 0.1 }
            } else {
                BnForward::Eval { running: &fresh }
            };
            let y = tape.batchnorm2d(y, scale, shift, stats, 1e-5)?;
            let slope = tape.param("slope", vals["slope"].clone())?;
            let y = tape.prelu(y, slope)?;
            let pooled = tape.global_avg_pool(y)?;
            let (n, c, _, _) = tape.value(pooled).dims4("pooled")?;
            let flat = tape.reshape(pooled, &[n, c])?;
            let gate = tape.sigmoid(flat)?;
            let gate = tape.reshape(gate, &[n, c, 1, 1])?;
            let gated = tape.mul_gate(y, gate)?;
            let cat = tape.concat_channels(gated, y)?;
            let up = tape.upsample_bilinear(cat, factor)?;
            let sm = tape.softmax_channels(up)?;
            let proj_node = tape.constant(proj.clone())?;
            let p = tape.mul(sm, proj_node)?;
            let s = tape.sum_channelwise(p)?;
            let ln = tape.ln_clamped(s, 1e-12, 1e9)?;
            let pw = tape.pow_const(s, 1.5)?;
            let sum = tape.add(ln, pw)?;
            let total = tape.sum_all(sum)?;
            tape.affine(total, 0.5, 0.1)
        };
        for name in ["x", "k", "b", "scale", "shift", "slope"] {
            check_param(&build, &inputs, name);
        }
    }

    // Every loss through the softmax, 20 random instances each.
    let weights = ClassWeights::new(vec![0.4, 3.0, 1.2], WeightNorm::MeanOne).unwrap();
    let specs = [
        LossSpec::jaccard(),
        LossSpec::dice(),
        LossSpec::cross_entropy(),
        LossSpec::weighted_cross_entropy(weights.clone()),
        LossSpec::weighted_cross_entropy(weights.clone()).with_ce_reduction(CeReduction::Sum),
        LossSpec::focal_tversky(TverskyParams::new(0.7, 2.0).unwrap()),
        LossSpec::weighted_jaccard(weights),
    ];
    for spec in &specs {
        for _ in 0..20 {
            let logits = rng_tensor(&mut rng, &[3, 3, 3], 0.1, 1.5);
            let grid = random_labels(&mut rng, 3, 3);
            let onehot = OneHotLabels::from_labels(&grid, 3).unwrap();
            let spec_c = spec.clone();
            let build = move |tape: &mut Tape, vals: &BTreeMap<String, GridTensor>| {
                let l = tape.param("logits", vals["logits"].clone())?;
                let probs = tape.softmax_channels(l)?;
                loss_node(tape, probs, &onehot, &spec_c)
            };
            let mut inputs = BTreeMap::new();
            inputs.insert("logits".to_string(), logits);
            check_param(&build, &inputs, "logits");
        }
    }

    // Full composed networks: 20 random seeds of a micro network.
    for round in 0..20u64 {
        let cfg = ModelConfig {
            input_channels: 2,
            stage_channels: [4, 4, 4],
            stage2_blocks: 1,
            stage3_blocks: 1,
            dilations: [1, 2],
            glo_reduction: 4,
            extra_conv_bn_relu_layers: (round % 2) as usize,
            final_upsample_factor: 8,
            class_count: 3,
            join_activation: if round % 3 == 0 {
                JoinActivation::Relu
            } else {
                JoinActivation::PRelu
            },
            seed: 9_000 + round,
        };
        let model = init_model(&cfg).unwrap();
        let input = rng_tensor(&mut rng, &[1, 2, 16, 8], 0.2, 1.0);
        let onehot =
            OneHotLabels::stack_batch(&[&random_labels(&mut rng, 16, 8)], 3).unwrap();
        let spec = LossSpec::jaccard();
        let (grads, _) = model_loss_gradients(&model, &input, &onehot, &spec);
        for (name, at) in model.params.iter() {
            let mut f = |probe: &GridTensor| -> Result<f64> {
                let mut m = model.clone();
                *m.params.get_mut(name)? = probe.clone();
                model_loss_value(&m, &input, &onehot, &spec)
            };
            let err =
                max_fd_error_refined(&mut f, at, &grads[name], DEFAULT_STEP, DEFAULT_TOLERANCE)
                    .unwrap();
            assert!(err < DEFAULT_TOLERANCE, "seed {round} {name}: {err:.3e}");
        }
    }

    // A sub-5k-parameter network: every parameter, every loss.
    let cfg = sub_5k_config(77);
    let model = init_model(&cfg).unwrap();
    let input = rng_tensor(&mut rng, &[1, 4, 8, 16], 0.2, 1.0);
    let onehot = OneHotLabels::stack_batch(&[&random_labels(&mut rng, 8, 16)], 3).unwrap();
    for spec in &specs[..6] {
        let (grads, _) = model_loss_gradients(&model, &input, &onehot, spec);
        for (name, at) in model.params.iter() {
            let mut f = |probe: &GridTensor| -> Result<f64> {
                let mut m = model.clone();
                *m.params.get_mut(name)? = probe.clone();
                model_loss_value(&m, &input, &onehot, spec)
            };
            let err =
                max_fd_error_refined(&mut f, at, &grads[name], DEFAULT_STEP, DEFAULT_TOLERANCE)
                    .unwrap();
            assert!(err < DEFAULT_TOLERANCE, "{:?} {name}: {err:.3e}", spec.variant);
        }
    }

    pass(1, "gradient integrity", t0.elapsed(), Duration::from_secs(60));
}

#[test]
fn criterion_2_metric_oracle_equivalence() {
    let _serial = guard();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let thresholds = [0.9, 0.7, 0.5, 0.3, 0.1];
    for _ in 0..100 {
        let truth = random_labels(&mut rng, 16, 16);
        let pred = random_labels(&mut rng, 16, 16);
        let cm = ConfusionMatrix::from_predictions(&pred, &truth, 3).unwrap();
        // Integer-exact one-vs-rest loop oracle.
        for c in 0..3u8 {
            let (mut tp, mut fp, mut fneg, mut tn) = (0u64, 0u64, 0u64, 0u64);
            for i in 0..256 {
                let p = pred.as_slice()[i] == c;
                let t = truth.as_slice()[i] == c;
                match (p, t) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => tn += 1,
                }
            }
            let k = cm.class(c as usize);
            assert_eq!((k.true_pos, k.false_pos, k.false_neg, k.true_neg), (tp, fp, fneg, tn));
            let m = metrics_from_cm(&cm);
            let mc = m.class(c as usize);
            let ratio = |n: u64, d: u64| if d == 0 { None } else { Some(n as f64 / d as f64) };
            assert_eq!(mc.iou, ratio(tp, tp + fp + fneg));
            assert_eq!(mc.dice, ratio(2 * tp, 2 * tp + fp + fneg));
            assert_eq!(mc.precision, ratio(tp, tp + fp));
            assert_eq!(mc.recall, ratio(tp, tp + fneg));
            assert_eq!(mc.specificity, ratio(tn, tn + fp));
        }

        // Threshold sweeps against a brute-force per-threshold loop.
        let probs = vec![random_probs(&mut rng, 3, 16, 16)];
        let truths = vec![truth];
        for class in 0..3usize {
            let (pr, roc) = pr_roc_curves(&probs, &truths, class, &thresholds).unwrap();
            let mut pr_i = 0;
            let mut roc_i = 0;
            for &t in &thresholds {
                let (mut tp, mut fp, mut fneg, mut tn) = (0u64, 0u64, 0u64, 0u64);
                for hi in 0..16 {
                    for wi in 0..16 {
                        let p = probs[0].data()[(class * 16 + hi) * 16 + wi] >= t;
                        let tr = truths[0].get(hi, wi) as usize == class;
                        match (p, tr) {
                            (true, true) => tp += 1,
                            (true, false) => fp += 1,
                            (false, true) => fneg += 1,
                            (false, false) => tn += 1,
                        }
                    }
                }
                if tp + fp > 0 && tp + fneg > 0 {
                    let point = pr.points[pr_i];
                    assert_eq!(point.threshold, t);
                    assert_eq!(point.x, tp as f64 / (tp + fneg) as f64);
                    assert_eq!(point.y, tp as f64 / (tp + fp) as f64);
                    pr_i += 1;
                }
                if tn + fp > 0 && tp + fneg > 0 {
                    let point = roc.points[roc_i];
                    assert_eq!(point.threshold, t);
                    assert_eq!(point.x, 1.0 - tn as f64 / (tn + fp) as f64);
                    assert_eq!(point.y, tp as f64 / (tp + fneg) as f64);
                    roc_i += 1;
                }
            }
            assert_eq!(pr_i, pr.points.len());
            assert_eq!(roc_i, roc.points.len());
        }
    }
    pass(2, "metric oracle equivalence", t0.elapsed(), Duration::from_secs(10));
}

#[test]
fn criterion_3_loss_identities() {
    let _serial = guard();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let probs = random_probs(&mut rng, 3, 4, 5);
        let grid = random_labels(&mut rng, 4, 5);
        let onehot = OneHotLabels::from_labels(&grid, 3).unwrap();

        // Uniform-weight reductions reproduce the unweighted losses.
        let uniform = ClassWeights::new(vec![1.0; 3], WeightNorm::MeanOne).unwrap();
        let wce = loss_value(&probs, &onehot, &LossSpec::weighted_cross_entropy(uniform)).unwrap();
        let ce = loss_value(&probs, &onehot, &LossSpec::cross_entropy()).unwrap();
        assert!((wce - ce).abs() <= 1e-12, "{wce} vs {ce}");
        let uniform = ClassWeights::new(vec![1.0; 3], WeightNorm::Convex).unwrap();
        let wj = loss_value(&probs, &onehot, &LossSpec::weighted_jaccard(uniform)).unwrap();
        let j = loss_value(&probs, &onehot, &LossSpec::jaccard()).unwrap();
        assert!((wj - j).abs() <= 1e-12, "{wj} vs {j}");

        // Focal Tversky at (0.5, 1, 0) is the unsmoothed Dice loss.
        let ft = loss_value(
            &probs,
            &onehot,
            &LossSpec::focal_tversky(TverskyParams::new(0.5, 1.0).unwrap()).with_smoothing(0.0),
        )
        .unwrap();
        let dice = loss_value(&probs, &onehot, &LossSpec::dice().with_smoothing(0.0)).unwrap();
        assert!((ft - dice).abs() <= 1e-10, "{ft} vs {dice}");

        // Every loss vanishes at the one-hot truth.
        let w = ClassWeights::new(vec![0.5, 2.0, 1.0], WeightNorm::MeanOne).unwrap();
        for spec in [
            LossSpec::jaccard(),
            LossSpec::dice(),
            LossSpec::cross_entropy(),
            LossSpec::weighted_cross_entropy(w.clone()),
            LossSpec::focal_tversky(TverskyParams::default()),
            LossSpec::weighted_jaccard(w.clone()),
        ] {
            let v = loss_value(onehot.tensor(), &onehot, &spec).unwrap();
            assert!(v.abs() <= 1e-6, "{:?} at truth: {v}", spec.variant);
        }
    }
    pass(3, "loss identities", t0.elapsed(), Duration::from_secs(10));
}

#[test]
fn criterion_4_vorticity_analytics() {
    let _serial = guard();
    let t0 = Instant::now();
    // zeta(sin lambda, 0) = cos lambda under two grid halvings.
    let mut errors = Vec::new();
    for w in [24usize, 48, 96] {
        let lat: Vec<f64> = (0..9)
            .map(|i| -60.0 + 120.0 * i as f64 / 8.0)
            .collect();
        let lon: Vec<f64> = (0..w).map(|j| 360.0 * j as f64 / w as f64).collect();
        let geom = GridGeometry::new(lat, lon).unwrap();
        let mut u = vec![0.0; 9 * w];
        for i in 0..9 {
            for j in 0..w {
                u[i * w + j] = (geom.lon_deg()[j].to_radians()).sin();
            }
        }
        let wind = WindComponents::new(
            GridTensor::new(vec![9, w], u).unwrap(),
            GridTensor::zeros(vec![9, w]),
            WindLevel::Mbar850,
        )
        .unwrap();
        let out = relative_vorticity(&wind, &geom).unwrap();
        let mut max_err = 0.0f64;
        for i in 1..8 {
            for j in 0..w {
                let want = geom.lon_deg()[j].to_radians().cos();
                max_err = max_err.max((out.zeta.data()[i * w + j] - want).abs());
            }
        }
        errors.push(max_err);
    }
    let order1 = (errors[0] / errors[1]).log2();
    let order2 = (errors[1] / errors[2]).log2();
    assert!(order1 >= 1.9, "first halving order {order1}");
    assert!(order2 >= 1.9, "second halving order {order2}");

    // v cos(phi) = 1 annihilates the latitude term on interior rows.
    let lat: Vec<f64> = (0..12).map(|i| -66.0 + 12.0 * i as f64).collect();
    let lon: Vec<f64> = (0..16).map(|j| 22.5 * j as f64).collect();
    let geom = GridGeometry::new(lat, lon).unwrap();
    let mut v = vec![0.0; 12 * 16];
    for i in 0..12 {
        for j in 0..16 {
            v[i * 16 + j] = 1.0 / geom.lat_rad(i).cos();
        }
    }
    let wind = WindComponents::new(
        GridTensor::zeros(vec![12, 16]),
        GridTensor::new(vec![12, 16], v).unwrap(),
        WindLevel::Mbar850,
    )
    .unwrap();
    let out = relative_vorticity(&wind, &geom).unwrap();
    for i in 1..11 {
        for j in 0..16 {
            assert!(
                out.zeta.data()[i * 16 + j].abs() < 1e-10,
                "row {i}: {}",
                out.zeta.data()[i * 16 + j]
            );
        }
    }
    pass(4, "vorticity analytics", t0.elapsed(), Duration::from_secs(10));
}

#[test]
fn criterion_5_end_to_end_overfit() {
    let _serial = guard();
    let t0 = Instant::now();
    let synth = SynthConfig {
        samples: 32,
        height: 32,
        width: 64,
        seed: 42,
        samples_per_year: 4,
        ..SynthConfig::default()
    };
    let mut ds = gen_synthetic_dataset(&synth).unwrap();
    let years: Vec<u32> = (1996..2004).collect();
    ds.split_by_year(&years, &[], &[]).unwrap();
    let names = baseline_channels();
    standardize_dataset(&mut ds, &names);

    let model_cfg = ModelConfig {
        seed: 1,
        ..ModelConfig::tiny()
    };
    assert!(model_cfg.param_count().unwrap() <= 50_000);

    let mut cfg = TrainConfig::new(LossSpec::jaccard(), names.clone());
    cfg.epochs = 60; // within the 100-epoch budget
    cfg.batch_size = 4;
    cfg.seed = 9;
    cfg.adam = AdamParams {
        lr: 2e-3,
        ..AdamParams::default()
    };
    cfg.selection = Selection::Final;
    let out = train(&model_cfg, &ds, &cfg).unwrap();
    let (report, cm) = evaluate(&out.model, &ds, Split::Train, &names).unwrap();
    let acc = pixel_accuracy(&cm).unwrap();
    let tc_iou = report.class(1).iou.unwrap_or(0.0);
    assert!(acc >= 0.95, "train pixel accuracy {acc}");
    assert!(tc_iou >= 0.5, "cyclone train IoU {tc_iou}");
    pass(5, "end-to-end overfit", t0.elapsed(), Duration::from_secs(600));
}

#[test]
fn criterion_6_weighted_losses_lift_recall() {
    let _serial = guard();
    let t0 = Instant::now();
    // A fixed imbalanced dataset with at most 2% cyclone pixels.
    let synth = SynthConfig {
        samples: 24,
        height: 32,
        width: 64,
        seed: 1234,
        samples_per_year: 2,
        tc_count: (1, 1),
        ar_count: (0, 1),
        tc_radius: 3.0,
        ..SynthConfig::default()
    };
    let mut ds = gen_synthetic_dataset(&synth).unwrap();
    let f = class_frequencies(ds.samples().iter().map(|s| &s.labels)).unwrap();
    assert!(f.fractions()[1] <= 0.02, "cyclone fraction {}", f.fractions()[1]);
    let train_years: Vec<u32> = (1996..2004).collect();
    ds.split_by_year(&train_years, &[2004, 2005], &[2006, 2007]).unwrap();
    let names = baseline_channels();
    let train_samples = ds.samples_in(Split::Train);
    let freqs = class_frequencies(train_samples.iter().map(|s| &s.labels)).unwrap();
    standardize_dataset(&mut ds, &names);

    let model_cfg = ModelConfig {
        seed: 1,
        ..ModelConfig::tiny()
    };
    let w_mean =
        compute_class_weights(&freqs, &WeightScheme::Inverse, WeightNorm::MeanOne).unwrap();
    let w_cvx =
        compute_class_weights(&freqs, &WeightScheme::Inverse, WeightNorm::Convex).unwrap();

    let run = |loss: LossSpec, seed: u64| -> Option<f64> {
        let mut cfg = TrainConfig::new(loss, names.clone());
        cfg.epochs = 12;
        cfg.batch_size = 4;
        cfg.seed = seed;
        cfg.adam = AdamParams {
            lr: 1e-3,
            ..AdamParams::default()
        };
        cfg.selection = Selection::Final;
        let out = train(&model_cfg, &ds, &cfg).unwrap();
        let (report, _) = evaluate(&out.model, &ds, Split::Test, &names).unwrap();
        report.class(1).recall
    };

    for (tag, plain_spec, weighted_spec) in [
        (
            "cross entropy",
            LossSpec::cross_entropy(),
            LossSpec::weighted_cross_entropy(w_mean.clone()),
        ),
        (
            "jaccard",
            LossSpec::jaccard(),
            LossSpec::weighted_jaccard(w_cvx.clone()),
        ),
    ] {
        let mut wins = 0;
        for seed in 0..5u64 {
            let plain = run(plain_spec.clone(), 100 + seed);
            let weighted = run(weighted_spec.clone(), 100 + seed);
            let win = match (plain, weighted) {
                (Some(p), Some(h)) => h > p,
                (None, Some(_)) => true,
                _ => false,
            };
            println!("  {tag} seed {seed}: plain={plain:?} weighted={weighted:?}");
            wins += win as u32;
        }
        assert!(wins >= 4, "{tag}: weighted recall won only {wins}/5 paired runs");
    }
    pass(6, "weighted losses lift recall", t0.elapsed(), Duration::from_secs(1800));
}

#[test]
fn criterion_7_format_round_trips() {
    let _serial = guard();
    let t0 = Instant::now();

    // Documented golden byte string for a 1x1 f32 tensor holding 1.0.
    let one = GridTensor::new(vec![1, 1], vec![1.0]).unwrap();
    assert_eq!(
        cgt::encode_grid(&one),
        [
            0x43, 0x47, 0x54, 0x31, 0x01, 0x02, 0x01, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00,
            0x00, 0x00, 0x80, 0x3F
        ]
    );

    // read ∘ write bitwise identity for both dtypes.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let data: Vec<f64> = (0..60).map(|_| (rng.random::<f32>() * 40.0 - 20.0) as f64).collect();
        let t = GridTensor::new(vec![3, 4, 5], data).unwrap();
        let bytes = cgt::encode_grid(&t);
        match cgt::decode(&bytes, Path::new("mem")).unwrap() {
            cgt::TensorFile::Grid(g) => {
                assert_eq!(g, t);
                assert_eq!(cgt::encode_grid(&g), bytes);
            }
            _ => panic!("wrong dtype"),
        }
        let labels = random_labels(&mut rng, 6, 7);
        let bytes = cgt::encode_labels(&labels);
        match cgt::decode(&bytes, Path::new("mem")).unwrap() {
            cgt::TensorFile::Labels(l) => {
                assert_eq!(l, labels);
                assert_eq!(cgt::encode_labels(&l), bytes);
            }
            _ => panic!("wrong dtype"),
        }
    }

    // Checkpoint save/load reproduces evaluation metrics bitwise.
    let synth = SynthConfig {
        samples: 8,
        height: 16,
        width: 32,
        seed: 5,
        samples_per_year: 2,
        tc_radius: 2.0,
        ar_half_width: 1.2,
        min_background_fraction: 0.85,
        ..SynthConfig::default()
    };
    let mut ds = gen_synthetic_dataset(&synth).unwrap();
    ds.split_by_year(&[1996, 1997], &[1998], &[1999]).unwrap();
    let names = baseline_channels();
    let train_samples = ds.samples_in(Split::Train);
    let stats = compute_channel_stats(&train_samples, &names).unwrap();
    standardize_dataset(&mut ds, &names);

    let mut cfg = TrainConfig::new(LossSpec::jaccard(), names.clone());
    cfg.epochs = 2;
    cfg.batch_size = 2;
    let model_cfg = sub_5k_config(3);
    let out = train(&model_cfg, &ds, &cfg).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("checkpoint");
    save_checkpoint(&dir, &out.model, &names, &stats).unwrap();
    let first = load_checkpoint(&dir).unwrap();
    let (report_mem, cm_mem) = evaluate(&out.model, &ds, Split::Test, &names).unwrap();
    let (report_1, cm_1) = evaluate(&first.model, &ds, Split::Test, &names).unwrap();
    // A second generation is lossless: the loaded parameters are exactly
    // representable, so saving again reproduces the same bytes.
    let dir2 = tmp.path().join("checkpoint2");
    save_checkpoint(&dir2, &first.model, &first.channels, &first.stats).unwrap();
    let second = load_checkpoint(&dir2).unwrap();
    assert_eq!(first.model, second.model);
    let d1 = dir_digest(&dir).unwrap();
    let d2 = dir_digest(&dir2).unwrap();
    assert_eq!(d1.len(), d2.len());
    for ((p1, h1), (p2, h2)) in d1.iter().zip(&d2) {
        assert_eq!(p1, p2);
        assert_eq!(h1, h2, "checkpoint file {} differs between generations", p1.display());
    }
    let (report_2, cm_2) = evaluate(&second.model, &ds, Split::Test, &names).unwrap();
    assert_eq!(cm_1, cm_2);
    assert_eq!(report_1, report_2);
    // The f32 storage of this deterministic run also reproduces the
    // in-memory evaluation exactly.
    assert_eq!(cm_mem, cm_1);
    assert_eq!(report_mem, report_1);

    pass(7, "format round trips", t0.elapsed(), Duration::from_secs(60));
}

#[test]
fn criterion_8_cli_determinism() {
    let _serial = guard();
    let t0 = Instant::now();
    let bin = env!("CARGO_BIN_EXE_cgseg");
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).current_dir(dir).output().unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    run(&[
        "gen-synthetic", "--out", "data/synthetic", "--samples", "10", "--seed", "3",
        "--samples-per-year", "2", "--train-years", "1996-1998", "--val-years", "1999",
        "--test-years", "2000",
    ]);
    let config_src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/exp2_lr_decay.json");
    let mut value: serde_json::Value =
        serde_json::from_slice(&std::fs::read(config_src).unwrap()).unwrap();
    value["train"]["epochs"] = serde_json::json!(3);
    std::fs::write(dir.join("config.json"), serde_json::to_vec(&value).unwrap()).unwrap();

    for out_dir in ["runs/a", "runs/b"] {
        run(&[
            "train", "--config", "config.json", "--out", out_dir, "--seed", "5",
            "--deterministic",
        ]);
    }
    let a = std::fs::read(dir.join("runs/a/history.csv")).unwrap();
    let b = std::fs::read(dir.join("runs/b/history.csv")).unwrap();
    assert_eq!(a, b, "history CSVs differ between identical runs");
    // The checkpoints match bitwise as well (tensor files and manifest).
    let da: Vec<u64> = dir_digest(&dir.join("runs/a/checkpoint")).unwrap().iter().map(|(_, h)| *h).collect();
    let db: Vec<u64> = dir_digest(&dir.join("runs/b/checkpoint")).unwrap().iter().map(|(_, h)| *h).collect();
    assert_eq!(da, db);
    pass(8, "cli determinism", t0.elapsed(), Duration::from_secs(120));
}

#[test]
fn criterion_9_parameter_count_sanity() {
    let _serial = guard();
    let t0 = Instant::now();
    let count = ModelConfig::full_scale().param_count().unwrap();
    assert!(
        (450_000..=550_000).contains(&count),
        "full-scale parameter count {count} outside [4.5e5, 5.5e5]"
    );
    let model = init_model(&ModelConfig::full_scale()).unwrap();
    assert_eq!(model.param_count(), count);
    pass(9, "parameter count sanity", t0.elapsed(), Duration::from_secs(60));
}
