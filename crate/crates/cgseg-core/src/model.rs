//! The context-guided segmentation network.
//!
//! Topology: a three-conv stem with stride 2, two stages of context-guided
//! blocks entered through stride-2 down blocks, raw-input injection and
//! stage-output concatenation, a 1x1 classifier, bilinear upsampling back to
//! the input grid, and a channel softmax. The "doubled upsampling" variant
//! adds one more stride stage; extra Conv+BatchNorm+ReLU layers can be
//! inserted right before the classifier.
//!
//! Every parameter has a stable dotted name; the name list is a pure
//! function of the configuration and is shared by initialization, parameter
//! counting, the forward graph, and checkpointing.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelGrid;
use crate::error::{invalid, Result};
use crate::tape::{BnForward, ConvSpec, Mode, NodeId, RunningStats, Tape};
use crate::tensor::GridTensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const PRELU_INIT: f64 = 0.25;

/// Activation applied to the joined local/surrounding features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JoinActivation {
    PRelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// 4 for the baseline channel set, 8 with the engineered features.
    pub input_channels: usize,
    /// Widths of the stem and the two block stages.
    pub stage_channels: [usize; 3],
    /// Blocks in stage 2 (M) and stage 3 (N), counting the down block.
    pub stage2_blocks: usize,
    pub stage3_blocks: usize,
    /// Dilation of the surrounding-context convolutions per block stage.
    pub dilations: [usize; 2],
    /// Bottleneck reduction of the global-context gate.
    pub glo_reduction: usize,
    /// Extra Conv+BatchNorm+ReLU layers before the classifier.
    pub extra_conv_bn_relu_layers: usize,
    /// 8, or 16 for the doubled-upsampling variant with one extra stride
    /// stage. Also the total downsampling factor, so the output grid
    /// matches the input exactly.
    pub final_upsample_factor: usize,
    pub class_count: usize,
    pub join_activation: JoinActivation,
    /// Seed for the deterministic parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    /// The configuration mirroring the published architecture.
    pub fn full_scale() -> Self {
        ModelConfig {
            input_channels: 4,
            stage_channels: [32, 64, 128],
            stage2_blocks: 3,
            stage3_blocks: 21,
            dilations: [2, 4],
            glo_reduction: 16,
            extra_conv_bn_relu_layers: 0,
            final_upsample_factor: 8,
            class_count: 3,
            join_activation: JoinActivation::PRelu,
            seed: 0,
        }
    }

    /// A small configuration for desk-scale training.
    pub fn tiny() -> Self {
        ModelConfig {
            input_channels: 4,
            stage_channels: [8, 16, 32],
            stage2_blocks: 2,
            stage3_blocks: 2,
            dilations: [2, 4],
            glo_reduction: 16,
            extra_conv_bn_relu_layers: 0,
            final_upsample_factor: 8,
            class_count: 3,
            join_activation: JoinActivation::PRelu,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(invalid("model: input_channels must be >= 1"));
        }
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if c == 0 {
                return Err(invalid(format!("model: stage {} has zero width", i + 1)));
            }
        }
        for &c in &self.stage_channels[1..] {
            if c % 2 != 0 {
                return Err(invalid(format!(
                    "model: block stage width {c} must be even (blocks split it in half)"
                )));
            }
        }
        if self.stage2_blocks < 1 || self.stage3_blocks < 1 {
            return Err(invalid("model: each block stage needs at least one block"));
        }
        if self.dilations.iter().any(|&d| d < 1) {
            return Err(invalid("model: dilation rates must be >= 1"));
        }
        if self.glo_reduction < 1 {
            return Err(invalid("model: glo_reduction must be >= 1"));
        }
        if self.final_upsample_factor != 8 && self.final_upsample_factor != 16 {
            return Err(invalid(format!(
                "model: final_upsample_factor must be 8 or 16, got {}",
                self.final_upsample_factor
            )));
        }
        if self.class_count != 3 {
            return Err(invalid(format!(
                "model: class_count is fixed at 3, got {}",
                self.class_count
            )));
        }
        Ok(())
    }

    /// Total trainable values implied by the configuration.
    pub fn param_count(&self) -> Result<usize> {
        Ok(param_defs(self)?
            .iter()
            .map(|d| d.shape.iter().product::<usize>())
            .sum())
    }

    fn glo_bottleneck(&self, channels: usize) -> usize {
        (channels / self.glo_reduction).max(1)
    }
}

enum Init {
    /// Uniform in (-b, b) with b = sqrt(6 / fan_in).
    FanIn(usize),
    Zero,
    One,
    PRelu,
}

struct ParamDef {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn conv_def(defs: &mut Vec<ParamDef>, prefix: &str, cout: usize, cin_g: usize, k: usize) {
    defs.push(ParamDef {
        name: format!("{prefix}.weight"),
        shape: vec![cout, cin_g, k, k],
        init: Init::FanIn(cin_g * k * k),
    });
    defs.push(ParamDef {
        name: format!("{prefix}.bias"),
        shape: vec![cout],
        init: Init::Zero,
    });
}

fn bn_def(defs: &mut Vec<ParamDef>, prefix: &str, channels: usize) {
    defs.push(ParamDef {
        name: format!("{prefix}.scale"),
        shape: vec![channels],
        init: Init::One,
    });
    defs.push(ParamDef {
        name: format!("{prefix}.shift"),
        shape: vec![channels],
        init: Init::Zero,
    });
}

fn prelu_def(defs: &mut Vec<ParamDef>, prefix: &str, channels: usize) {
    defs.push(ParamDef {
        name: format!("{prefix}.slope"),
        shape: vec![channels],
        init: Init::PRelu,
    });
}

fn linear_def(defs: &mut Vec<ParamDef>, prefix: &str, out: usize, inp: usize) {
    defs.push(ParamDef {
        name: format!("{prefix}.weight"),
        shape: vec![out, inp],
        init: Init::FanIn(inp),
    });
    defs.push(ParamDef {
        name: format!("{prefix}.bias"),
        shape: vec![out],
        init: Init::Zero,
    });
}

fn join_act_def(defs: &mut Vec<ParamDef>, cfg: &ModelConfig, prefix: &str, channels: usize) {
    if cfg.join_activation == JoinActivation::PRelu {
        prelu_def(defs, prefix, channels);
    }
}

fn glo_defs(defs: &mut Vec<ParamDef>, cfg: &ModelConfig, prefix: &str, channels: usize) {
    let mid = cfg.glo_bottleneck(channels);
    linear_def(defs, &format!("{prefix}.glo.fc1"), mid, channels);
    linear_def(defs, &format!("{prefix}.glo.fc2"), channels, mid);
}

fn cg_block_defs(defs: &mut Vec<ParamDef>, cfg: &ModelConfig, prefix: &str, channels: usize) {
    let half = channels / 2;
    conv_def(defs, &format!("{prefix}.proj"), half, channels, 1);
    conv_def(defs, &format!("{prefix}.loc"), half, 1, 3);
    conv_def(defs, &format!("{prefix}.sur"), half, 1, 3);
    bn_def(defs, &format!("{prefix}.join_bn"), channels);
    join_act_def(defs, cfg, &format!("{prefix}.join_act"), channels);
    glo_defs(defs, cfg, prefix, channels);
}

fn down_block_defs(defs: &mut Vec<ParamDef>, cfg: &ModelConfig, prefix: &str, cin: usize, cout: usize) {
    conv_def(defs, &format!("{prefix}.proj"), cout, cin, 3);
    bn_def(defs, &format!("{prefix}.proj_bn"), cout);
    prelu_def(defs, &format!("{prefix}.proj_act"), cout);
    conv_def(defs, &format!("{prefix}.loc"), cout, 1, 3);
    conv_def(defs, &format!("{prefix}.sur"), cout, 1, 3);
    bn_def(defs, &format!("{prefix}.join_bn"), 2 * cout);
    join_act_def(defs, cfg, &format!("{prefix}.join_act"), 2 * cout);
    conv_def(defs, &format!("{prefix}.reduce"), cout, 2 * cout, 1);
    glo_defs(defs, cfg, prefix, cout);
}

fn param_defs(cfg: &ModelConfig) -> Result<Vec<ParamDef>> {
    cfg.validate()?;
    let [c1, c2, c3] = cfg.stage_channels;
    let inj = cfg.input_channels;
    let mut defs = Vec::new();

    conv_def(&mut defs, "stem.0.conv", c1, cfg.input_channels, 3);
    bn_def(&mut defs, "stem.0.bn", c1);
    prelu_def(&mut defs, "stem.0.act", c1);
    for i in 1..3 {
        conv_def(&mut defs, &format!("stem.{i}.conv"), c1, c1, 3);
        bn_def(&mut defs, &format!("stem.{i}.bn"), c1);
        prelu_def(&mut defs, &format!("stem.{i}.act"), c1);
    }

    bn_def(&mut defs, "b1.bn", c1 + inj);
    prelu_def(&mut defs, "b1.act", c1 + inj);

    down_block_defs(&mut defs, cfg, "stage2.down", c1 + inj, c2);
    for i in 1..cfg.stage2_blocks {
        cg_block_defs(&mut defs, cfg, &format!("stage2.block{i}"), c2);
    }
    bn_def(&mut defs, "b2.bn", 2 * c2 + inj);
    prelu_def(&mut defs, "b2.act", 2 * c2 + inj);

    down_block_defs(&mut defs, cfg, "stage3.down", 2 * c2 + inj, c3);
    for i in 1..cfg.stage3_blocks {
        cg_block_defs(&mut defs, cfg, &format!("stage3.block{i}"), c3);
    }
    bn_def(&mut defs, "b3.bn", 2 * c3);
    prelu_def(&mut defs, "b3.act", 2 * c3);

    if cfg.final_upsample_factor == 16 {
        conv_def(&mut defs, "extra_stride.conv", 2 * c3, 2 * c3, 3);
        bn_def(&mut defs, "extra_stride.bn", 2 * c3);
        prelu_def(&mut defs, "extra_stride.act", 2 * c3);
    }
    for j in 0..cfg.extra_conv_bn_relu_layers {
        conv_def(&mut defs, &format!("extra.{j}.conv"), 2 * c3, 2 * c3, 3);
        bn_def(&mut defs, &format!("extra.{j}.bn"), 2 * c3);
    }
    conv_def(&mut defs, "classifier", cfg.class_count, 2 * c3, 1);
    Ok(defs)
}

/// Names and channel counts of all batchnorm layers.
fn bn_layer_defs(cfg: &ModelConfig) -> Result<Vec<(String, usize)>> {
    cfg.validate()?;
    let [c1, c2, c3] = cfg.stage_channels;
    let inj = cfg.input_channels;
    let mut bns = Vec::new();
    for i in 0..3 {
        bns.push((format!("stem.{i}.bn"), c1));
    }
    bns.push(("b1.bn".to_string(), c1 + inj));
    bns.push(("stage2.down.proj_bn".to_string(), c2));
    bns.push(("stage2.down.join_bn".to_string(), 2 * c2));
    for i in 1..cfg.stage2_blocks {
        bns.push((format!("stage2.block{i}.join_bn"), c2));
    }
    bns.push(("b2.bn".to_string(), 2 * c2 + inj));
    bns.push(("stage3.down.proj_bn".to_string(), c3));
    bns.push(("stage3.down.join_bn".to_string(), 2 * c3));
    for i in 1..cfg.stage3_blocks {
        bns.push((format!("stage3.block{i}.join_bn"), c3));
    }
    bns.push(("b3.bn".to_string(), 2 * c3));
    if cfg.final_upsample_factor == 16 {
        bns.push(("extra_stride.bn".to_string(), 2 * c3));
    }
    for j in 0..cfg.extra_conv_bn_relu_layers {
        bns.push((format!("extra.{j}.bn"), 2 * c3));
    }
    Ok(bns)
}

/// Ordered, uniquely named trainable tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    entries: Vec<(String, GridTensor)>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    pub fn insert(&mut self, name: &str, value: GridTensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(invalid(format!("parameter {name} already present")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&GridTensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut GridTensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(invalid(format!("unknown parameter {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &GridTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut GridTensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of stored values across all parameters.
    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Running statistics of every batchnorm layer, keyed by layer name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct BnStates {
    entries: BTreeMap<String, RunningStats>,
}

impl BnStates {
    pub fn insert(&mut self, name: &str, stats: RunningStats) {
        self.entries.insert(name.to_string(), stats);
    }

    pub fn get(&self, name: &str) -> Result<&RunningStats> {
        self.entries
            .get(name)
            .ok_or_else(|| invalid(format!("unknown batchnorm layer {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut RunningStats> {
        match self.entries.get_mut(name) {
            Some(s) => Ok(s),
            None => Err(invalid(format!("unknown batchnorm layer {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.entries.iter().map(|(n, s)| (n.as_str(), s))
    }
}

/// Configuration, parameters and batchnorm state of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub bn: BnStates,
}

/// Deterministic initialization: conv and linear weights are uniform with a
/// fan-in bound, biases and shifts zero, norm scales one, PReLU slopes 0.25.
pub fn init_model(config: &ModelConfig) -> Result<Model> {
    let defs = param_defs(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::default();
    for def in &defs {
        let n: usize = def.shape.iter().product();
        let data = match def.init {
            Init::FanIn(fan_in) => {
                let bound = libm::sqrt(6.0 / fan_in as f64);
                (0..n)
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                    .collect()
            }
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
            Init::PRelu => vec![PRELU_INIT; n],
        };
        params.insert(&def.name, GridTensor::from_parts(def.shape.clone(), data))?;
    }
    let mut bn = BnStates::default();
    for (name, channels) in bn_layer_defs(config)? {
        bn.insert(&name, RunningStats::fresh(channels));
    }
    Ok(Model {
        config: config.clone(),
        params,
        bn,
    })
}

/// Mutable-or-shared access to the batchnorm running state, so one graph
/// builder serves both training and evaluation forwards.
enum BnAccess<'a> {
    Train(&'a mut BnStates),
    Eval(&'a BnStates),
}

struct GraphBuilder<'a, 't> {
    tape: &'t mut Tape,
    params: &'a ModelParams,
    config: &'a ModelConfig,
    bn: BnAccess<'a>,
    nodes: BTreeMap<String, NodeId>,
}

impl<'a, 't> GraphBuilder<'a, 't> {
    /// Registers (once) and returns the tape node of a named parameter.
    fn p(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.nodes.get(name) {
            return Ok(id);
        }
        let id = self.tape.param(name, self.params.get(name)?.clone())?;
        self.nodes.insert(name.to_string(), id);
        Ok(id)
    }

    fn conv(&mut self, prefix: &str, x: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.tape.conv2d(x, w, Some(b), spec)
    }

    fn bn(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let scale = self.p(&format!("{prefix}.scale"))?;
        let shift = self.p(&format!("{prefix}.shift"))?;
        let stats = match &mut self.bn {
            BnAccess::Train(states) => BnForward::Train {
                running: states.get_mut(prefix)?,
                momentum: BN_MOMENTUM,
            },
            BnAccess::Eval(states) => BnForward::Eval {
                running: states.get(prefix)?,
            },
        };
        self.tape.batchnorm2d(x, scale, shift, stats, BN_EPSILON)
    }

    fn prelu(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let slope = self.p(&format!("{prefix}.slope"))?;
        self.tape.prelu(x, slope)
    }

    fn join_act(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        match self.config.join_activation {
            JoinActivation::PRelu => self.prelu(prefix, x),
            JoinActivation::Relu => self.tape.relu(x),
        }
    }

    fn conv_bn_prelu(&mut self, prefix: &str, x: NodeId, stride: usize) -> Result<NodeId> {
        let spec = ConvSpec {
            stride,
            dilation: 1,
            groups: 1,
            padding: 1,
        };
        let y = self.conv(&format!("{prefix}.conv"), x, spec)?;
        let y = self.bn(&format!("{prefix}.bn"), y)?;
        self.prelu(&format!("{prefix}.act"), y)
    }

    fn bn_prelu(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let y = self.bn(&format!("{prefix}.bn"), x)?;
        self.prelu(&format!("{prefix}.act"), y)
    }

    /// Sigmoid-bounded bottleneck gate over globally pooled channels.
    fn glo_gate(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let (n, c, _, _) = self.tape.value(x).dims4("glo gate input")?;
        let pooled = self.tape.global_avg_pool(x)?;
        let flat = self.tape.reshape(pooled, &[n, c])?;
        let w1 = self.p(&format!("{prefix}.glo.fc1.weight"))?;
        let b1 = self.p(&format!("{prefix}.glo.fc1.bias"))?;
        let h = self.tape.linear(flat, w1, Some(b1))?;
        let h = self.tape.relu(h)?;
        let w2 = self.p(&format!("{prefix}.glo.fc2.weight"))?;
        let b2 = self.p(&format!("{prefix}.glo.fc2.bias"))?;
        let g = self.tape.linear(h, w2, Some(b2))?;
        let g = self.tape.sigmoid(g)?;
        let g = self.tape.reshape(g, &[n, c, 1, 1])?;
        self.tape.mul_gate(x, g)
    }

    /// Context-guided block: 1x1 projection to half width, channel-wise local
    /// and dilated surrounding convolutions, concatenation, BN + activation,
    /// and the global gate. Spatial size is preserved.
    fn cg_block(&mut self, prefix: &str, x: NodeId, dilation: usize) -> Result<NodeId> {
        if dilation < 1 {
            return Err(invalid("cg block: dilation must be >= 1"));
        }
        let (_, c, _, _) = self.tape.value(x).dims4("cg block input")?;
        let half = c / 2;
        let proj = self.conv(&format!("{prefix}.proj"), x, ConvSpec::plain())?;
        let loc = self.conv(
            &format!("{prefix}.loc"),
            proj,
            ConvSpec {
                stride: 1,
                dilation: 1,
                groups: half,
                padding: 1,
            },
        )?;
        let sur = self.conv(
            &format!("{prefix}.sur"),
            proj,
            ConvSpec {
                stride: 1,
                dilation,
                groups: half,
                padding: dilation,
            },
        )?;
        let cat = self.tape.concat_channels(loc, sur)?;
        let joined = self.bn(&format!("{prefix}.join_bn"), cat)?;
        let joined = self.join_act(&format!("{prefix}.join_act"), joined)?;
        self.glo_gate(prefix, joined)
    }

    /// Stage-entry block: stride-2 3x3 projection, channel-wise local and
    /// surrounding convolutions at full width, BN + activation on the
    /// concatenation, 1x1 reduction, and the global gate. Halves H and W.
    fn down_block(&mut self, prefix: &str, x: NodeId, cout: usize, dilation: usize) -> Result<NodeId> {
        let proj = self.conv(
            &format!("{prefix}.proj"),
            x,
            ConvSpec {
                stride: 2,
                dilation: 1,
                groups: 1,
                padding: 1,
            },
        )?;
        let proj = self.bn(&format!("{prefix}.proj_bn"), proj)?;
        let proj = self.prelu(&format!("{prefix}.proj_act"), proj)?;
        let loc = self.conv(
            &format!("{prefix}.loc"),
            proj,
            ConvSpec {
                stride: 1,
                dilation: 1,
                groups: cout,
                padding: 1,
            },
        )?;
        let sur = self.conv(
            &format!("{prefix}.sur"),
            proj,
            ConvSpec {
                stride: 1,
                dilation,
                groups: cout,
                padding: dilation,
            },
        )?;
        let cat = self.tape.concat_channels(loc, sur)?;
        let joined = self.bn(&format!("{prefix}.join_bn"), cat)?;
        let joined = self.join_act(&format!("{prefix}.join_act"), joined)?;
        let reduced = self.conv(&format!("{prefix}.reduce"), joined, ConvSpec::plain())?;
        self.glo_gate(prefix, reduced)
    }

    fn build(&mut self, input: NodeId) -> Result<NodeId> {
        let cfg = self.config;
        let (_, c, h, w) = self.tape.value(input).dims4("model input")?;
        if c != cfg.input_channels {
            return Err(invalid(format!(
                "model input has {c} channels, config expects {}",
                cfg.input_channels
            )));
        }
        let f = cfg.final_upsample_factor;
        if h % f != 0 || w % f != 0 {
            return Err(invalid(format!(
                "input grid {h}x{w} must be divisible by the total downsampling factor {f}"
            )));
        }

        // Stem at half resolution plus the injected raw input.
        let mut x = input;
        for i in 0..3 {
            let stride = if i == 0 { 2 } else { 1 };
            x = self.conv_bn_prelu(&format!("stem.{i}"), x, stride)?;
        }
        let inj1 = self.tape.avg_pool_half(input)?;
        let inj2 = self.tape.avg_pool_half(inj1)?;
        let cat1 = self.tape.concat_channels(x, inj1)?;
        let x = self.bn_prelu("b1", cat1)?;

        // Stage 2 at quarter resolution.
        let down2 = self.down_block("stage2.down", x, cfg.stage_channels[1], cfg.dilations[0])?;
        let mut x = down2;
        for i in 1..cfg.stage2_blocks {
            x = self.cg_block(&format!("stage2.block{i}"), x, cfg.dilations[0])?;
        }
        let cat2 = self.tape.concat_channels(x, down2)?;
        let cat2 = self.tape.concat_channels(cat2, inj2)?;
        let x = self.bn_prelu("b2", cat2)?;

        // Stage 3 at eighth resolution.
        let down3 = self.down_block("stage3.down", x, cfg.stage_channels[2], cfg.dilations[1])?;
        let mut x = down3;
        for i in 1..cfg.stage3_blocks {
            x = self.cg_block(&format!("stage3.block{i}"), x, cfg.dilations[1])?;
        }
        let cat3 = self.tape.concat_channels(down3, x)?;
        let mut x = self.bn_prelu("b3", cat3)?;

        if f == 16 {
            x = self.conv_bn_prelu("extra_stride", x, 2)?;
        }
        for j in 0..cfg.extra_conv_bn_relu_layers {
            let spec = ConvSpec {
                stride: 1,
                dilation: 1,
                groups: 1,
                padding: 1,
            };
            let y = self.conv(&format!("extra.{j}.conv"), x, spec)?;
            let y = self.bn(&format!("extra.{j}.bn"), y)?;
            x = self.tape.relu(y)?;
        }

        let logits = self.conv("classifier", x, ConvSpec::plain())?;
        let up = self.tape.upsample_bilinear(logits, f)?;
        self.tape.softmax_channels(up)
    }
}

impl Model {
    /// Builds the forward graph in training mode (batch statistics; running
    /// stats are updated) and returns the probability node.
    pub fn forward_graph_train(&mut self, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
        let mut b = GraphBuilder {
            tape,
            params: &self.params,
            config: &self.config,
            bn: BnAccess::Train(&mut self.bn),
            nodes: BTreeMap::new(),
        };
        b.build(input)
    }

    /// Builds the forward graph in evaluation mode (running statistics).
    pub fn forward_graph_eval(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
        let mut b = GraphBuilder {
            tape,
            params: &self.params,
            config: &self.config,
            bn: BnAccess::Eval(&self.bn),
            nodes: BTreeMap::new(),
        };
        b.build(input)
    }

    /// Probabilities for one N×C×H×W batch.
    pub fn forward_batch(&mut self, batch: &GridTensor, mode: Mode) -> Result<GridTensor> {
        let mut tape = Tape::new();
        let input = tape.constant(batch.clone())?;
        let probs = match mode {
            Mode::Train => self.forward_graph_train(&mut tape, input)?,
            Mode::Eval => self.forward_graph_eval(&mut tape, input)?,
        };
        Ok(tape.value(probs).clone())
    }

    /// Per-pixel class probabilities (class_count×H×W) for one sample's
    /// channel stack (C×H×W), using running statistics.
    pub fn forward_sample(&self, sample_channels: &GridTensor) -> Result<GridTensor> {
        let (c, h, w) = sample_channels.dims3("forward input")?;
        let batch = sample_channels.reshaped(vec![1, c, h, w])?;
        let mut tape = Tape::new();
        let input = tape.constant(batch)?;
        let probs = self.forward_graph_eval(&mut tape, input)?;
        let out = tape.value(probs);
        out.reshaped(vec![self.config.class_count, h, w])
    }

    pub fn param_count(&self) -> usize {
        self.params.value_count()
    }
}

/// Per-pixel argmax with ties broken toward the lowest class index.
pub fn predict_labels(probs: &GridTensor) -> Result<LabelGrid> {
    let (c, h, w) = probs.dims3("predict_labels")?;
    if c == 0 || c > u8::MAX as usize {
        return Err(invalid(format!("predict_labels: got {c} classes")));
    }
    let mut data = Vec::with_capacity(h * w);
    for hi in 0..h {
        for wi in 0..w {
            let mut best = 0usize;
            let mut best_v = probs.data()[hi * w + wi];
            for ci in 1..c {
                let v = probs.data()[(ci * h + hi) * w + wi];
                if v > best_v {
                    best = ci;
                    best_v = v;
                }
            }
            data.push(best as u8);
        }
    }
    LabelGrid::new(h, w, data)
}

/// Raw tensors of one standalone context-guided block.
#[derive(Clone, Debug, PartialEq)]
pub struct CgBlockParams {
    pub proj_weight: GridTensor,
    pub proj_bias: GridTensor,
    pub loc_weight: GridTensor,
    pub loc_bias: GridTensor,
    pub sur_weight: GridTensor,
    pub sur_bias: GridTensor,
    pub join_scale: GridTensor,
    pub join_shift: GridTensor,
    /// None switches the joint activation to plain ReLU.
    pub join_slope: Option<GridTensor>,
    pub glo_fc1_weight: GridTensor,
    pub glo_fc1_bias: GridTensor,
    pub glo_fc2_weight: GridTensor,
    pub glo_fc2_bias: GridTensor,
}

/// One context-guided block applied to an N×C×H×W input:
/// `out = glo_gate (*) f_join(concat(f_loc(x'), f_sur(x')))` with `x'` the
/// 1x1-projected input. `running` provides (and in train mode receives) the
/// batchnorm statistics of the join.
pub fn cg_block_forward(
    x: &GridTensor,
    params: &CgBlockParams,
    dilation: usize,
    running: &mut RunningStats,
    mode: Mode,
) -> Result<GridTensor> {
    if dilation < 1 {
        return Err(invalid("cg_block_forward: dilation must be >= 1"));
    }
    let half = match params.proj_weight.shape() {
        &[half, _, 1, 1] => half,
        other => {
            return Err(invalid(format!(
                "cg_block_forward: projection kernel must be half×C×1×1, got {other:?}"
            )))
        }
    };
    let mut tape = Tape::new();
    let input = tape.constant(x.clone())?;
    let proj_w = tape.constant(params.proj_weight.clone())?;
    let proj_b = tape.constant(params.proj_bias.clone())?;
    let proj = tape.conv2d(input, proj_w, Some(proj_b), ConvSpec::plain())?;
    let loc_w = tape.constant(params.loc_weight.clone())?;
    let loc_b = tape.constant(params.loc_bias.clone())?;
    let loc = tape.conv2d(
        proj,
        loc_w,
        Some(loc_b),
        ConvSpec {
            stride: 1,
            dilation: 1,
            groups: half,
            padding: 1,
        },
    )?;
    let sur_w = tape.constant(params.sur_weight.clone())?;
    let sur_b = tape.constant(params.sur_bias.clone())?;
    let sur = tape.conv2d(
        proj,
        sur_w,
        Some(sur_b),
        ConvSpec {
            stride: 1,
            dilation,
            groups: half,
            padding: dilation,
        },
    )?;
    let cat = tape.concat_channels(loc, sur)?;
    let scale = tape.constant(params.join_scale.clone())?;
    let shift = tape.constant(params.join_shift.clone())?;
    let stats = match mode {
        Mode::Train => BnForward::Train {
            running,
            momentum: BN_MOMENTUM,
        },
        Mode::Eval => BnForward::Eval { running },
    };
    let joined = tape.batchnorm2d(cat, scale, shift, stats, BN_EPSILON)?;
    let joined = match &params.join_slope {
        Some(slope) => {
            let s = tape.constant(slope.clone())?;
            tape.prelu(joined, s)?
        }
        None => tape.relu(joined)?,
    };
    let (n, c, _, _) = tape.value(joined).dims4("cg_block_forward")?;
    let pooled = tape.global_avg_pool(joined)?;
    let flat = tape.reshape(pooled, &[n, c])?;
    let w1 = tape.constant(params.glo_fc1_weight.clone())?;
    let b1 = tape.constant(params.glo_fc1_bias.clone())?;
    let hidden = tape.linear(flat, w1, Some(b1))?;
    let hidden = tape.relu(hidden)?;
    let w2 = tape.constant(params.glo_fc2_weight.clone())?;
    let b2 = tape.constant(params.glo_fc2_bias.clone())?;
    let gate = tape.linear(hidden, w2, Some(b2))?;
    let gate = tape.sigmoid(gate)?;
    let gate = tape.reshape(gate, &[n, c, 1, 1])?;
    let out = tape.mul_gate(joined, gate)?;
    Ok(tape.value(out).clone())
}

impl Model {
    /// Extracts the tensors of one named block, for composing it by hand.
    pub fn cg_block_params(&self, prefix: &str) -> Result<CgBlockParams> {
        let get = |suffix: &str| -> Result<GridTensor> {
            Ok(self.params.get(&format!("{prefix}.{suffix}"))?.clone())
        };
        let join_slope = match self.config.join_activation {
            JoinActivation::PRelu => Some(get("join_act.slope")?),
            JoinActivation::Relu => None,
        };
        Ok(CgBlockParams {
            proj_weight: get("proj.weight")?,
            proj_bias: get("proj.bias")?,
            loc_weight: get("loc.weight")?,
            loc_bias: get("loc.bias")?,
            sur_weight: get("sur.weight")?,
            sur_bias: get("sur.bias")?,
            join_scale: get("join_bn.scale")?,
            join_shift: get("join_bn.shift")?,
            join_slope,
            glo_fc1_weight: get("glo.fc1.weight")?,
            glo_fc1_bias: get("glo.fc1.bias")?,
            glo_fc2_weight: get("glo.fc2.weight")?,
            glo_fc2_bias: get("glo.fc2.bias")?,
        })
    }
}
