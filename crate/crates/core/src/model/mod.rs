//! Network definitions: the slimmable encoder ensemble, the server-side
//! reconstructor and decode head, the frozen teacher, and the task head.
//!
//! Architectures are data (lists of [`BlockSpec`]) so the stage tables can
//! be validated and parameter-counted independently of any weights.

mod checkpoint;
mod teacher;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use teacher::Teacher;

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::tape::{LayerIds, NodeId, ParamId, Tape};
use crate::tensor::{LayerParams, Tensor, TensorError};

/// Epsilon inside every instance-norm denominator.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Channel width of each distillation feature map (teacher and student).
pub const FEATURE_CHANNELS: usize = 32;

/// Number of classes in the procedural dataset / task head.
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("stage {stage}: {detail}")]
    BadSpec { stage: usize, detail: String },
    #[error("stage {stage}: skip connection requires stride 1 and matching channels ({detail})")]
    InvalidSkip { stage: usize, detail: String },
    #[error("ensemble size {s} out of range 1..={n}")]
    SizeOutOfRange { s: usize, n: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint was written for a different architecture (digest {actual:#018x}, expected {expected:#018x})")]
    DigestMismatch { expected: u64, actual: u64 },
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint contains unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter {name}: shape {actual:?} does not match model shape {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    Conv2d,
    FusedMbConv,
    FusedMbConvT,
}

/// One architecture-table row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub operator: Operator,
    pub channels: usize,
    pub stride: usize,
    pub kernel: usize,
    pub skip: bool,
    pub expansion: usize,
}

impl BlockSpec {
    fn validate(&self, stage: usize, in_channels: usize) -> Result<(), ModelError> {
        if self.channels == 0 || self.stride == 0 || self.kernel == 0 || self.expansion == 0 {
            return Err(ModelError::BadSpec {
                stage,
                detail: format!("{self:?} has a zero field"),
            });
        }
        if self.skip && (self.stride != 1 || self.channels != in_channels) {
            return Err(ModelError::InvalidSkip {
                stage,
                detail: format!(
                    "stride {}, {} -> {} channels",
                    self.stride, in_channels, self.channels
                ),
            });
        }
        Ok(())
    }
}

fn fused(channels: usize, stride: usize, kernel: usize, skip: bool, expansion: usize) -> BlockSpec {
    BlockSpec { operator: Operator::FusedMbConv, channels, stride, kernel, skip, expansion }
}

/// Encoder stage table: stride-2 stem, two narrow SR1 blocks, a stride-2
/// SR6 block, and two SR6 blocks at the bottleneck width. Total stride 4,
/// 6 output channels. Skip connections appear only where a residual is
/// well-formed (stride 1, equal channel count).
pub fn encoder_spec() -> Vec<BlockSpec> {
    vec![
        BlockSpec {
            operator: Operator::Conv2d,
            channels: 6,
            stride: 2,
            kernel: 3,
            skip: false,
            expansion: 1,
        },
        fused(4, 1, 3, false, 1),
        fused(4, 1, 3, true, 1),
        fused(6, 2, 3, false, 6),
        fused(6, 1, 3, true, 6),
        fused(6, 1, 3, false, 6),
    ]
}

/// Reconstructor stage table: widen 6 -> 48 with a 1x1 block, refine, one
/// stride-2 transpose block doubling the spatial size, refine, project to
/// 24 channels.
pub fn reconstructor_spec() -> Vec<BlockSpec> {
    vec![
        fused(48, 1, 1, false, 6),
        fused(48, 1, 3, true, 6),
        BlockSpec {
            operator: Operator::FusedMbConvT,
            channels: 48,
            stride: 2,
            kernel: 3,
            skip: false,
            expansion: 6,
        },
        fused(48, 1, 3, true, 6),
        fused(24, 1, 3, false, 6),
    ]
}

/// Stable 64-bit FNV-1a, used for per-parameter init streams and the
/// architecture digest.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// One convolution (or transpose convolution) with its parameter identities.
#[derive(Debug, Clone)]
pub struct ConvUnit<T> {
    pub params: Arc<LayerParams<T>>,
    pub ids: LayerIds,
    pub transpose: bool,
}

impl<T: Scalar> ConvUnit<T> {
    /// Seeded Kaiming-uniform weights, zero bias. The init stream depends
    /// only on (seed, name), so rebuilds are order-independent.
    #[allow(clippy::too_many_arguments)]
    fn build(
        name: &str,
        seed: u64,
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        transpose: bool,
        trainable: bool,
    ) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(name.as_bytes()) ^ seed);
        let bound = (6.0 / (in_ch * kernel * kernel) as f64).sqrt();
        let wshape = if transpose {
            vec![in_ch, out_ch, kernel, kernel]
        } else {
            vec![out_ch, in_ch, kernel, kernel]
        };
        let weights = Tensor::new(
            wshape.clone(),
            (0..wshape.iter().product())
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect(),
        )?;
        let bias = Tensor::zeros(&[out_ch]);
        let mut params = LayerParams::new(weights, Some(bias), stride, padding)?;
        if transpose {
            params = params.with_output_padding(stride - 1)?;
        }
        let ids = if trainable {
            LayerIds { weight: Some(ParamId::fresh()), bias: Some(ParamId::fresh()) }
        } else {
            LayerIds::default()
        };
        Ok(ConvUnit { params: Arc::new(params), ids, transpose })
    }

    fn apply(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId, TensorError> {
        if self.transpose {
            tape.transpose_conv(x, self.params.clone(), self.ids)
        } else {
            tape.conv(x, self.params.clone(), self.ids)
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.weights.numel() + self.params.bias.as_ref().map_or(0, Tensor::numel)
    }

    fn visit(&self, name: &str, f: &mut impl FnMut(&str, Option<ParamId>, &Tensor<T>)) {
        f(&format!("{name}.weight"), self.ids.weight, &self.params.weights);
        if let Some(b) = &self.params.bias {
            f(&format!("{name}.bias"), self.ids.bias, b);
        }
    }

    fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(&str, Option<ParamId>, &mut Tensor<T>)) {
        let params = Arc::make_mut(&mut self.params);
        f(&format!("{name}.weight"), self.ids.weight, &mut params.weights);
        if let Some(b) = params.bias.as_mut() {
            f(&format!("{name}.bias"), self.ids.bias, b);
        }
    }

    fn cast<U: Scalar>(&self) -> ConvUnit<U> {
        let params = LayerParams {
            weights: self.params.weights.cast(),
            bias: self.params.bias.as_ref().map(Tensor::cast),
            stride: self.params.stride,
            kernel: self.params.kernel,
            padding: self.params.padding,
            output_padding: self.params.output_padding,
        };
        ConvUnit { params: Arc::new(params), ids: self.ids, transpose: self.transpose }
    }
}

/// A built stage: either a bare convolution or a fused block
/// (expand conv -> SiLU -> 1x1 project -> instance norm [-> +residual]).
#[derive(Debug, Clone)]
pub enum Stage<T> {
    Conv(ConvUnit<T>),
    Fused { spec: BlockSpec, expand: ConvUnit<T>, project: ConvUnit<T> },
}

/// A sequential network built from a stage table.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stages: Vec<Stage<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn build(
        name: &str,
        spec: &[BlockSpec],
        in_channels: usize,
        seed: u64,
        trainable: bool,
    ) -> Result<Self, ModelError> {
        let mut stages = Vec::with_capacity(spec.len());
        let mut channels = in_channels;
        for (stage, block) in spec.iter().enumerate() {
            block.validate(stage, channels)?;
            let pad = block.kernel / 2;
            match block.operator {
                Operator::Conv2d => {
                    let unit = ConvUnit::build(
                        &format!("{name}.{stage}.conv"),
                        seed,
                        block.channels,
                        channels,
                        block.kernel,
                        block.stride,
                        pad,
                        false,
                        trainable,
                    )?;
                    stages.push(Stage::Conv(unit));
                }
                Operator::FusedMbConv | Operator::FusedMbConvT => {
                    let hidden = block.expansion * block.channels;
                    let transpose = block.operator == Operator::FusedMbConvT;
                    let expand = ConvUnit::build(
                        &format!("{name}.{stage}.expand"),
                        seed,
                        hidden,
                        channels,
                        block.kernel,
                        block.stride,
                        pad,
                        transpose,
                        trainable,
                    )?;
                    let project = ConvUnit::build(
                        &format!("{name}.{stage}.project"),
                        seed,
                        block.channels,
                        hidden,
                        1,
                        1,
                        0,
                        false,
                        trainable,
                    )?;
                    stages.push(Stage::Fused { spec: block.clone(), expand, project });
                }
            }
            channels = block.channels;
        }
        Ok(Network {
            name: name.to_string(),
            in_channels,
            out_channels: channels,
            stages,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId, TensorError> {
        let mut cur = x;
        for stage in &self.stages {
            cur = match stage {
                Stage::Conv(unit) => {
                    let c = unit.apply(tape, cur)?;
                    let a = tape.silu(c)?;
                    tape.instance_norm(a, INSTANCE_NORM_EPS)?
                }
                Stage::Fused { spec, expand, project } => {
                    let e = expand.apply(tape, cur)?;
                    let a = tape.silu(e)?;
                    let p = project.apply(tape, a)?;
                    let n = tape.instance_norm(p, INSTANCE_NORM_EPS)?;
                    if spec.skip {
                        tape.add(n, cur)?
                    } else {
                        n
                    }
                }
            };
        }
        Ok(cur)
    }

    pub fn param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| match s {
                Stage::Conv(u) => u.param_count(),
                Stage::Fused { expand, project, .. } => {
                    expand.param_count() + project.param_count()
                }
            })
            .sum()
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, Option<ParamId>, &Tensor<T>)) {
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                Stage::Conv(u) => u.visit(&format!("{}.{i}.conv", self.name), f),
                Stage::Fused { expand, project, .. } => {
                    expand.visit(&format!("{}.{i}.expand", self.name), f);
                    project.visit(&format!("{}.{i}.project", self.name), f);
                }
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, Option<ParamId>, &mut Tensor<T>)) {
        let name = self.name.clone();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            match stage {
                Stage::Conv(u) => u.visit_mut(&format!("{name}.{i}.conv"), f),
                Stage::Fused { expand, project, .. } => {
                    expand.visit_mut(&format!("{name}.{i}.expand"), f);
                    project.visit_mut(&format!("{name}.{i}.project"), f);
                }
            }
        }
    }

    fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            name: self.name.clone(),
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            stages: self
                .stages
                .iter()
                .map(|s| match s {
                    Stage::Conv(u) => Stage::Conv(u.cast()),
                    Stage::Fused { spec, expand, project } => Stage::Fused {
                        spec: spec.clone(),
                        expand: expand.cast(),
                        project: project.cast(),
                    },
                })
                .collect(),
        }
    }
}

/// Build a single encoder member from a stage table (3 input channels).
pub fn build_encoder<T: Scalar>(spec: &[BlockSpec], seed: u64) -> Result<Network<T>, ModelError> {
    Network::build("encoder", spec, 3, seed, true)
}

/// Build the reconstructor from a stage table (encoder-width input).
pub fn build_reconstructor<T: Scalar>(
    spec: &[BlockSpec],
    seed: u64,
) -> Result<Network<T>, ModelError> {
    Network::build("reconstructor", spec, 6, seed, true)
}

/// Per-member weights of the ensemble sum: [1, 1/2, 1/4, ...].
pub fn ensemble_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5f64.powi(i as i32)).collect()
}

/// N architecturally identical encoders with independent parameters.
#[derive(Debug, Clone)]
pub struct EnsembleEncoder<T> {
    pub members: Vec<Network<T>>,
}

impl<T: Scalar> EnsembleEncoder<T> {
    pub fn build(spec: &[BlockSpec], n: usize, seed: u64) -> Result<Self, ModelError> {
        let members = (0..n)
            .map(|i| Network::build(&format!("encoder.{i}"), spec, 3, seed, true))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EnsembleEncoder { members })
    }

    pub fn n(&self) -> usize {
        self.members.len()
    }

    /// Weighted sum of the first `s` member outputs. Only those `s`
    /// members are evaluated, so compute scales linearly in `s`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        s: usize,
    ) -> Result<NodeId, ModelError> {
        if s == 0 || s > self.members.len() {
            return Err(ModelError::SizeOutOfRange { s, n: self.members.len() });
        }
        let outs = self.members[..s]
            .iter()
            .map(|m| m.forward(tape, x))
            .collect::<Result<Vec<_>, _>>()?;
        ensemble_combine(tape, &outs, s)
    }
}

/// The running sum of Eq-style halving weights over member outputs:
/// out = sum_{i<s} 2^{-i} * member_i.
pub fn ensemble_combine<T: Scalar>(
    tape: &mut Tape<T>,
    member_outputs: &[NodeId],
    s: usize,
) -> Result<NodeId, ModelError> {
    if s == 0 || s > member_outputs.len() {
        return Err(ModelError::SizeOutOfRange { s, n: member_outputs.len() });
    }
    let mut acc = member_outputs[0];
    for (i, &m) in member_outputs.iter().enumerate().take(s).skip(1) {
        acc = tape.add_scaled(acc, m, T::from_f64(0.5f64.powi(i as i32)))?;
    }
    Ok(acc)
}

/// Convenience single-shot ensemble evaluation on a fresh tape.
pub fn ensemble_forward<T: Scalar>(
    enc: &EnsembleEncoder<T>,
    x: &Tensor<T>,
    s: usize,
) -> Result<Tensor<T>, ModelError> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = enc.forward(&mut tape, leaf, s)?;
    Ok(tape.value(out)?.clone())
}

/// Student-side feature pyramid: one stride-2 stem from the reconstructor
/// width, then three stride-2 convolutions whose raw outputs match the
/// teacher's three distillation maps.
#[derive(Debug, Clone)]
pub struct DecodeHead<T> {
    pub stem: ConvUnit<T>,
    pub taps: [ConvUnit<T>; 3],
}

impl<T: Scalar> DecodeHead<T> {
    pub fn build(in_channels: usize, seed: u64) -> Result<Self, ModelError> {
        let stem = ConvUnit::build(
            "head.stem",
            seed,
            FEATURE_CHANNELS,
            in_channels,
            3,
            2,
            1,
            false,
            true,
        )?;
        let tap = |i: usize| {
            ConvUnit::build(
                &format!("head.tap{i}"),
                seed,
                FEATURE_CHANNELS,
                FEATURE_CHANNELS,
                3,
                2,
                1,
                false,
                true,
            )
        };
        Ok(DecodeHead { stem, taps: [tap(0)?, tap(1)?, tap(2)?] })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: NodeId) -> Result<[NodeId; 3], TensorError> {
        let s = self.stem.apply(tape, x)?;
        let mut cur = tape.silu(s)?;
        let mut maps = [cur; 3];
        for (i, tapc) in self.taps.iter().enumerate() {
            let raw = tapc.apply(tape, cur)?;
            maps[i] = raw;
            if i + 1 < self.taps.len() {
                cur = tape.silu(raw)?;
            }
        }
        Ok(maps)
    }

    fn visit(&self, f: &mut impl FnMut(&str, Option<ParamId>, &Tensor<T>)) {
        self.stem.visit("head.stem", f);
        for (i, t) in self.taps.iter().enumerate() {
            t.visit(&format!("head.tap{i}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&str, Option<ParamId>, &mut Tensor<T>)) {
        self.stem.visit_mut("head.stem", f);
        for (i, t) in self.taps.iter_mut().enumerate() {
            t.visit_mut(&format!("head.tap{i}"), f);
        }
    }

    fn cast<U: Scalar>(&self) -> DecodeHead<U> {
        DecodeHead {
            stem: self.stem.cast(),
            taps: [self.taps[0].cast(), self.taps[1].cast(), self.taps[2].cast()],
        }
    }
}

/// Classifier over pooled distillation features; its logits are the task
/// result carried back to the edge.
#[derive(Debug, Clone)]
pub struct TaskHead<T> {
    pub weight: Arc<Tensor<T>>,
    pub bias: Arc<Tensor<T>>,
    pub ids: LayerIds,
}

impl<T: Scalar> TaskHead<T> {
    pub fn build(seed: u64) -> Result<Self, ModelError> {
        let name = "task_head.linear";
        let in_features = 3 * FEATURE_CHANNELS;
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(name.as_bytes()) ^ seed);
        let bound = (6.0 / in_features as f64).sqrt();
        let weight = Tensor::new(
            vec![NUM_CLASSES, in_features],
            (0..NUM_CLASSES * in_features)
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect(),
        )?;
        Ok(TaskHead {
            weight: Arc::new(weight),
            bias: Arc::new(Tensor::zeros(&[NUM_CLASSES])),
            ids: LayerIds { weight: Some(ParamId::fresh()), bias: Some(ParamId::fresh()) },
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, maps: &[NodeId; 3]) -> Result<NodeId, TensorError> {
        let pooled = maps
            .iter()
            .map(|&m| tape.global_avg_pool(m))
            .collect::<Result<Vec<_>, _>>()?;
        let feat = tape.concat(&pooled)?;
        tape.linear(feat, self.weight.clone(), self.bias.clone(), self.ids)
    }

    fn visit(&self, f: &mut impl FnMut(&str, Option<ParamId>, &Tensor<T>)) {
        f("task_head.linear.weight", self.ids.weight, &self.weight);
        f("task_head.linear.bias", self.ids.bias, &self.bias);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&str, Option<ParamId>, &mut Tensor<T>)) {
        f("task_head.linear.weight", self.ids.weight, Arc::make_mut(&mut self.weight));
        f("task_head.linear.bias", self.ids.bias, Arc::make_mut(&mut self.bias));
    }

    fn cast<U: Scalar>(&self) -> TaskHead<U> {
        TaskHead {
            weight: Arc::new(self.weight.cast()),
            bias: Arc::new(self.bias.cast()),
            ids: self.ids,
        }
    }
}

/// The full trainable system plus its frozen teacher.
#[derive(Debug, Clone)]
pub struct SlimModel<T> {
    pub n: usize,
    pub seed: u64,
    pub encoder: EnsembleEncoder<T>,
    pub reconstructor: Network<T>,
    pub decode_head: DecodeHead<T>,
    pub task_head: TaskHead<T>,
    pub teacher: Teacher<T>,
}

impl<T: Scalar> SlimModel<T> {
    pub fn new(n: usize, seed: u64) -> Result<Self, ModelError> {
        let encoder = EnsembleEncoder::build(&encoder_spec(), n, seed)?;
        let reconstructor =
            Network::build("reconstructor", &reconstructor_spec(), 6, seed, true)?;
        let decode_head = DecodeHead::build(reconstructor.out_channels, seed)?;
        let task_head = TaskHead::build(seed)?;
        let teacher = Teacher::build(seed)?;
        Ok(SlimModel { n, seed, encoder, reconstructor, decode_head, task_head, teacher })
    }

    /// Encode an input at ensemble size `s` (bottleneck tensor node).
    pub fn encode(&self, tape: &mut Tape<T>, x: NodeId, s: usize) -> Result<NodeId, ModelError> {
        self.encoder.forward(tape, x, s)
    }

    /// Reconstruct and decode a bottleneck tensor into the three
    /// distillation feature maps.
    pub fn student_decode(
        &self,
        tape: &mut Tape<T>,
        z: NodeId,
    ) -> Result<[NodeId; 3], ModelError> {
        let r = self.reconstructor.forward(tape, z)?;
        Ok(self.decode_head.forward(tape, r)?)
    }

    /// Single-shot decode + task head on a fresh tape: returns the three
    /// feature maps and the class logits.
    pub fn decode_tensor(&self, z: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>), ModelError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(z.clone());
        let maps = self.student_decode(&mut tape, leaf)?;
        let logits = self.task_head.forward(&mut tape, &maps)?;
        let map_values = maps
            .iter()
            .map(|&m| Ok(tape.value(m)?.clone()))
            .collect::<Result<Vec<_>, TensorError>>()?;
        Ok((map_values, tape.value(logits)?.clone()))
    }

    /// Visit every parameter, frozen teacher included, in a stable order.
    pub fn visit(&self, mut f: impl FnMut(&str, Option<ParamId>, &Tensor<T>)) {
        for member in &self.encoder.members {
            member.visit(&mut f);
        }
        self.reconstructor.visit(&mut f);
        self.decode_head.visit(&mut f);
        self.task_head.visit(&mut f);
        self.teacher.visit(&mut f);
    }

    /// Visit every parameter mutably (teacher included; callers that only
    /// train filter on `Some` parameter ids).
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, Option<ParamId>, &mut Tensor<T>)) {
        for member in &mut self.encoder.members {
            member.visit_mut(&mut f);
        }
        self.reconstructor.visit_mut(&mut f);
        self.decode_head.visit_mut(&mut f);
        self.task_head.visit_mut(&mut f);
        self.teacher.visit_mut(&mut f);
    }

    /// Ids of all trainable parameters in visit order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        self.visit(|_, id, _| {
            if let Some(id) = id {
                ids.push(id);
            }
        });
        ids
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit(|_, _, t| count += t.numel());
        count
    }

    /// Architecture fingerprint: stable across runs, sensitive to any
    /// stage-table or width change.
    pub fn digest(&self) -> u64 {
        let mut desc = format!("n={};enc=[", self.n);
        for b in encoder_spec() {
            desc.push_str(&format!(
                "{:?}/{}/{}/{}/{}/{};",
                b.operator, b.channels, b.stride, b.kernel, b.skip, b.expansion
            ));
        }
        desc.push_str("];rec=[");
        for b in reconstructor_spec() {
            desc.push_str(&format!(
                "{:?}/{}/{}/{}/{}/{};",
                b.operator, b.channels, b.stride, b.kernel, b.skip, b.expansion
            ));
        }
        desc.push_str(&format!(
            "];feat={FEATURE_CHANNELS};classes={NUM_CLASSES};teacher={}",
            Teacher::<T>::ARCH_TAG
        ));
        fnv1a64(desc.as_bytes())
    }

    /// Convert every parameter to another precision (e.g. f64 -> f32 for
    /// inference).
    pub fn cast<U: Scalar>(&self) -> SlimModel<U> {
        SlimModel {
            n: self.n,
            seed: self.seed,
            encoder: EnsembleEncoder {
                members: self.encoder.members.iter().map(Network::cast).collect(),
            },
            reconstructor: self.reconstructor.cast(),
            decode_head: self.decode_head.cast(),
            task_head: self.task_head.cast(),
            teacher: self.teacher.cast(),
        }
    }
}
