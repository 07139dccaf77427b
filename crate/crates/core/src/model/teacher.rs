//! Frozen feature extractor that supplies distillation targets.
//!
//! A seeded patch projection produces the first pyramid level directly
//! (8×8 patches, stride 8); two further strided convolutions give the
//! 1/16 and 1/32 levels. Each level is instance-normalized so the
//! targets carry per-sample structure rather than a shared dataset
//! mean — a student that ignores its bottleneck cannot match them. The
//! weights never receive gradients; they are fixed at construction and
//! carried through checkpoints so a trained model is self-contained.

use crate::scalar::Scalar;
use crate::tensor::ops;
use crate::tensor::tape::ParamId;
use crate::tensor::Tensor;

use super::{fnv1a64, ConvUnit, ModelError, FEATURE_CHANNELS};

#[derive(Debug, Clone)]
pub struct Teacher<T> {
    convs: [ConvUnit<T>; 3],
}

impl<T: Scalar> Teacher<T> {
    /// Folded into the model digest so checkpoints notice teacher edits.
    pub const ARCH_TAG: &'static str = "patch8x32-in";

    pub fn build(seed: u64) -> Result<Self, ModelError> {
        // (in, out, kernel, stride, padding)
        let stages = [
            (3, FEATURE_CHANNELS, 8, 8, 0),
            (FEATURE_CHANNELS, FEATURE_CHANNELS, 3, 2, 1),
            (FEATURE_CHANNELS, FEATURE_CHANNELS, 3, 2, 1),
        ];
        let mut convs = Vec::with_capacity(3);
        for (i, (ci, co, k, stride, pad)) in stages.into_iter().enumerate() {
            convs.push(ConvUnit::build(
                &format!("teacher.{i}.conv"),
                seed ^ fnv1a64(b"teacher-stream"),
                co,
                ci,
                k,
                stride,
                pad,
                false,
                false, // frozen: no parameter ids
            )?);
        }
        Ok(Teacher { convs: convs.try_into().expect("three stages") })
    }

    /// Three normalized feature maps at 1/8, 1/16 and 1/32 of the input.
    pub fn forward(&self, x: &Tensor<T>) -> Result<[Tensor<T>; 3], ModelError> {
        let p3 = ops::conv2d(x, &self.convs[0].params)?;
        let p4 = ops::conv2d(&ops::silu(&p3), &self.convs[1].params)?;
        let p5 = ops::conv2d(&ops::silu(&p4), &self.convs[2].params)?;
        Ok([
            ops::instance_norm(&p3, super::INSTANCE_NORM_EPS)?,
            ops::instance_norm(&p4, super::INSTANCE_NORM_EPS)?,
            ops::instance_norm(&p5, super::INSTANCE_NORM_EPS)?,
        ])
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(ConvUnit::param_count).sum()
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, Option<ParamId>, &Tensor<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("teacher.{i}.conv"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, Option<ParamId>, &mut Tensor<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("teacher.{i}.conv"), f);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Teacher<U> {
        Teacher {
            convs: [self.convs[0].cast(), self.convs[1].cast(), self.convs[2].cast()],
        }
    }

    /// Flat copy of every weight, for drift checks in training tests.
    pub fn snapshot(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, t| out.extend_from_slice(t.data()));
        out
    }
}
