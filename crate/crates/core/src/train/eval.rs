//! Post-training evaluation: distillation MSE at a chosen (size, bits)
//! operating point, task-head fitting over cached student features, and
//! classification accuracy.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::codec;
use crate::model::{ensemble_forward, SlimModel, NUM_CLASSES};
use crate::scalar::Scalar;
use crate::tensor::tape::Gradients;
use crate::tensor::Tensor;

use super::data::ToyDataset;
use super::{mse_loss, AdamState, TrainError};

/// Student forward pass at ensemble size `s`, optionally through a hard
/// quantize-dequantize roundtrip at `quant_bits`. Returns the three
/// distillation maps and the task logits.
pub fn student_forward<T: Scalar>(
    model: &SlimModel<T>,
    x: &Tensor<T>,
    s: usize,
    quant_bits: Option<u8>,
) -> Result<(Vec<Tensor<T>>, Tensor<T>), TrainError> {
    let mut z = ensemble_forward(&model.encoder, x, s)?;
    if let Some(bits) = quant_bits {
        let symbols = codec::quantize(&z, bits)?;
        z = codec::dequantize(&symbols)?;
    }
    Ok(model.decode_tensor(&z)?)
}

/// Just the distillation maps of [`student_forward`].
pub fn student_maps<T: Scalar>(
    model: &SlimModel<T>,
    x: &Tensor<T>,
    s: usize,
    quant_bits: Option<u8>,
) -> Result<Vec<Tensor<T>>, TrainError> {
    Ok(student_forward(model, x, s, quant_bits)?.0)
}

/// Mean distillation MSE over (up to) `limit` dataset samples.
pub fn eval_distillation_mse<T: Scalar>(
    model: &SlimModel<T>,
    data: &ToyDataset,
    s: usize,
    quant_bits: Option<u8>,
    limit: usize,
) -> Result<f64, TrainError> {
    let count = data.len.min(limit);
    if count == 0 {
        return Err(TrainError::Config("cannot evaluate on zero samples".into()));
    }
    let mut total = 0.0;
    for i in 0..count {
        let (x, _) = data.sample::<T>(i);
        let maps = student_maps(model, &x, s, quant_bits)?;
        let teacher_maps = model.teacher.forward(&x)?;
        total += mse_loss(&maps, &teacher_maps.to_vec())?;
    }
    Ok(total / count as f64)
}

/// Global-average-pool each map and concatenate, mirroring the pooling
/// the task head applies on the tape.
pub fn pool_concat<T: Scalar>(maps: &[Tensor<T>]) -> Result<Tensor<T>, TrainError> {
    let mut data = Vec::new();
    for m in maps {
        let (c, h, w) = m.dims3("pool_concat")?;
        let inv = T::from_f64(1.0 / (h * w) as f64);
        for ch in 0..c {
            let sum: T = m.data()[ch * h * w..(ch + 1) * h * w].iter().copied().sum();
            data.push(sum * inv);
        }
    }
    let len = data.len();
    Ok(Tensor::new(vec![len], data)?)
}

fn head_logits<T: Scalar>(model: &SlimModel<T>, features: &Tensor<T>) -> Vec<f64> {
    let w = model.task_head.weight.data();
    let b = model.task_head.bias.data();
    let dim = features.numel();
    (0..NUM_CLASSES)
        .map(|j| {
            let mut acc = b[j];
            for k in 0..dim {
                acc += w[j * dim + k] * features.data()[k];
            }
            acc.as_f64()
        })
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Fit the task head (alone) by full-batch cross-entropy over student
/// features cached at the given operating point. Every other parameter is
/// left untouched. Returns the final mean cross-entropy.
pub fn train_task_head<T: Scalar>(
    model: &mut SlimModel<T>,
    data: &ToyDataset,
    s: usize,
    quant_bits: Option<u8>,
    steps: usize,
    lr: f64,
    limit: usize,
) -> Result<f64, TrainError> {
    let count = data.len.min(limit);
    if count == 0 {
        return Err(TrainError::Config("cannot fit the head on zero samples".into()));
    }
    let mut features = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let (x, label) = data.sample::<T>(i);
        let maps = student_maps(model, &x, s, quant_bits)?;
        features.push(pool_concat(&maps)?);
        labels.push(label);
    }
    fit_linear_head(model, &features, &labels, steps, lr)
}

/// Full-batch cross-entropy fit of the task head over precomputed pooled
/// features. Returns the final mean cross-entropy.
pub fn fit_linear_head<T: Scalar>(
    model: &mut SlimModel<T>,
    features: &[Tensor<T>],
    labels: &[usize],
    steps: usize,
    lr: f64,
) -> Result<f64, TrainError> {
    let count = features.len();
    if count == 0 || count != labels.len() {
        return Err(TrainError::Config(format!(
            "head fit needs matching non-empty features/labels, got {count}/{}",
            labels.len()
        )));
    }
    let dim = features[0].numel();
    let w_id = model.task_head.ids.weight.expect("task head is trainable");
    let b_id = model.task_head.ids.bias.expect("task head is trainable");

    let mut opt = AdamState::new();
    let mut last_ce = f64::NAN;
    for _ in 0..steps {
        let mut gw = vec![T::zero(); NUM_CLASSES * dim];
        let mut gb = vec![T::zero(); NUM_CLASSES];
        let mut ce = 0.0;
        let inv = 1.0 / count as f64;
        for (f, &y) in features.iter().zip(labels) {
            let probs = softmax(&head_logits(model, f));
            ce -= probs[y].max(1e-300).ln() * inv;
            for j in 0..NUM_CLASSES {
                let coef = T::from_f64((probs[j] - if j == y { 1.0 } else { 0.0 }) * inv);
                gb[j] += coef;
                for k in 0..dim {
                    gw[j * dim + k] += coef * f.data()[k];
                }
            }
        }
        let mut grads = Gradients::new();
        grads.accumulate(w_id, Tensor::new(vec![NUM_CLASSES, dim], gw)?);
        grads.accumulate(b_id, Tensor::new(vec![NUM_CLASSES], gb)?);
        opt.apply(model, &grads, lr);
        last_ce = ce;
    }
    Ok(last_ce)
}

/// Argmax class of the task head over pooled features.
pub fn head_predict<T: Scalar>(model: &SlimModel<T>, features: &Tensor<T>) -> usize {
    head_logits(model, features)
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
        .map(|(i, _)| i)
        .expect("non-empty logits")
}

/// Fraction of (up to) `limit` samples whose argmax logit matches the label.
pub fn eval_task_accuracy<T: Scalar>(
    model: &SlimModel<T>,
    data: &ToyDataset,
    s: usize,
    quant_bits: Option<u8>,
    limit: usize,
) -> Result<f64, TrainError> {
    let count = data.len.min(limit);
    if count == 0 {
        return Err(TrainError::Config("cannot evaluate on zero samples".into()));
    }
    let mut correct = 0usize;
    for i in 0..count {
        let (x, label) = data.sample::<T>(i);
        let maps = student_maps(model, &x, s, quant_bits)?;
        let feats = pool_concat(&maps)?;
        if head_predict(model, &feats) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / count as f64)
}

/// Deterministic helper for tests that need an arbitrary input image.
pub fn random_image<T: Scalar>(seed: u64, resolution: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![3, resolution, resolution],
        (0..3 * resolution * resolution)
            .map(|_| T::from_f64(rng.random_range(0.0..1.0)))
            .collect(),
    )
    .expect("shape matches data")
}
