//! Slimmable ensemble training: sandwich-rule size sampling, feature
//! distillation against the frozen teacher, uniform-noise regularization
//! of the bottleneck, and ADAM updates.

mod data;
mod eval;

pub use data::{Split, ToyDataset, DEFAULT_RESOLUTION};
pub use eval::{
    eval_distillation_mse, eval_task_accuracy, fit_linear_head, head_predict, pool_concat,
    random_image, student_forward, student_maps, train_task_head,
};

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::io::Write;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ensemble_combine, ModelError, SlimModel};
use crate::scalar::Scalar;
use crate::tensor::tape::{Gradients, NodeId, ParamId, Tape};
use crate::tensor::{Tensor, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("loss became non-finite ({value}) at ensemble size {size} on step {step}")]
    NonFiniteLoss { size: usize, step: u64, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
    #[error("log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Largest ensemble size the model is trained to support (N).
    pub ensemble_size: usize,
    /// Sizes evaluated per step (S): the two extremes plus S-2 random draws.
    pub sizes_per_step: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Halve the learning rate every this many epochs; `None` keeps it constant.
    pub lr_halving_period_epochs: Option<u32>,
    pub batch_size: usize,
    pub seed: u64,
    /// Add uniform bottleneck noise during training (the quantization surrogate).
    pub regularize: bool,
    /// Train through hard quantize-dequantize at this bit depth instead
    /// (straight-through gradients). Mutually exclusive with `regularize`.
    pub hard_quant_bits: Option<u8>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ensemble_size: 4,
            sizes_per_step: 4,
            epochs: 5,
            learning_rate: 0.05,
            lr_halving_period_epochs: Some(5),
            batch_size: 16,
            seed: 0,
            regularize: true,
            hard_quant_bits: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.sizes_per_step < 2 {
            return Err(TrainError::Config(format!(
                "sizes_per_step must be at least 2 (both extremes), got {}",
                self.sizes_per_step
            )));
        }
        if self.ensemble_size == 0 {
            return Err(TrainError::Config("ensemble_size must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.lr_halving_period_epochs == Some(0) {
            return Err(TrainError::Config(
                "lr_halving_period_epochs must be positive (or omitted)".into(),
            ));
        }
        if self.regularize && self.hard_quant_bits.is_some() {
            return Err(TrainError::Config(
                "regularize and hard_quant_bits are mutually exclusive".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at a given epoch: lr0 * 0.5^floor(epoch / period).
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    match config.lr_halving_period_epochs {
        None => config.learning_rate,
        Some(period) => {
            config.learning_rate * 0.5f64.powi((epoch / period as usize) as i32)
        }
    }
}

/// Sandwich-rule size sampling: both extremes always, then S-2 uniform
/// draws from 1..=N.
pub fn sample_sizes(
    n: usize,
    s: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, TrainError> {
    if n < 1 {
        return Err(TrainError::Config("ensemble size must be at least 1".into()));
    }
    if s < 2 {
        return Err(TrainError::Config(format!(
            "need at least 2 sizes per step, got {s}"
        )));
    }
    let mut sizes = Vec::with_capacity(s);
    sizes.push(1);
    sizes.push(n);
    for _ in 2..s {
        sizes.push(rng.random_range(1..=n));
    }
    Ok(sizes)
}

/// I.i.d. uniform noise on (-2^-s, 2^-s), the training-time stand-in for
/// quantize-dequantize error at ensemble size s.
pub fn noise_tensor<T: Scalar>(
    shape: &[usize],
    s: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let bound = 0.5f64.powi(s as i32);
    let data = (0..shape.iter().product())
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

/// z plus size-scaled uniform noise.
pub fn regularize_noise<T: Scalar>(
    z: &Tensor<T>,
    s: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let noise = noise_tensor::<T>(z.shape(), s, rng);
    z.zip_map(&noise, |a, b| a + b).expect("same shape by construction")
}

/// Distillation loss: per feature map, mean squared difference over
/// elements; summed over the maps.
pub fn mse_loss<T: Scalar>(r: &[Tensor<T>], r_prime: &[Tensor<T>]) -> Result<f64, TrainError> {
    if r.len() != r_prime.len() {
        return Err(TrainError::Config(format!(
            "mse_loss over {} vs {} feature maps",
            r.len(),
            r_prime.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in r.iter().zip(r_prime) {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse_loss",
                expected: format!("{:?}", a.shape()),
                actual: format!("{:?}", b.shape()),
            }
            .into());
        }
        let mut sum = T::zero();
        for (x, y) in a.data().iter().zip(b.data()) {
            let d = *x - *y;
            sum += d * d;
        }
        total += sum.as_f64() / a.numel() as f64;
    }
    Ok(total)
}

/// One parameter's bias-corrected ADAM update, applied in place.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    debug_assert!(t >= 1);
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - beta1.powi(t as i32));
    let corr2 = T::from_f64(1.0 - beta2.powi(t as i32));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / corr1;
        let v_hat = v[i] / corr2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// First and second moment buffers, keyed by parameter id.
#[derive(Debug, Default)]
pub struct AdamState<T> {
    m: HashMap<ParamId, Vec<T>>,
    v: HashMap<ParamId, Vec<T>>,
    /// Completed update count (the bias-correction time index).
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState { m: HashMap::new(), v: HashMap::new(), t: 0 }
    }

    /// Apply one step to every parameter that received a gradient.
    pub fn apply(&mut self, model: &mut SlimModel<T>, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let t = self.t;
        model.visit_mut(|_, id, tensor| {
            let Some(id) = id else { return };
            let Some(g) = grads.get(id) else { return };
            let n = tensor.numel();
            let m = self.m.entry(id).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(id).or_insert_with(|| vec![T::zero(); n]);
            adam_update(
                tensor.data_mut(),
                g.data(),
                m,
                v,
                t,
                lr,
                ADAM_BETA1,
                ADAM_BETA2,
                ADAM_EPS,
            );
        });
    }
}

/// Loss and bookkeeping from one optimization step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub sampled_sizes: Vec<usize>,
}

/// One step: draw sizes, accumulate the distillation loss over the batch
/// at each size, backprop, and apply a single ADAM update.
///
/// Duplicate size draws are folded into loss weights (identical math,
/// less compute). The per-sample graph shares encoder member outputs
/// across sizes, which the prefix-sum combination makes exact.
pub fn train_step<T: Scalar>(
    model: &mut SlimModel<T>,
    opt: &mut AdamState<T>,
    batch: &[(Tensor<T>, usize)],
    lr: f64,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<StepOutcome, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let sizes = sample_sizes(config.ensemble_size, config.sizes_per_step, rng)?;
    let mut multiplicity: BTreeMap<usize, usize> = BTreeMap::new();
    for &s in &sizes {
        *multiplicity.entry(s).or_insert(0) += 1;
    }
    let max_size = *multiplicity.keys().next_back().expect("sizes non-empty");
    let inv_batch = 1.0 / batch.len() as f64;

    let mut total_grads = Gradients::new();
    let mut total_loss = 0.0;
    for (x, _) in batch {
        let teacher_maps = model.teacher.forward(x)?;
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let member_outs: Vec<NodeId> = model.encoder.members[..max_size]
            .iter()
            .map(|m| m.forward(&mut tape, leaf))
            .collect::<Result<Vec<_>, _>>()?;

        let mut terms: Vec<(NodeId, T)> = Vec::with_capacity(3 * multiplicity.len());
        for (&s, &mult) in &multiplicity {
            let z = ensemble_combine(&mut tape, &member_outs, s)?;
            let z = if config.regularize {
                let noise = noise_tensor::<T>(tape.value(z)?.shape(), s, rng);
                tape.add_const(z, &noise)?
            } else if let Some(bits) = config.hard_quant_bits {
                tape.straight_through_quant(z, bits)?
            } else {
                z
            };
            let maps = model.student_decode(&mut tape, z)?;
            let mut size_loss = 0.0;
            for (&m, target) in maps.iter().zip(&teacher_maps) {
                let node = tape.mse_vs(m, target)?;
                size_loss += tape.value(node)?.item().as_f64();
                terms.push((node, T::from_f64(mult as f64)));
            }
            if !size_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { size: s, step, value: size_loss });
            }
        }
        let root = tape.weighted_sum(&terms)?;
        total_loss += tape.value(root)?.item().as_f64() * inv_batch;
        let mut grads = tape.backward(root)?;
        grads.scale(T::from_f64(inv_batch));
        total_grads.merge(grads);
    }

    opt.apply(model, &total_grads, lr);
    Ok(StepOutcome { loss: total_loss, sampled_sizes: sizes })
}

/// One line of the JSONL training log.
#[derive(Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub sampled_sizes: Vec<usize>,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: u64,
    pub final_loss: f64,
}

/// Owns the model, optimizer state, and RNG for one deterministic,
/// single-threaded training run.
pub struct Trainer<T: Scalar> {
    pub model: SlimModel<T>,
    pub opt: AdamState<T>,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = SlimModel::new(config.ensemble_size, config.seed)?;
        Ok(Self::from_model(model, config))
    }

    pub fn from_model(model: SlimModel<T>, config: TrainConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e_2d72_6e67);
        Trainer { model, opt: AdamState::new(), config, rng, step: 0 }
    }

    /// Run `config.epochs` over the dataset, optionally writing one JSONL
    /// record per step.
    pub fn run<W: Write>(
        &mut self,
        data: &ToyDataset,
        mut log: Option<&mut W>,
    ) -> Result<RunSummary, TrainError> {
        self.config.validate()?;
        let steps_per_epoch = data.len / self.config.batch_size;
        if steps_per_epoch == 0 {
            return Err(TrainError::Config(format!(
                "dataset of {} samples is smaller than one batch of {}",
                data.len, self.config.batch_size
            )));
        }
        let mut last_loss = f64::NAN;
        for epoch in 0..self.config.epochs {
            let lr = lr_schedule(epoch, &self.config);
            for k in 0..steps_per_epoch {
                let batch = data.batch::<T>(k * self.config.batch_size, self.config.batch_size);
                let outcome = train_step(
                    &mut self.model,
                    &mut self.opt,
                    &batch,
                    lr,
                    &self.config,
                    &mut self.rng,
                    self.step,
                )?;
                if let Some(w) = log.as_deref_mut() {
                    let record = LogRecord {
                        step: self.step,
                        epoch,
                        lr,
                        sampled_sizes: outcome.sampled_sizes.clone(),
                        loss: outcome.loss,
                    };
                    serde_json::to_writer(&mut *w, &record)?;
                    writeln!(w)?;
                }
                last_loss = outcome.loss;
                self.step += 1;
            }
        }
        Ok(RunSummary { steps: self.step, final_loss: last_loss })
    }
}
