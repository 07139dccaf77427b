//! Reverse-mode autodiff over an append-only tape.
//!
//! Each forward op pushes one node holding its output value plus whatever
//! the backward pass needs. A [`NodeId`] is only valid on the tape that
//! produced it; mixing tapes is a hard error, not undefined behavior.
//! Parameters are shared into the tape as `Arc<LayerParams>` so no weight
//! data is copied per op; gradients are keyed by [`ParamId`].

use std::collections::HashMap;
use std::sync::Arc;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use super::ops;
use super::{LayerParams, Tensor, TensorError};
use crate::codec;
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);
static NEXT_PARAM_ID: AtomicU32 = AtomicU32::new(1);

/// Process-unique identity of one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u32);

impl ParamId {
    pub fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Handle to a value on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

/// Accumulated parameter gradients from one or more backward passes.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    by_param: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Gradients { by_param: HashMap::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: Tensor<T>) {
        match self.by_param.get_mut(&id) {
            Some(slot) => {
                for (a, b) in slot.data_mut().iter_mut().zip(grad.data()) {
                    *a += *b;
                }
            }
            None => {
                self.by_param.insert(id, grad);
            }
        }
    }

    /// Merge another gradient set into this one (sums shared params).
    pub fn merge(&mut self, other: Gradients<T>) {
        for (id, g) in other.by_param {
            self.accumulate(id, g);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.by_param.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Parameter ids attached to one conv/linear layer; `None` freezes it.
#[derive(Debug, Clone, Copy, Default)]
pub struct LayerIds {
    pub weight: Option<ParamId>,
    pub bias: Option<ParamId>,
}

enum Op<T: Scalar> {
    Leaf,
    Conv {
        input: NodeId,
        params: Arc<LayerParams<T>>,
        ids: LayerIds,
        saved: ops::ConvSaved<T>,
    },
    TConv {
        input: NodeId,
        params: Arc<LayerParams<T>>,
        ids: LayerIds,
    },
    InstanceNorm {
        input: NodeId,
        inv_stds: Vec<T>,
    },
    Silu {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddScaled {
        a: NodeId,
        b: NodeId,
        coeff: T,
    },
    AddConst {
        input: NodeId,
    },
    StraightThroughQuant {
        input: NodeId,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    Linear {
        input: NodeId,
        weight: Arc<Tensor<T>>,
        ids: LayerIds,
    },
    MseVs {
        input: NodeId,
        target: Tensor<T>,
    },
    WeightedSum {
        inputs: Vec<(NodeId, T)>,
    },
    CrossEntropy {
        input: NodeId,
        class: usize,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Single-owner computation record; dropped wholesale after backward.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> Result<&Tensor<T>, TensorError> {
        self.check(node)?;
        Ok(&self.nodes[node.index].value)
    }

    fn check(&self, node: NodeId) -> Result<(), TensorError> {
        if node.tape != self.id {
            return Err(TensorError::ForeignNode { expected: self.id, actual: node.tape });
        }
        debug_assert!(node.index < self.nodes.len());
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op });
        NodeId { tape: self.id, index }
    }

    /// Record an input or other constant; gradients flow to it but are
    /// discarded unless requested via [`Tape::backward_with_leaf_grads`].
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn conv(
        &mut self,
        input: NodeId,
        params: Arc<LayerParams<T>>,
        ids: LayerIds,
    ) -> Result<NodeId, TensorError> {
        self.check(input)?;
        let (out, saved) = ops::conv2d_forward(&self.nodes[input.index].value, &params)?;
        Ok(self.push(out, Op::Conv { input, params, ids, saved }))
    }

    pub fn transpose_conv(
        &mut self,
        input: NodeId,
        params: Arc<LayerParams<T>>,
        ids: LayerIds,
    ) -> Result<NodeId, TensorError> {
        self.check(input)?;
        let out = ops::transpose_conv2d_forward(&self.nodes[input.index].value, &params)?;
        Ok(self.push(out, Op::TConv { input, params, ids }))
    }

    pub fn instance_norm(&mut self, input: NodeId, eps: f64) -> Result<NodeId, TensorError> {
        self.check(input)?;
        let (out, inv_stds) = ops::instance_norm_forward(&self.nodes[input.index].value, eps)?;
        Ok(self.push(out, Op::InstanceNorm { input, inv_stds }))
    }

    pub fn silu(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        self.check(input)?;
        let out = ops::silu(&self.nodes[input.index].value);
        Ok(self.push(out, Op::Silu { input }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let out = self.nodes[a.index]
            .value
            .zip_map(&self.nodes[b.index].value, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// a + coeff * b, used for the weighted running sum over sub-encoders.
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, coeff: T) -> Result<NodeId, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let out = self.nodes[a.index]
            .value
            .zip_map(&self.nodes[b.index].value, |x, y| x + coeff * y)?;
        Ok(self.push(out, Op::AddScaled { a, b, coeff }))
    }

    /// x + t for a fixed tensor t (e.g. a drawn noise sample); the gradient
    /// passes through unchanged.
    pub fn add_const(&mut self, input: NodeId, t: &Tensor<T>) -> Result<NodeId, TensorError> {
        self.check(input)?;
        let out = self.nodes[input.index].value.zip_map(t, |x, y| x + y)?;
        Ok(self.push(out, Op::AddConst { input }))
    }

    /// Quantize-dequantize in the forward pass, identity in the backward
    /// pass (straight-through estimator).
    pub fn straight_through_quant(
        &mut self,
        input: NodeId,
        bits: u8,
    ) -> Result<NodeId, TensorError> {
        self.check(input)?;
        if !(1..=8).contains(&bits) {
            return Err(TensorError::BadGeometry {
                op: "straight_through_quant",
                reason: format!("bits must be in 1..=8, got {bits}"),
            });
        }
        let value = &self.nodes[input.index].value;
        let (symbols, sigma) = codec::quantize_values(value.data(), bits);
        let deq = codec::dequantize_values(&symbols, bits, sigma);
        let out = Tensor::new(value.shape().to_vec(), deq)?;
        Ok(self.push(out, Op::StraightThroughQuant { input }))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        self.check(input)?;
        let value = &self.nodes[input.index].value;
        let (c, h, w) = value.dims3("global_avg_pool")?;
        let inv_n = T::from_f64(1.0 / (h * w) as f64);
        let mut out = Tensor::zeros(&[c]);
        for ch in 0..c {
            out.data_mut()[ch] = value.data()[ch * h * w..(ch + 1) * h * w]
                .iter()
                .copied()
                .sum::<T>()
                * inv_n;
        }
        Ok(self.push(out, Op::GlobalAvgPool { input }))
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        let mut data = Vec::new();
        for &n in inputs {
            self.check(n)?;
            data.extend_from_slice(self.nodes[n.index].value.data());
        }
        let out = Tensor::new(vec![data.len()], data)?;
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec() }))
    }

    pub fn linear(
        &mut self,
        input: NodeId,
        weight: Arc<Tensor<T>>,
        bias: Arc<Tensor<T>>,
        ids: LayerIds,
    ) -> Result<NodeId, TensorError> {
        self.check(input)?;
        let out = ops::linear_forward(&self.nodes[input.index].value, &weight, &bias)?;
        Ok(self.push(out, Op::Linear { input, weight, ids }))
    }

    /// Mean squared error against a fixed target: sum((x - t)^2) / numel.
    pub fn mse_vs(&mut self, input: NodeId, target: &Tensor<T>) -> Result<NodeId, TensorError> {
        self.check(input)?;
        let value = &self.nodes[input.index].value;
        if value.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse_vs",
                expected: format!("{:?}", value.shape()),
                actual: format!("{:?}", target.shape()),
            });
        }
        let n = T::from_f64(value.numel() as f64);
        let sum = value
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = a - b;
                d * d
            })
            .sum::<T>();
        let out = Tensor::scalar(sum / n);
        Ok(self.push(out, Op::MseVs { input, target: target.clone() }))
    }

    /// sum_i coeff_i * x_i over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId, TensorError> {
        let mut acc = T::zero();
        for &(n, c) in terms {
            self.check(n)?;
            acc += c * self.nodes[n.index].value.item();
        }
        let out = Tensor::scalar(acc);
        Ok(self.push(out, Op::WeightedSum { inputs: terms.to_vec() }))
    }

    /// Softmax cross-entropy of a logit vector against one true class index.
    pub fn cross_entropy(&mut self, input: NodeId, class: usize) -> Result<NodeId, TensorError> {
        self.check(input)?;
        let logits = &self.nodes[input.index].value;
        if logits.shape().len() != 1 || class >= logits.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                expected: format!("rank-1 logits with class < len, class {class}"),
                actual: format!("{:?}", logits.shape()),
            });
        }
        let max = logits
            .data()
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
        let lse = logits
            .data()
            .iter()
            .map(|&v| (v - max).exp())
            .sum::<T>()
            .ln()
            + max;
        let out = Tensor::scalar(lse - logits.data()[class]);
        Ok(self.push(out, Op::CrossEntropy { input, class }))
    }

    /// Reverse pass from a scalar root; returns parameter gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>, TensorError> {
        Ok(self.backward_impl(root)?.0)
    }

    /// Like [`Tape::backward`] but also returns gradients that reached the
    /// given leaf nodes (used by gradient checks and saliency probes).
    pub fn backward_with_leaf_grads(
        &self,
        root: NodeId,
        leaves: &[NodeId],
    ) -> Result<(Gradients<T>, Vec<Option<Tensor<T>>>), TensorError> {
        let (grads, mut slots) = self.backward_impl(root)?;
        let picked = leaves
            .iter()
            .map(|l| {
                self.check(*l)?;
                Ok(slots[l.index].take())
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        Ok((grads, picked))
    }

    #[allow(clippy::type_complexity)]
    fn backward_impl(
        &self,
        root: NodeId,
    ) -> Result<(Gradients<T>, Vec<Option<Tensor<T>>>), TensorError> {
        self.check(root)?;
        if self.nodes[root.index].value.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.nodes[root.index].value.shape().to_vec(),
            });
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[root.index] = Some(Tensor::scalar(T::one()));
        let mut grads = Gradients::new();

        for index in (0..=root.index).rev() {
            let Some(g) = slots[index].take() else { continue };
            let node = &self.nodes[index];
            match &node.op {
                Op::Leaf => {
                    // gradient kept for callers that asked for leaf grads
                    slots[index] = Some(g);
                    continue;
                }
                Op::Conv { input, params, ids, saved } => {
                    let x = &self.nodes[input.index].value;
                    let (gx, gw, gb) = ops::conv2d_backward(x, params, saved, &g)?;
                    accumulate(&mut slots[input.index], gx);
                    if let Some(id) = ids.weight {
                        grads.accumulate(id, gw);
                    }
                    if let (Some(id), Some(gb)) = (ids.bias, gb) {
                        grads.accumulate(id, gb);
                    }
                }
                Op::TConv { input, params, ids } => {
                    let x = &self.nodes[input.index].value;
                    let (gx, gw, gb) = ops::transpose_conv2d_backward(x, params, &g)?;
                    accumulate(&mut slots[input.index], gx);
                    if let Some(id) = ids.weight {
                        grads.accumulate(id, gw);
                    }
                    if let (Some(id), Some(gb)) = (ids.bias, gb) {
                        grads.accumulate(id, gb);
                    }
                }
                Op::InstanceNorm { input, inv_stds } => {
                    let gx = ops::instance_norm_backward(&node.value, inv_stds, &g);
                    accumulate(&mut slots[input.index], gx);
                }
                Op::Silu { input } => {
                    let x = &self.nodes[input.index].value;
                    accumulate(&mut slots[input.index], ops::silu_backward(x, &g));
                }
                Op::Add { a, b } => {
                    accumulate(&mut slots[a.index], g.clone());
                    accumulate(&mut slots[b.index], g);
                }
                Op::AddScaled { a, b, coeff } => {
                    let gb = g.map(|v| v * *coeff);
                    accumulate(&mut slots[a.index], g);
                    accumulate(&mut slots[b.index], gb);
                }
                Op::AddConst { input } | Op::StraightThroughQuant { input } => {
                    accumulate(&mut slots[input.index], g);
                }
                Op::GlobalAvgPool { input } => {
                    let x = &self.nodes[input.index].value;
                    let (c, h, w) = x.dims3("global_avg_pool")?;
                    let inv_n = T::from_f64(1.0 / (h * w) as f64);
                    let mut gx = Tensor::zeros(x.shape());
                    for ch in 0..c {
                        let gv = g.data()[ch] * inv_n;
                        for v in &mut gx.data_mut()[ch * h * w..(ch + 1) * h * w] {
                            *v = gv;
                        }
                    }
                    accumulate(&mut slots[input.index], gx);
                }
                Op::Concat { inputs } => {
                    let mut offset = 0;
                    for &n in inputs {
                        let len = self.nodes[n.index].value.numel();
                        let part = Tensor::new(
                            self.nodes[n.index].value.shape().to_vec(),
                            g.data()[offset..offset + len].to_vec(),
                        )?;
                        accumulate(&mut slots[n.index], part);
                        offset += len;
                    }
                }
                Op::Linear { input, weight, ids, .. } => {
                    let x = &self.nodes[input.index].value;
                    let (gx, gw, gb) = ops::linear_backward(x, weight, &g);
                    accumulate(&mut slots[input.index], gx);
                    if let Some(id) = ids.weight {
                        grads.accumulate(id, gw);
                    }
                    if let Some(id) = ids.bias {
                        grads.accumulate(id, gb);
                    }
                }
                Op::MseVs { input, target } => {
                    let x = &self.nodes[input.index].value;
                    let scale = g.item() * T::from_f64(2.0 / x.numel() as f64);
                    let gx = x.zip_map(target, |a, b| scale * (a - b))?;
                    accumulate(&mut slots[input.index], gx);
                }
                Op::WeightedSum { inputs } => {
                    let gv = g.item();
                    for &(n, c) in inputs {
                        accumulate(&mut slots[n.index], Tensor::scalar(gv * c));
                    }
                }
                Op::CrossEntropy { input, class } => {
                    let logits = &self.nodes[input.index].value;
                    let max = logits
                        .data()
                        .iter()
                        .copied()
                        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
                    let exps: Vec<T> = logits.data().iter().map(|&v| (v - max).exp()).collect();
                    let denom = exps.iter().copied().sum::<T>();
                    let gv = g.item();
                    let mut gx = Tensor::zeros(logits.shape());
                    for (i, e) in exps.iter().enumerate() {
                        let p = *e / denom;
                        let y = if i == *class { T::one() } else { T::zero() };
                        gx.data_mut()[i] = gv * (p - y);
                    }
                    accumulate(&mut slots[input.index], gx);
                }
            }
        }
        Ok((grads, slots))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(grad),
    }
}
