//! Layer kernels: convolution, transpose convolution, instance norm, SiLU,
//! and the dense layer used by the task head.
//!
//! Convolutions are lowered to im2col + matrix multiply. The direct-sum
//! semantics are the contract; tests check against naive nested loops.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use super::macs;
use super::{LayerParams, Tensor, TensorError};
use crate::scalar::Scalar;

pub(crate) fn conv_out_dim(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    op: &'static str,
) -> Result<usize, TensorError> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(TensorError::BadGeometry {
            op,
            reason: format!("kernel {kernel} exceeds padded input {padded}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

pub(crate) fn tconv_out_dim(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
    op: &'static str,
) -> Result<usize, TensorError> {
    let grown = (size - 1) * stride + kernel + output_padding;
    if grown < 2 * padding + 1 {
        return Err(TensorError::BadGeometry {
            op,
            reason: format!("padding {padding} collapses output of size {grown}"),
        });
    }
    Ok(grown - 2 * padding)
}

/// Gather `image` (C, IH, IW) into a (C*K*K, GH*GW) matrix where grid
/// position (gy, gx) samples image pixel (gy*stride + kh - pad, ...).
fn im2col<T: Scalar>(
    image: &[T],
    channels: usize,
    ih: usize,
    iw: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
) -> Array2<T> {
    let cols = gh * gw;
    let mut out = Array2::<T>::zeros((channels * kernel * kernel, cols));
    for c in 0..channels {
        let plane = &image[c * ih * iw..(c + 1) * ih * iw];
        for kh in 0..kernel {
            for kw in 0..kernel {
                let row = (c * kernel + kh) * kernel + kw;
                let mut row_view = out.row_mut(row);
                let row_slice = row_view.as_slice_mut().expect("contiguous row");
                for gy in 0..gh {
                    let y = (gy * stride + kh) as isize - pad as isize;
                    if y < 0 || y as usize >= ih {
                        continue;
                    }
                    let src = &plane[y as usize * iw..(y as usize + 1) * iw];
                    let dst = &mut row_slice[gy * gw..(gy + 1) * gw];
                    for gx in 0..gw {
                        let x = (gx * stride + kw) as isize - pad as isize;
                        if x >= 0 && (x as usize) < iw {
                            dst[gx] = src[x as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add a (C*K*K, GH*GW) matrix back onto a
/// (C, IH, IW) image.
fn col2im<T: Scalar>(
    col: &Array2<T>,
    channels: usize,
    ih: usize,
    iw: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
) -> Vec<T> {
    let mut image = vec![T::zero(); channels * ih * iw];
    for c in 0..channels {
        let plane = &mut image[c * ih * iw..(c + 1) * ih * iw];
        for kh in 0..kernel {
            for kw in 0..kernel {
                let row = (c * kernel + kh) * kernel + kw;
                let row_view = col.row(row);
                let row_slice = row_view.as_slice().expect("contiguous row");
                for gy in 0..gh {
                    let y = (gy * stride + kh) as isize - pad as isize;
                    if y < 0 || y as usize >= ih {
                        continue;
                    }
                    let dst = &mut plane[y as usize * iw..(y as usize + 1) * iw];
                    let src = &row_slice[gy * gw..(gy + 1) * gw];
                    for gx in 0..gw {
                        let x = (gx * stride + kw) as isize - pad as isize;
                        if x >= 0 && (x as usize) < iw {
                            dst[x as usize] += src[gx];
                        }
                    }
                }
            }
        }
    }
    image
}

fn view2<T: Scalar>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous matrix view")
}

fn view2_mut<T: Scalar>(data: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("contiguous matrix view")
}

fn check_in_channels<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weight_in: usize,
    weight_shape: &[usize],
) -> Result<(usize, usize, usize), TensorError> {
    let (c, h, w) = input.dims3(op)?;
    if c != weight_in {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("input channels {weight_in} for weight {weight_shape:?}"),
            actual: format!("input shape {:?}", input.shape()),
        });
    }
    Ok((c, h, w))
}

/// Saved forward context reused by the backward pass.
pub(crate) struct ConvSaved<T> {
    col: Option<Array2<T>>,
}

pub(crate) fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
) -> Result<(Tensor<T>, ConvSaved<T>), TensorError> {
    let wshape = params.weights.shape().to_vec();
    let (co, ci, k) = (wshape[0], wshape[1], wshape[2]);
    let (_, h, w) = check_in_channels("conv2d", input, ci, &wshape)?;
    if let Some(b) = &params.bias {
        if b.numel() != co {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: format!("bias of length {co}"),
                actual: format!("bias shape {:?}", b.shape()),
            });
        }
    }
    let (s, p) = (params.stride, params.padding);
    let oh = conv_out_dim(h, k, s, p, "conv2d")?;
    let ow = conv_out_dim(w, k, s, p, "conv2d")?;
    let positions = oh * ow;

    let mut out = Tensor::zeros(&[co, oh, ow]);
    let w_mat = view2(params.weights.data(), co, ci * k * k);
    let saved;
    {
        let mut out_mat = view2_mut(out.data_mut(), co, positions);
        if k == 1 && s == 1 && p == 0 {
            let x_mat = view2(input.data(), ci, positions);
            general_mat_mul(T::one(), &w_mat, &x_mat, T::zero(), &mut out_mat);
            saved = ConvSaved { col: None };
        } else {
            let col = im2col(input.data(), ci, h, w, k, s, p, oh, ow);
            general_mat_mul(T::one(), &w_mat, &col.view(), T::zero(), &mut out_mat);
            saved = ConvSaved { col: Some(col) };
        }
    }
    if let Some(bias) = &params.bias {
        let data = out.data_mut();
        for o in 0..co {
            let bv = bias.data()[o];
            for v in &mut data[o * positions..(o + 1) * positions] {
                *v += bv;
            }
        }
    }
    macs::add((co * positions * ci * k * k) as u64);
    Ok((out, saved))
}

/// Direct 2-D convolution (cross-correlation), weight (CO, CI, K, K).
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
) -> Result<Tensor<T>, TensorError> {
    conv2d_forward(input, params).map(|(out, _)| out)
}

/// Gradients of conv2d w.r.t. input, weights, and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    saved: &ConvSaved<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>), TensorError> {
    let wshape = params.weights.shape().to_vec();
    let (co, ci, k) = (wshape[0], wshape[1], wshape[2]);
    let (_, h, w) = input.dims3("conv2d_backward")?;
    let (_, oh, ow) = grad_out.dims3("conv2d_backward")?;
    let positions = oh * ow;
    let (s, p) = (params.stride, params.padding);

    let g_mat = view2(grad_out.data(), co, positions);
    let w_mat = view2(params.weights.data(), co, ci * k * k);

    let mut grad_w = Tensor::zeros(params.weights.shape());
    {
        let mut gw_mat = view2_mut(grad_w.data_mut(), co, ci * k * k);
        match &saved.col {
            Some(col) => {
                general_mat_mul(T::one(), &g_mat, &col.t(), T::zero(), &mut gw_mat)
            }
            None => {
                let x_mat = view2(input.data(), ci, positions);
                general_mat_mul(T::one(), &g_mat, &x_mat.t(), T::zero(), &mut gw_mat)
            }
        }
    }

    let mut grad_x = Tensor::zeros(input.shape());
    if k == 1 && s == 1 && p == 0 {
        let mut gx_mat = view2_mut(grad_x.data_mut(), ci, positions);
        general_mat_mul(T::one(), &w_mat.t(), &g_mat, T::zero(), &mut gx_mat);
    } else {
        let mut grad_col = Array2::<T>::zeros((ci * k * k, positions));
        general_mat_mul(T::one(), &w_mat.t(), &g_mat, T::zero(), &mut grad_col);
        grad_x = Tensor::new(
            input.shape().to_vec(),
            col2im(&grad_col, ci, h, w, k, s, p, oh, ow),
        )?;
    }

    let grad_b = params.bias.as_ref().map(|_| {
        let mut gb = Tensor::zeros(&[co]);
        for o in 0..co {
            let sum: T = grad_out.data()[o * positions..(o + 1) * positions]
                .iter()
                .copied()
                .sum();
            gb.data_mut()[o] = sum;
        }
        gb
    });

    macs::add(2 * (co * positions * ci * k * k) as u64);
    Ok((grad_x, grad_w, grad_b))
}

pub(crate) fn transpose_conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
) -> Result<Tensor<T>, TensorError> {
    let wshape = params.weights.shape().to_vec();
    let (ci, co, k) = (wshape[0], wshape[1], wshape[2]);
    let (_, h, w) = check_in_channels("transpose_conv2d", input, ci, &wshape)?;
    if let Some(b) = &params.bias {
        if b.numel() != co {
            return Err(TensorError::ShapeMismatch {
                op: "transpose_conv2d",
                expected: format!("bias of length {co}"),
                actual: format!("bias shape {:?}", b.shape()),
            });
        }
    }
    let (s, p) = (params.stride, params.padding);
    let oh = tconv_out_dim(h, k, s, p, params.output_padding, "transpose_conv2d")?;
    let ow = tconv_out_dim(w, k, s, p, params.output_padding, "transpose_conv2d")?;
    let positions = h * w;

    // col[(o,kh,kw), (y,x)] = sum_i W[i,o,kh,kw] * in[i,y,x]
    let w_mat = view2(params.weights.data(), ci, co * k * k);
    let x_mat = view2(input.data(), ci, positions);
    let mut col = Array2::<T>::zeros((co * k * k, positions));
    general_mat_mul(T::one(), &w_mat.t(), &x_mat, T::zero(), &mut col);

    let mut out = Tensor::new(
        vec![co, oh, ow],
        col2im(&col, co, oh, ow, k, s, p, h, w),
    )?;
    if let Some(bias) = &params.bias {
        let data = out.data_mut();
        for o in 0..co {
            let bv = bias.data()[o];
            for v in &mut data[o * oh * ow..(o + 1) * oh * ow] {
                *v += bv;
            }
        }
    }
    macs::add((ci * co * k * k * positions) as u64);
    Ok(out)
}

/// Transpose convolution, weight (CI, CO, K, K). Equals the vector-Jacobian
/// product of [`conv2d`] with the same weight read as (CI out, CO in, K, K).
pub fn transpose_conv2d<T: Scalar>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
) -> Result<Tensor<T>, TensorError> {
    transpose_conv2d_forward(input, params)
}

pub(crate) fn transpose_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>), TensorError> {
    let wshape = params.weights.shape().to_vec();
    let (ci, co, k) = (wshape[0], wshape[1], wshape[2]);
    let (_, h, w) = input.dims3("transpose_conv2d_backward")?;
    let (_, oh, ow) = grad_out.dims3("transpose_conv2d_backward")?;
    let positions = h * w;
    let (s, p) = (params.stride, params.padding);

    let col_g = im2col(grad_out.data(), co, oh, ow, k, s, p, h, w);
    let w_mat = view2(params.weights.data(), ci, co * k * k);
    let x_mat = view2(input.data(), ci, positions);

    let mut grad_x = Tensor::zeros(input.shape());
    {
        let mut gx_mat = view2_mut(grad_x.data_mut(), ci, positions);
        general_mat_mul(T::one(), &w_mat, &col_g.view(), T::zero(), &mut gx_mat);
    }

    let mut grad_w = Tensor::zeros(params.weights.shape());
    {
        let mut gw_mat = view2_mut(grad_w.data_mut(), ci, co * k * k);
        general_mat_mul(T::one(), &x_mat, &col_g.t(), T::zero(), &mut gw_mat);
    }

    let grad_b = params.bias.as_ref().map(|_| {
        let mut gb = Tensor::zeros(&[co]);
        for o in 0..co {
            let sum: T = grad_out.data()[o * oh * ow..(o + 1) * oh * ow]
                .iter()
                .copied()
                .sum();
            gb.data_mut()[o] = sum;
        }
        gb
    });

    macs::add(2 * (ci * co * k * k * positions) as u64);
    Ok((grad_x, grad_w, grad_b))
}

/// Per-channel, per-sample normalization: (x - mean_c) / sqrt(var_c + eps),
/// population variance over the spatial extent.
pub fn instance_norm<T: Scalar>(input: &Tensor<T>, eps: f64) -> Result<Tensor<T>, TensorError> {
    instance_norm_forward(input, eps).map(|(y, _)| y)
}

pub(crate) fn instance_norm_forward<T: Scalar>(
    input: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>), TensorError> {
    let (c, h, w) = input.dims3("instance_norm")?;
    let n = h * w;
    if c == 0 || n == 0 {
        return Err(TensorError::BadGeometry {
            op: "instance_norm",
            reason: "needs >= 1 channel and spatial size >= 1".into(),
        });
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let eps_t = T::from_f64(eps);
    let mut out = Tensor::zeros(input.shape());
    let mut inv_stds = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = &input.data()[ch * n..(ch + 1) * n];
        let mean = plane.iter().copied().sum::<T>() * inv_n;
        let var = plane
            .iter()
            .map(|&v| {
                let d = v - mean;
                d * d
            })
            .sum::<T>()
            * inv_n;
        let inv_std = T::one() / (var + eps_t).sqrt();
        inv_stds.push(inv_std);
        let dst = &mut out.data_mut()[ch * n..(ch + 1) * n];
        for (d, &v) in dst.iter_mut().zip(plane) {
            *d = (v - mean) * inv_std;
        }
    }
    Ok((out, inv_stds))
}

pub(crate) fn instance_norm_backward<T: Scalar>(
    normalized: &Tensor<T>,
    inv_stds: &[T],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = normalized
        .dims3("instance_norm_backward")
        .expect("normalized output is rank 3");
    let n = h * w;
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut grad_x = Tensor::zeros(normalized.shape());
    for ch in 0..c {
        let y = &normalized.data()[ch * n..(ch + 1) * n];
        let g = &grad_out.data()[ch * n..(ch + 1) * n];
        let g_mean = g.iter().copied().sum::<T>() * inv_n;
        let gy_mean = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum::<T>() * inv_n;
        let inv_std = inv_stds[ch];
        let dst = &mut grad_x.data_mut()[ch * n..(ch + 1) * n];
        for i in 0..n {
            dst[i] = inv_std * (g[i] - g_mean - y[i] * gy_mean);
        }
    }
    grad_x
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Elementwise x * sigmoid(x).
pub fn silu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x * sigmoid(x))
}

pub(crate) fn silu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut grad = Tensor::zeros(input.shape());
    for ((d, &x), &g) in grad
        .data_mut()
        .iter_mut()
        .zip(input.data())
        .zip(grad_out.data())
    {
        let s = sigmoid(x);
        *d = g * s * (T::one() + x * (T::one() - s));
    }
    grad
}

/// Dense layer y = W x + b with W (M, N), x (N), b (M).
pub(crate) fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let wshape = weight.shape();
    if wshape.len() != 2 || x.numel() != wshape[1] || bias.numel() != wshape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            expected: format!("weight (M,N) with x of N; weight {wshape:?}"),
            actual: format!("x {:?}, bias {:?}", x.shape(), bias.shape()),
        });
    }
    let (m, n) = (wshape[0], wshape[1]);
    let mut out = Tensor::zeros(&[m]);
    for i in 0..m {
        let row = &weight.data()[i * n..(i + 1) * n];
        let mut acc = bias.data()[i];
        for (wv, xv) in row.iter().zip(x.data()) {
            acc += *wv * *xv;
        }
        out.data_mut()[i] = acc;
    }
    macs::add((m * n) as u64);
    Ok(out)
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (m, n) = (weight.shape()[0], weight.shape()[1]);
    let mut grad_x = Tensor::zeros(x.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    let grad_b = grad_out.clone();
    for i in 0..m {
        let g = grad_out.data()[i];
        let wrow = &weight.data()[i * n..(i + 1) * n];
        let gwrow = &mut grad_w.data_mut()[i * n..(i + 1) * n];
        for j in 0..n {
            gwrow[j] = g * x.data()[j];
        }
        for j in 0..n {
            grad_x.data_mut()[j] += g * wrow[j];
        }
    }
    macs::add(2 * (m * n) as u64);
    (grad_x, grad_w, grad_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    /// Naive direct convolution used as an independent oracle.
    pub(crate) fn conv2d_reference(input: &Tensor<f64>, params: &LayerParams<f64>) -> Tensor<f64> {
        let (ci, h, w) = input.dims3("ref").unwrap();
        let ws = params.weights.shape();
        let (co, k) = (ws[0], ws[2]);
        let (s, p) = (params.stride, params.padding);
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros(&[co, oh, ow]);
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = params.bias.as_ref().map_or(0.0, |b| b.data()[o]);
                    for i in 0..ci {
                        for kh in 0..k {
                            for kw in 0..k {
                                let y = (oy * s + kh) as isize - p as isize;
                                let x = (ox * s + kw) as isize - p as isize;
                                if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
                                    continue;
                                }
                                let iv = input.data()[(i * h + y as usize) * w + x as usize];
                                let wv =
                                    params.weights.data()[((o * ci + i) * k + kh) * k + kw];
                                acc += iv * wv;
                            }
                        }
                    }
                    out.data_mut()[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn delta_kernel() -> LayerParams<f64> {
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        LayerParams::new(t(&[1, 1, 3, 3], &w), None, 1, 1).unwrap()
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let input = t(&[1, 4, 4], &(0..16).map(|v| v as f64).collect::<Vec<_>>());
        let out = conv2d(&input, &delta_kernel()).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4]);
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_1x1_matches_hand_expansion() {
        // 2x2x2 fixture, 1x1 kernel: out[c,h,w] = sum_c' W[c,c']*in[c',h,w] + b[c]
        let input = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, -3.0]);
        let weights = t(&[2, 2, 1, 1], &[2.0, -1.0, 0.5, 3.0]);
        let bias = t(&[2], &[0.25, -0.5]);
        let params = LayerParams::new(weights, Some(bias), 1, 0).unwrap();
        let out = conv2d(&input, &params).unwrap();
        let expect = conv2d_reference(&input, &params);
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // spot check one value by hand: out[0,0,0] = 2*1 + (-1)*(-1) + 0.25
        assert!((out.data()[0] - 3.25).abs() < 1e-12);
    }

    #[test]
    fn conv_stride2_shape() {
        let input = Tensor::<f64>::filled(&[1, 6, 6], 1.0);
        let params = LayerParams::new(Tensor::zeros(&[1, 1, 3, 3]), None, 2, 1).unwrap();
        let out = conv2d(&input, &params).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
    }

    #[test]
    fn conv_matches_reference_on_random_fixture() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(ci, co, h, w, k, s, p) in
            &[(3, 4, 7, 6, 3, 1, 1), (2, 5, 8, 8, 3, 2, 1), (4, 2, 5, 5, 1, 1, 0)]
        {
            let input = Tensor::new(
                vec![ci, h, w],
                (0..ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let weights = Tensor::new(
                vec![co, ci, k, k],
                (0..co * ci * k * k)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )
            .unwrap();
            let bias = Tensor::new(vec![co], (0..co).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let params = LayerParams::new(weights, Some(bias), s, p).unwrap();
            let fast = conv2d(&input, &params).unwrap();
            let slow = conv2d_reference(&input, &params);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_shapes() {
        let input = Tensor::<f64>::zeros(&[3, 4, 4]);
        let params = LayerParams::new(Tensor::zeros(&[2, 2, 3, 3]), None, 1, 1).unwrap();
        let err = conv2d(&input, &params).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 2, 3, 3]") && msg.contains("[3, 4, 4]"), "{msg}");
    }

    #[test]
    fn tconv_upscales_3x3_to_5x5() {
        let input = Tensor::<f64>::filled(&[1, 3, 3], 1.0);
        let params = LayerParams::new(Tensor::zeros(&[1, 1, 3, 3]), None, 2, 1).unwrap();
        let out = transpose_conv2d(&input, &params).unwrap();
        assert_eq!(out.shape(), &[1, 5, 5]);
    }

    #[test]
    fn tconv_delta_kernel_is_identity() {
        let input = t(&[1, 4, 4], &(0..16).map(|v| v as f64 - 7.5).collect::<Vec<_>>());
        let out = transpose_conv2d(&input, &delta_kernel()).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4]);
        for (a, b) in out.data().iter().zip(input.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tconv_equals_conv_vjp() {
        // transpose_conv2d(g, W) must equal the input gradient of conv2d at
        // any x, since conv is linear in its input.
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        // (h + 2p - k) divisible by s, so the conv shape law inverts exactly
        let (ci, co, h, w, k, s, p) = (2usize, 3usize, 5usize, 5usize, 3usize, 2usize, 1usize);
        let weights = Tensor::new(
            vec![co, ci, k, k],
            (0..co * ci * k * k)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let conv_params = LayerParams::new(weights.clone(), None, s, p).unwrap();
        let x = Tensor::new(
            vec![ci, h, w],
            (0..ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (_, saved) = conv2d_forward(&x, &conv_params).unwrap();
        let oh = conv_out_dim(h, k, s, p, "t").unwrap();
        let g = Tensor::new(
            vec![co, oh, oh],
            (0..co * oh * oh).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (grad_x, _, _) = conv2d_backward(&x, &conv_params, &saved, &g).unwrap();

        // same weight array read as (CI in-channels of the transpose op, CO, K, K)
        let t_params = LayerParams::new(weights, None, s, p).unwrap();
        let via_tconv: Tensor<f64> = transpose_conv2d(&g, &t_params).unwrap();
        assert_eq!(via_tconv.shape(), grad_x.shape());
        for (a, b) in via_tconv.data().iter().zip(grad_x.data()) {
            assert!((*a - *b).abs() < 1e-10);
        }
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let input = Tensor::<f64>::filled(&[1, 2, 2], 3.5);
        let out = instance_norm(&input, 1e-5).unwrap();
        for v in out.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn instance_norm_matches_direct_computation() {
        let input = t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let out = instance_norm(&input, 0.0).unwrap();
        let expect = [-1.3416407865, -0.4472135955, 0.4472135955, 1.3416407865];
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn instance_norm_channels_are_independent() {
        let a = t(&[2, 1, 3], &[1.0, 2.0, 4.0, -1.0, 0.0, 5.0]);
        let b = t(&[2, 1, 3], &[-1.0, 0.0, 5.0, 1.0, 2.0, 4.0]);
        let na = instance_norm(&a, 1e-5).unwrap();
        let nb = instance_norm(&b, 1e-5).unwrap();
        assert_eq!(&na.data()[0..3], &nb.data()[3..6]);
        assert_eq!(&na.data()[3..6], &nb.data()[0..3]);
    }

    #[test]
    fn instance_norm_moments() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::new(
            vec![3, 8, 8],
            (0..3 * 64).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let out = instance_norm(&input, 1e-5).unwrap();
        for c in 0..3 {
            let plane = &out.data()[c * 64..(c + 1) * 64];
            let mean: f64 = plane.iter().sum::<f64>() / 64.0;
            let var: f64 = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn silu_values() {
        let input = t(&[4], &[0.0, 1.0, 30.0, -30.0]);
        let out = silu(&input);
        assert_eq!(out.data()[0], 0.0);
        assert!((out.data()[1] - 0.7310585786300049).abs() < 1e-12);
        assert!((out.data()[2] - 30.0).abs() < 1e-9);
        assert!(out.data()[3].abs() < 1e-9);
    }

    #[test]
    fn conv_is_linear_in_input() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]| {
            Tensor::new(
                shape.to_vec(),
                (0..shape.iter().product())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<f64>>(),
            )
            .unwrap()
        };
        let x = mk(&mut rng, &[2, 5, 5]);
        let y = mk(&mut rng, &[2, 5, 5]);
        let weights = mk(&mut rng, &[3, 2, 3, 3]);
        let params = LayerParams::new(weights, None, 1, 1).unwrap();
        let (a, b) = (0.7, -1.3);
        let combo = x
            .zip_map(&y, |xv, yv| a * xv + b * yv)
            .unwrap();
        let lhs = conv2d(&combo, &params).unwrap();
        let cx = conv2d(&x, &params).unwrap();
        let cy = conv2d(&y, &params).unwrap();
        for i in 0..lhs.numel() {
            let rhs = a * cx.data()[i] + b * cy.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn mac_counter_counts_conv() {
        let input = Tensor::<f64>::zeros(&[2, 4, 4]);
        let params = LayerParams::new(Tensor::zeros(&[3, 2, 3, 3]), None, 1, 1).unwrap();
        let (_, macs) = macs::count_macs(|| conv2d(&input, &params).unwrap());
        assert_eq!(macs, 3 * 16 * 2 * 9);
    }
}
