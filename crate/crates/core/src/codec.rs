//! Variable-bound quantization of feature tensors and b-bit symbol packing.
//!
//! A tensor z is mapped to integer symbols in [0, 2^b - 1] using its own
//! standard deviation as the scale: symbols = round(clip((2^b-1) *
//! (z / (b*sigma) + 0.5))). Dequantization inverts the affine map. The
//! receiver either trusts a transmitted sigma (`SideInfo`, default) or
//! recomputes sigma from the symbols it received (`ReceiverRecompute`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sigma below this is treated as a constant tensor: all-zero symbols,
/// sigma recorded as exactly 0.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("cannot quantize an empty tensor")]
    EmptyTensor,
    #[error("bits per symbol must be in 1..=8, got {0}")]
    BadBits(u8),
    #[error("sigma must be finite and non-negative, got {0}")]
    BadSigma(f64),
    #[error("symbol {symbol} out of range for {bits}-bit packing")]
    SymbolOutOfRange { symbol: u8, bits: u8 },
    #[error("packed payload length mismatch: expected {expected} bytes, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("side_info dequantization requires a transmitted sigma")]
    MissingSigma,
}

/// Where dequantization gets its scale from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Use the sigma computed at the sender and carried beside the payload.
    #[default]
    SideInfo,
    /// Recompute sigma from the received integer symbols.
    ReceiverRecompute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub bits: u8,
    /// Sender-side standard deviation; `None` when not transmitted.
    pub sigma: Option<f64>,
    pub sigma_mode: SigmaMode,
}

impl QuantParams {
    pub fn new(bits: u8, sigma: Option<f64>, sigma_mode: SigmaMode) -> Result<Self, CodecError> {
        if !(1..=8).contains(&bits) {
            return Err(CodecError::BadBits(bits));
        }
        if let Some(s) = sigma {
            if !s.is_finite() || s < 0.0 {
                return Err(CodecError::BadSigma(s));
            }
        }
        Ok(QuantParams { bits, sigma, sigma_mode })
    }
}

/// Integer symbols plus everything needed to invert them.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolTensor {
    pub shape: Vec<usize>,
    pub symbols: Vec<u8>,
    pub params: QuantParams,
}

/// Population standard deviation (divide by n) over all elements.
pub fn compute_sigma<T: Scalar>(z: &Tensor<T>) -> Result<f64, CodecError> {
    if z.numel() == 0 {
        return Err(CodecError::EmptyTensor);
    }
    Ok(sigma_of(z.data()))
}

fn sigma_of<T: Scalar>(values: &[T]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|v| {
            let d = v.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    var.sqrt()
}

fn round_half_away_from_zero(v: f64) -> f64 {
    // f64::round ties away from zero, which is exactly the contract here.
    v.round()
}

/// Core symbol mapping; sigma is returned as recorded (0 for constant input).
pub(crate) fn quantize_values<T: Scalar>(values: &[T], bits: u8) -> (Vec<u8>, f64) {
    let sigma = sigma_of(values);
    if sigma < SIGMA_FLOOR {
        return (vec![0u8; values.len()], 0.0);
    }
    (quantize_values_with_sigma(values, bits, sigma), sigma)
}

fn quantize_values_with_sigma<T: Scalar>(values: &[T], bits: u8, sigma: f64) -> Vec<u8> {
    let levels = ((1u16 << bits) - 1) as f64;
    let scale = 1.0 / (bits as f64 * sigma);
    values
        .iter()
        .map(|v| {
            let scaled = levels * (v.as_f64() * scale + 0.5);
            round_half_away_from_zero(scaled.clamp(0.0, levels)) as u8
        })
        .collect()
}

pub(crate) fn dequantize_values<T: Scalar>(symbols: &[u8], bits: u8, sigma: f64) -> Vec<T> {
    let levels = ((1u16 << bits) - 1) as f64;
    let span = bits as f64 * sigma;
    symbols
        .iter()
        .map(|&s| T::from_f64((s as f64 / levels - 0.5) * span))
        .collect()
}

/// Quantize with variable bound b*sigma; sigma is attached as side info.
pub fn quantize<T: Scalar>(z: &Tensor<T>, bits: u8) -> Result<SymbolTensor, CodecError> {
    if z.numel() == 0 {
        return Err(CodecError::EmptyTensor);
    }
    if !(1..=8).contains(&bits) {
        return Err(CodecError::BadBits(bits));
    }
    let (symbols, sigma) = quantize_values(z.data(), bits);
    Ok(SymbolTensor {
        shape: z.shape().to_vec(),
        symbols,
        params: QuantParams::new(bits, Some(sigma), SigmaMode::SideInfo)?,
    })
}

/// Quantize against a caller-supplied sigma instead of the tensor's own.
///
/// Senders that transmit sigma at reduced precision quantize against the
/// rounded value so both directions of the codec see the same bound.
pub fn quantize_with_sigma<T: Scalar>(
    z: &Tensor<T>,
    bits: u8,
    sigma: f64,
) -> Result<SymbolTensor, CodecError> {
    if z.numel() == 0 {
        return Err(CodecError::EmptyTensor);
    }
    if !(1..=8).contains(&bits) {
        return Err(CodecError::BadBits(bits));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(CodecError::BadSigma(sigma));
    }
    let symbols = if sigma < SIGMA_FLOOR {
        vec![0u8; z.numel()]
    } else {
        quantize_values_with_sigma(z.data(), bits, sigma)
    };
    Ok(SymbolTensor {
        shape: z.shape().to_vec(),
        symbols,
        params: QuantParams::new(bits, Some(sigma), SigmaMode::SideInfo)?,
    })
}

/// Invert the symbol mapping back to real values.
pub fn dequantize<T: Scalar>(zq: &SymbolTensor) -> Result<Tensor<T>, CodecError> {
    let bits = zq.params.bits;
    if !(1..=8).contains(&bits) {
        return Err(CodecError::BadBits(bits));
    }
    let sigma = match zq.params.sigma_mode {
        SigmaMode::SideInfo => zq.params.sigma.ok_or(CodecError::MissingSigma)?,
        SigmaMode::ReceiverRecompute => sigma_of(&zq.symbols.iter().map(|&s| s as f64).collect::<Vec<_>>()),
    };
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(CodecError::BadSigma(sigma));
    }
    let values = dequantize_values(&zq.symbols, bits, sigma);
    Tensor::new(zq.shape.clone(), values).map_err(|_| CodecError::LengthMismatch {
        expected: zq.shape.iter().product(),
        actual: zq.symbols.len(),
    })
}

pub fn packed_len(numel: usize, bits: u8) -> usize {
    (numel * bits as usize).div_ceil(8)
}

/// Pack symbols in storage order, MSB-first within each byte, zero padding
/// in the trailing byte. Length is ceil(numel*b/8).
pub fn pack_symbols(zq: &SymbolTensor) -> Result<Vec<u8>, CodecError> {
    let bits = zq.params.bits;
    if !(1..=8).contains(&bits) {
        return Err(CodecError::BadBits(bits));
    }
    let limit = if bits == 8 { u16::from(u8::MAX) } else { 1u16 << bits };
    let mut out = Vec::with_capacity(packed_len(zq.symbols.len(), bits));
    let mut acc: u16 = 0;
    let mut filled: u8 = 0;
    for &s in &zq.symbols {
        if bits < 8 && u16::from(s) >= limit {
            return Err(CodecError::SymbolOutOfRange { symbol: s, bits });
        }
        acc = (acc << bits) | u16::from(s);
        filled += bits;
        while filled >= 8 {
            filled -= 8;
            out.push((acc >> filled) as u8);
            acc &= (1u16 << filled) - 1;
        }
    }
    if filled > 0 {
        out.push((acc << (8 - filled)) as u8);
    }
    Ok(out)
}

/// Inverse of [`pack_symbols`]; sigma metadata is left to the caller.
pub fn unpack_symbols(bytes: &[u8], shape: &[usize], bits: u8) -> Result<SymbolTensor, CodecError> {
    if !(1..=8).contains(&bits) {
        return Err(CodecError::BadBits(bits));
    }
    let numel: usize = shape.iter().product();
    let expected = packed_len(numel, bits);
    if bytes.len() != expected {
        return Err(CodecError::LengthMismatch { expected, actual: bytes.len() });
    }
    let mut symbols = Vec::with_capacity(numel);
    let mut acc: u16 = 0;
    let mut filled: u8 = 0;
    let mut iter = bytes.iter();
    while symbols.len() < numel {
        if filled < bits {
            acc = (acc << 8) | u16::from(*iter.next().expect("length checked above"));
            filled += 8;
        }
        filled -= bits;
        symbols.push((acc >> filled) as u8 & (((1u16 << bits) - 1) as u8));
    }
    Ok(SymbolTensor {
        shape: shape.to_vec(),
        symbols,
        params: QuantParams::new(bits, None, SigmaMode::SideInfo)?,
    })
}
