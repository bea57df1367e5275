//! Symmetric group quantization of merged magnitudes.
//!
//! Merged magnitudes are non-negative, so "symmetric, no zero point" comes
//! out as unsigned levels 0..2^b-1 with a per-group scale max/(2^b-1).
//! Groups are contiguous runs of the flattened (row-major) matrix; the last
//! group may be short. Codes bit-pack LSB-first for storage; scales ride
//! along as an f32 sidecar tensor.

use crate::container::{Container, TensorData, TensorEntry};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub shape: (usize, usize),
    pub bits: u32,
    pub group_size: usize,
    pub codes: Vec<u32>,
    pub scales: Vec<f32>,
}

/// Quantize a non-negative matrix with per-group scales.
///
/// Per group g: scale_g = max(g)/(2^bits - 1), or 1 when the group is all
/// zero; codes are round(value/scale) in 0..=2^bits-1.
pub fn quantize_group(w_merged: &Matrix, bits: u32, group_size: usize) -> Result<QuantizedTensor> {
    if !(2..=16).contains(&bits) {
        return Err(Error::InvalidBits(bits));
    }
    if group_size == 0 {
        return Err(Error::DomainError("group_size must be >= 1".into()));
    }
    debug_assert!(w_merged.values().iter().all(|&v| v >= 0.0));
    let levels = (1u32 << bits) - 1;
    let flat = w_merged.values();
    let mut codes = Vec::with_capacity(flat.len());
    let mut scales = Vec::with_capacity(flat.len().div_ceil(group_size));
    for group in flat.chunks(group_size) {
        let max = group.iter().fold(0.0f64, |m, &v| m.max(v as f64));
        if max == 0.0 {
            scales.push(1.0);
            codes.extend(std::iter::repeat_n(0u32, group.len()));
        } else {
            scales.push((max / levels as f64) as f32);
            for &v in group {
                // round(v/scale) evaluated as v*levels/max keeps exact
                // half-way cases (e.g. max=4, levels=7, v=2) exact.
                let q = ((v as f64) * levels as f64 / max).round() as i64;
                codes.push(q.clamp(0, levels as i64) as u32);
            }
        }
    }
    Ok(QuantizedTensor {
        shape: w_merged.shape(),
        bits,
        group_size,
        codes,
        scales,
    })
}

impl QuantizedTensor {
    /// Dequantize: value = code * scale.
    pub fn dequantize(&self) -> Matrix {
        let (rows, cols) = self.shape;
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f32 * self.scales[i / self.group_size])
            .collect();
        Matrix::new(rows, cols, data)
    }
}

/// Average stored bits per original weight when a merged pair carries two
/// sign bits, a radix-3 compressed mask pair (log2(3) bits), b-bit codes and
/// a per-group scale, all amortized over the two source experts.
pub fn avg_bitwidth(quant_bits: u32, group_size: u32, scale_bits: u32) -> f64 {
    assert!(quant_bits >= 1 && group_size >= 1 && scale_bits >= 1);
    (2.0 + 3f64.log2() + quant_bits as f64 + scale_bits as f64 / group_size as f64) / 2.0
}

/// Pack codes into bytes, LSB-first.
pub fn pack_codes(codes: &[u32], bits: u32) -> Vec<u8> {
    assert!((1..=16).contains(&bits));
    let total_bits = codes.len() * bits as usize;
    let mut out = vec![0u8; total_bits.div_ceil(8)];
    let mut cursor = 0usize;
    for &code in codes {
        debug_assert!(code < (1u32 << bits));
        for b in 0..bits as usize {
            if code & (1 << b) != 0 {
                out[(cursor + b) / 8] |= 1 << ((cursor + b) % 8);
            }
        }
        cursor += bits as usize;
    }
    out
}

/// Unpack `n` codes from LSB-first packed bytes.
pub fn unpack_codes(raw: &[u8], bits: u32, n: usize) -> Vec<u32> {
    assert!((1..=16).contains(&bits));
    let mut out = Vec::with_capacity(n);
    let mut cursor = 0usize;
    for _ in 0..n {
        let mut code = 0u32;
        for b in 0..bits as usize {
            let idx = cursor + b;
            if raw[idx / 8] & (1 << (idx % 8)) != 0 {
                code |= 1 << b;
            }
        }
        out.push(code);
        cursor += bits as usize;
    }
    out
}

/// Store a quantized tensor as `{name}` (packed codes) plus `{name}/scales`.
pub fn add_quantized_tensor(c: &mut Container, name: &str, qt: &QuantizedTensor) {
    c.tensors.push(TensorEntry {
        name: name.to_string(),
        shape: vec![qt.shape.0, qt.shape.1],
        data: TensorData::Quant {
            bits: qt.bits,
            group: qt.group_size as u32,
            raw: pack_codes(&qt.codes, qt.bits),
        },
    });
    c.tensors.push(TensorEntry {
        name: format!("{name}/scales"),
        shape: vec![qt.scales.len()],
        data: TensorData::F32(qt.scales.clone()),
    });
}

/// Load a quantized tensor stored by [`add_quantized_tensor`].
pub fn read_quantized_tensor(c: &Container, name: &str) -> Result<QuantizedTensor> {
    let entry = c
        .tensor(name)
        .ok_or_else(|| Error::CorruptHeader(format!("missing tensor {name}")))?;
    let (bits, group, raw) = match &entry.data {
        TensorData::Quant { bits, group, raw } => (*bits, *group, raw),
        other => {
            return Err(Error::CorruptHeader(format!(
                "tensor {name} has dtype {}, expected quantized codes",
                other.dtype_name()
            )))
        }
    };
    if entry.shape.len() != 2 {
        return Err(Error::CorruptHeader(format!(
            "quantized tensor {name} must be 2-d"
        )));
    }
    let n = entry.shape[0] * entry.shape[1];
    let scales_entry = c
        .tensor(&format!("{name}/scales"))
        .ok_or_else(|| Error::CorruptHeader(format!("missing sidecar {name}/scales")))?;
    let scales = match &scales_entry.data {
        TensorData::F32(v) => v.clone(),
        _ => {
            return Err(Error::CorruptHeader(format!(
                "sidecar {name}/scales is not f32"
            )))
        }
    };
    if scales.len() != n.div_ceil(group as usize) {
        return Err(Error::CorruptHeader(format!(
            "sidecar {name}/scales has {} entries, expected {}",
            scales.len(),
            n.div_ceil(group as usize)
        )));
    }
    Ok(QuantizedTensor {
        shape: (entry.shape[0], entry.shape[1]),
        bits,
        group_size: group as usize,
        codes: unpack_codes(raw, bits, n),
        scales,
    })
}
