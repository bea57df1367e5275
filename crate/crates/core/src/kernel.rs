//! Matrix-vector kernels over dense and packed expert weights.
//!
//! The fused path decodes each packed word in registers right before its
//! multiply, never materializing the dense matrix. To keep fused and dense
//! results bit-identical, every path accumulates each output row in a single
//! f32 register in ascending column order; parallelism is across rows only.

use crate::codec::{decode_word, unpack_pair, PackedExpertPair};
use crate::error::{Error, Result};
use crate::tensor::{ExpertTensor, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::time::Instant;

/// Below this element count the row loop runs sequentially; fan-out overhead
/// would dominate on desk-scale layers.
const PAR_THRESHOLD: usize = 1 << 16;

#[inline(always)]
fn dot(row: &[f32], x: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (w, xv) in row.iter().zip(x) {
        acc += w * xv;
    }
    acc
}

/// Plain matvec for router weights and other raw matrices.
pub(crate) fn matvec(m: &Matrix, x: &[f32]) -> Vec<f32> {
    assert_eq!(m.cols(), x.len());
    (0..m.rows()).map(|r| dot(m.row(r), x)).collect()
}

/// Dense baseline: y[o] = sum_c W[o,c] * x[c], f32 accumulation per row.
pub fn gemv_reference(w: &ExpertTensor, x: &[f32]) -> Result<Vec<f32>> {
    if w.in_features() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "gemv_reference",
            expected: w.in_features(),
            got: x.len(),
        });
    }
    let rows = w.out_features();
    if rows * w.in_features() >= PAR_THRESHOLD {
        Ok((0..rows)
            .into_par_iter()
            .map(|r| dot(w.values.row(r), x))
            .collect())
    } else {
        Ok((0..rows).map(|r| dot(w.values.row(r), x)).collect())
    }
}

#[inline(always)]
fn fused_row(row: &[crate::codec::PackedWord], expert_pos: usize, x: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (w, xv) in row.iter().zip(x) {
        // Decode in registers; the multiply sees the same bf16 value the
        // dense path reads from memory.
        acc += decode_word(*w, expert_pos).to_f32() * xv;
    }
    acc
}

/// Fused kernel: decode each packed word on the fly inside the inner loop.
///
/// Bit-identical to `gemv_reference(&unpack_pair(p, expert_pos), x)`.
pub fn gemv_fused(p: &PackedExpertPair, expert_pos: usize, x: &[f32]) -> Result<Vec<f32>> {
    assert!(expert_pos < 2);
    if p.cols() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "gemv_fused",
            expected: p.cols(),
            got: x.len(),
        });
    }
    let rows = p.rows();
    if rows * p.cols() >= PAR_THRESHOLD {
        Ok((0..rows)
            .into_par_iter()
            .map(|r| fused_row(p.row(r), expert_pos, x))
            .collect())
    } else {
        Ok((0..rows)
            .map(|r| fused_row(p.row(r), expert_pos, x))
            .collect())
    }
}

/// Two-pass baseline for benchmarking: decode the whole matrix into a bf16
/// scratch buffer, then run the dense product over the buffer.
pub fn gemv_decode_then_dense(
    p: &PackedExpertPair,
    expert_pos: usize,
    x: &[f32],
) -> Result<Vec<f32>> {
    assert!(expert_pos < 2);
    if p.cols() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "gemv_decode_then_dense",
            expected: p.cols(),
            got: x.len(),
        });
    }
    let decoded: Vec<u16> = p
        .words()
        .iter()
        .map(|&w| decode_word(w, expert_pos).to_bits())
        .collect();
    let rows = p.rows();
    let cols = p.cols();
    let body = |r: usize| {
        let row = &decoded[r * cols..(r + 1) * cols];
        let mut acc = 0.0f32;
        for (w, xv) in row.iter().zip(x) {
            acc += crate::bf16::Bf16Word::from_bits(*w).to_f32() * xv;
        }
        acc
    };
    if rows * cols >= PAR_THRESHOLD {
        Ok((0..rows).into_par_iter().map(body).collect())
    } else {
        Ok((0..rows).map(body).collect())
    }
}

/// Timing and traffic report from [`bench_gemv`].
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: usize,
    pub cols: usize,
    pub iters: usize,
    pub seed: u64,
    pub fused_ns_per_call: u128,
    pub reference_ns_per_call: u128,
    pub decode_then_dense_ns_per_call: u128,
    /// Weight bytes each path touches per call (excludes the x/y vectors,
    /// which are identical across paths).
    pub fused_weight_bytes_per_call: u64,
    pub reference_weight_bytes_per_call: u64,
    pub decode_then_dense_weight_bytes_per_call: u64,
    pub vector_bytes_per_call: u64,
    pub low_confidence: bool,
}

fn median_ns(mut samples: Vec<u128>) -> u128 {
    samples.sort_unstable();
    samples[samples.len() / 2]
}

/// Time the three GEMV paths on a random packed pair.
///
/// Returns median-of-`iters` wall time per call and the bytes each path
/// touches. The dense reference multiplies the f32 materialization of the
/// same decoded weights, so all paths do identical arithmetic.
pub fn bench_gemv(rows: usize, cols: usize, iters: usize, seed: u64) -> BenchReport {
    assert!(rows >= 1 && cols >= 1 && iters >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<crate::codec::PackedWord> = (0..rows * cols)
        .map(|_| {
            // Force mask completeness so the workload matches real pairs.
            let w: u16 = rng.random();
            if w & 0x3000 == 0 {
                crate::codec::PackedWord::from_bits(w | 0x1000)
            } else {
                crate::codec::PackedWord::from_bits(w)
            }
        })
        .collect();
    let packed = PackedExpertPair::from_words(rows, cols, words, (0, 1));
    let x: Vec<f32> = (0..cols).map(|_| rng.random::<f32>() - 0.5).collect();
    let dense = unpack_pair(&packed, 0);

    let time_path = |f: &dyn Fn() -> Vec<f32>| -> u128 {
        let mut samples = Vec::with_capacity(iters);
        for _ in 0..iters {
            let t0 = Instant::now();
            let y = f();
            std::hint::black_box(&y);
            samples.push(t0.elapsed().as_nanos());
        }
        median_ns(samples)
    };

    let fused_ns = time_path(&|| gemv_fused(&packed, 0, &x).unwrap());
    let reference_ns = time_path(&|| gemv_reference(&dense, &x).unwrap());
    let decode_ns = time_path(&|| gemv_decode_then_dense(&packed, 0, &x).unwrap());

    let n = (rows * cols) as u64;
    BenchReport {
        rows,
        cols,
        iters,
        seed,
        fused_ns_per_call: fused_ns,
        reference_ns_per_call: reference_ns,
        decode_then_dense_ns_per_call: decode_ns,
        // fused: one packed read; reference: one f32 read;
        // decode-then-dense: packed read + bf16 write + bf16 reread.
        fused_weight_bytes_per_call: 2 * n,
        reference_weight_bytes_per_call: 4 * n,
        decode_then_dense_weight_bytes_per_call: 6 * n,
        vector_bytes_per_call: 4 * (rows + cols) as u64,
        low_confidence: iters == 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{pack_pair, SaturationCount};
    use crate::merge::{build_masks, merge_pair};
    use crate::tensor::Matrix;

    #[test]
    fn reference_identity_matrix() {
        let w = ExpertTensor::from_f32(Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        assert_eq!(gemv_reference(&w, &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn reference_hand_dot_products() {
        let w = ExpertTensor::from_f32(Matrix::new(2, 2, vec![0.55, -1.0, 0.0, 2.0]));
        assert_eq!(gemv_reference(&w, &[1.0, 2.0]).unwrap(), vec![-1.45, 4.0]);
    }

    #[test]
    fn reference_zero_matrix() {
        let w = ExpertTensor::from_f32(Matrix::zeros(3, 2));
        assert_eq!(gemv_reference(&w, &[1.0, 2.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn reference_rejects_bad_width() {
        let w = ExpertTensor::from_f32(Matrix::zeros(2, 3));
        assert!(matches!(
            gemv_reference(&w, &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn worked_packed() -> PackedExpertPair {
        let w_i = ExpertTensor::from_f32(Matrix::new(2, 2, vec![0.5, -1.0, 0.25, 2.0]));
        let w_j = ExpertTensor::from_f32(Matrix::new(2, 2, vec![0.6, 1.0, -1.0, 0.1]));
        let norms = vec![1.0, 1.0];
        let masks = build_masks(&w_i, &w_j, &norms, &norms, 0.4).unwrap();
        let art = merge_pair(&w_i, &w_j, masks).unwrap();
        let mut sat = SaturationCount::default();
        pack_pair(&art, (0, 1), &mut sat).unwrap()
    }

    #[test]
    fn fused_matches_reference_on_worked_pair() {
        let packed = worked_packed();
        let x = vec![1.0, 2.0];
        for pos in 0..2 {
            let dense = unpack_pair(&packed, pos);
            let want = gemv_reference(&dense, &x).unwrap();
            let got = gemv_fused(&packed, pos, &x).unwrap();
            assert_eq!(got, want);
        }
        // 0.55 became bf16 0.55078125: y0 = 0.55078125 - 2.0.
        let y = gemv_fused(&packed, 0, &x).unwrap();
        assert_eq!(y, vec![0.55078125f32 - 2.0, 4.0]);
    }

    #[test]
    fn fully_pruned_position_yields_zero() {
        // Header 0b0010 -> only expert 0's mask set.
        let words = vec![crate::codec::PackedWord::from_bits(0x2780); 4];
        let p = PackedExpertPair::from_words(2, 2, words, (0, 1));
        let y = gemv_fused(&p, 1, &[1.0, 1.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn decode_then_dense_matches_fused() {
        let packed = worked_packed();
        let x = vec![0.25, -3.0];
        for pos in 0..2 {
            assert_eq!(
                gemv_decode_then_dense(&packed, pos, &x).unwrap(),
                gemv_fused(&packed, pos, &x).unwrap()
            );
        }
    }

    #[test]
    fn fused_is_linear_in_x() {
        let packed = worked_packed();
        let x = vec![0.7f32, -1.3];
        let a = 3.25f32;
        let scaled: Vec<f32> = x.iter().map(|v| a * v).collect();
        let y1 = gemv_fused(&packed, 0, &scaled).unwrap();
        let y2 = gemv_fused(&packed, 0, &x).unwrap();
        for (lhs, rhs) in y1.iter().zip(y2.iter().map(|v| a * v)) {
            assert!(
                (lhs - rhs).abs() <= 1e-6 * rhs.abs().max(1e-20),
                "{lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn bench_smoke() {
        let r = bench_gemv(1, 1, 10, 7);
        assert!(r.fused_ns_per_call > 0);
        assert!(r.reference_ns_per_call > 0);
        assert!(r.decode_then_dense_ns_per_call > 0);
        assert!(!r.low_confidence);
        assert!(bench_gemv(1, 1, 1, 7).low_confidence);
    }

    #[test]
    fn bench_traffic_accounting() {
        let r = bench_gemv(8, 8, 2, 0);
        assert_eq!(r.fused_weight_bytes_per_call, 2 * 64);
        assert_eq!(r.decode_then_dense_weight_bytes_per_call, 6 * 64);
        assert!(r.decode_then_dense_weight_bytes_per_call >= 2 * r.fused_weight_bytes_per_call);
    }
}
