//! Dense matrices and expert weight tensors.
//!
//! Everything at this scale is a flat row-major `Vec<f32>`. Weight tensors
//! carry a storage dtype tag; values tagged `Bf16` are always held in f32
//! form but are exactly representable in bf16.

use crate::bf16::Bf16Word;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Storage dtype of an [`ExpertTensor`].
#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    Bf16,
}

/// Row-major f32 matrix.
#[derive(Clone, PartialEq, Debug)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline(always)]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline(always)]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline(always)]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline(always)]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Binary matrix (masks, sign patterns), one byte per entry.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c) as u8);
            }
        }
        Self { rows, cols, data }
    }

    #[inline(always)]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline(always)]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline(always)]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c] != 0
    }

    #[inline(always)]
    pub fn bit(&self, r: usize, c: usize) -> u16 {
        self.data[r * self.cols + c] as u16
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b != 0).count()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// One expert weight matrix, shape (out_features x in_features).
#[derive(Clone, PartialEq, Debug)]
pub struct ExpertTensor {
    pub values: Matrix,
    pub dtype: Dtype,
}

impl ExpertTensor {
    /// Wrap an f32 matrix. All entries must be finite.
    pub fn from_f32(values: Matrix) -> Self {
        debug_assert!(values.values().iter().all(|v| v.is_finite()));
        Self {
            values,
            dtype: Dtype::F32,
        }
    }

    /// Build a bf16-tagged tensor from raw bf16 words, row-major.
    pub fn from_bf16_words(rows: usize, cols: usize, words: &[u16]) -> Self {
        assert_eq!(words.len(), rows * cols);
        let data = words
            .iter()
            .map(|&w| Bf16Word::from_bits(w).to_f32())
            .collect();
        Self {
            values: Matrix::new(rows, cols, data),
            dtype: Dtype::Bf16,
        }
    }

    /// Round every entry to bf16 and retag. Idempotent.
    pub fn to_bf16(&self) -> Self {
        let values = Matrix::new(
            self.values.rows(),
            self.values.cols(),
            self.values
                .values()
                .iter()
                .map(|&v| Bf16Word::from_f32(v).to_f32())
                .collect(),
        );
        Self {
            values,
            dtype: Dtype::Bf16,
        }
    }

    /// Raw bf16 words of a bf16-tagged tensor.
    pub fn bf16_words(&self) -> Vec<u16> {
        debug_assert_eq!(self.dtype, Dtype::Bf16);
        self.values
            .values()
            .iter()
            .map(|&v| Bf16Word::from_f32(v).to_bits())
            .collect()
    }

    pub fn out_features(&self) -> usize {
        self.values.rows()
    }

    pub fn in_features(&self) -> usize {
        self.values.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }
}

pub(crate) fn check_same_shape(
    context: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch { context, a, b });
    }
    Ok(())
}
