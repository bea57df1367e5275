//! The packed bfloat16 format ("pbf16").
//!
//! A merged expert pair needs, per weight entry: one non-negative bf16
//! magnitude, two mask bits and two sign bits. Weight exponents cluster in a
//! narrow band, so after clamping the exponent into [112, 143] its value fits
//! in 5 bits and the freed exponent bits plus the vacated sign bit hold the
//! per-expert metadata. One 16-bit word stores everything:
//!
//! ```text
//! bit 15   sign of expert 0
//! bit 14   sign of expert 1
//! bit 13   mask of expert 0
//! bit 12   mask of expert 1
//! bits 11-7  shifted exponent  e' = clamp(e, 112, 143) - 112
//! bits 6-0   mantissa
//! ```
//!
//! Decoding rebuilds a plain bf16 word: masked-out entries decode to +0.0,
//! everything else to (sign, e' + 112, mantissa).

use crate::bf16::Bf16Word;
use crate::error::{Error, Result};
use crate::merge::MergeArtifacts;
use crate::tensor::ExpertTensor;

/// Lowest exponent representable in the packed format.
pub const EXP_LOW: u16 = 112;
/// Highest exponent representable in the packed format.
pub const EXP_HIGH: u16 = 143;

const EXP_FIELD_MASK: u16 = 0x0F80;
const MANTISSA_MASK: u16 = 0x007F;
const EXP_REBASE: u16 = EXP_LOW << 7; // 0x3800

/// One packed word carrying a magnitude plus two masks and two signs.
#[derive(Copy, Clone, PartialEq, Eq, Debug, Default)]
#[repr(transparent)]
pub struct PackedWord(pub u16);

impl PackedWord {
    #[inline(always)]
    pub const fn from_bits(bits: u16) -> Self {
        Self(bits)
    }

    #[inline(always)]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    #[inline(always)]
    pub const fn mask_bit(self, expert_pos: usize) -> u16 {
        (self.0 >> (13 - expert_pos)) & 1
    }

    #[inline(always)]
    pub const fn sign_bit(self, expert_pos: usize) -> u16 {
        (self.0 >> (15 - expert_pos)) & 1
    }
}

/// Counts of exponents pushed back into range by [`shift_exponent`].
///
/// Saturation is not an error; callers accumulate counts (merging partial
/// counters after parallel sections) and may report them.
#[derive(Copy, Clone, Default, Debug, PartialEq, Eq)]
pub struct SaturationCount {
    /// Exponents below 112 rounded up (includes exact zeros).
    pub rounded_up: u64,
    /// Exponents above 143 clamped down.
    pub clamped_down: u64,
}

impl SaturationCount {
    pub fn total(&self) -> u64 {
        self.rounded_up + self.clamped_down
    }

    pub fn merge(&mut self, other: SaturationCount) {
        self.rounded_up += other.rounded_up;
        self.clamped_down += other.clamped_down;
    }
}

/// Clamp a non-negative bf16 magnitude's exponent into [112, 143].
///
/// The mantissa is preserved; exponents below the band round up to 112 (so an
/// exact zero becomes 2^-15) and exponents above clamp down to 143. Each
/// saturation increments `sat`.
pub fn shift_exponent(w: Bf16Word, sat: &mut SaturationCount) -> Bf16Word {
    assert_eq!(
        w.sign(),
        0,
        "exponent shift expects a non-negative magnitude"
    );
    let e = w.exponent();
    assert!(e != 0xFF, "NaN/Inf magnitudes must be rejected upstream");
    let clamped = if e < EXP_LOW {
        sat.rounded_up += 1;
        EXP_LOW
    } else if e > EXP_HIGH {
        sat.clamped_down += 1;
        EXP_HIGH
    } else {
        e
    };
    Bf16Word::from_bits((clamped << 7) | w.mantissa())
}

/// Pack an exponent-shifted magnitude with two sign bits and two mask bits.
#[inline]
pub fn pack_word(magnitude: Bf16Word, s0: u16, s1: u16, m0: u16, m1: u16) -> PackedWord {
    debug_assert_eq!(magnitude.sign(), 0);
    debug_assert!((EXP_LOW..=EXP_HIGH).contains(&magnitude.exponent()));
    debug_assert!(s0 <= 1 && s1 <= 1 && m0 <= 1 && m1 <= 1);
    let shifted = magnitude.exponent() - EXP_LOW;
    PackedWord(
        (s0 << 15) | (s1 << 14) | (m0 << 13) | (m1 << 12) | (shifted << 7) | magnitude.mantissa(),
    )
}

/// Decode one expert's weight from a packed word.
///
/// Masked-out entries decode to bf16 +0.0; otherwise the stored exponent is
/// rebased by +112 and the selected sign bit goes back on top.
///
/// The mask bit is replicated across the word by an arithmetic shift instead
/// of tested: branching on it would mispredict half the time on real mask
/// patterns and dominate the fused GEMV's inner loop.
#[inline(always)]
pub fn decode_word(p: PackedWord, expert_pos: usize) -> Bf16Word {
    debug_assert!(expert_pos < 2);
    // Bit (13 - expert_pos) moved to bit 15, then smeared: 0xFFFF or 0x0000.
    let keep = ((p.0 << (2 + expert_pos)) as i16 >> 15) as u16;
    // Bit (15 - expert_pos) moved to bit 15.
    let sign = (p.0 << expert_pos) & 0x8000;
    // Rebasing the 5-bit exponent cannot carry past bit 11, so the mantissa
    // rides along in the same add.
    let magnitude = (p.0 & (EXP_FIELD_MASK | MANTISSA_MASK)) + EXP_REBASE;
    Bf16Word::from_bits((sign | magnitude) & keep)
}

/// A packed expert pair: one word per weight entry, row-major.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PackedExpertPair {
    rows: usize,
    cols: usize,
    words: Vec<PackedWord>,
    /// Indices of the two source experts (position 0, position 1).
    pub pair_id: (usize, usize),
}

impl PackedExpertPair {
    pub fn from_words(
        rows: usize,
        cols: usize,
        words: Vec<PackedWord>,
        pair_id: (usize, usize),
    ) -> Self {
        assert_eq!(words.len(), rows * cols);
        Self {
            rows,
            cols,
            words,
            pair_id,
        }
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

    pub fn words(&self) -> &[PackedWord] {
        &self.words
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[PackedWord] {
        &self.words[r * self.cols..(r + 1) * self.cols]
    }

    /// Every entry must belong to at least one expert (mask completeness).
    pub fn mask_complete(&self) -> bool {
        self.words.iter().all(|w| w.0 & 0x3000 != 0)
    }

    /// Storage footprint in bytes (two per word).
    pub fn byte_len(&self) -> usize {
        self.words.len() * 2
    }
}

/// Pack merge artifacts into the pbf16 word matrix.
///
/// Magnitudes are rounded to bf16, exponent-shifted (counting saturations
/// into `sat`), then packed with the per-expert signs and masks.
pub fn pack_pair(
    artifacts: &MergeArtifacts,
    pair_id: (usize, usize),
    sat: &mut SaturationCount,
) -> Result<PackedExpertPair> {
    let shape = artifacts.w_merged.shape();
    for (name, other) in [
        ("s_i", artifacts.s_i.shape()),
        ("s_j", artifacts.s_j.shape()),
        ("m_i", artifacts.masks.m_i.shape()),
        ("m_j", artifacts.masks.m_j.shape()),
    ] {
        if other != shape {
            return Err(Error::ShapeMismatch {
                context: name,
                a: shape,
                b: other,
            });
        }
    }
    let (rows, cols) = shape;
    let mut words = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mag = Bf16Word::from_f32(artifacts.w_merged.at(r, c));
            let shifted = shift_exponent(mag, sat);
            words.push(pack_word(
                shifted,
                artifacts.s_i.bit(r, c),
                artifacts.s_j.bit(r, c),
                artifacts.masks.m_i.bit(r, c),
                artifacts.masks.m_j.bit(r, c),
            ));
        }
    }
    Ok(PackedExpertPair::from_words(rows, cols, words, pair_id))
}

/// Decode the full dense reconstruction of one expert of a pair.
pub fn unpack_pair(p: &PackedExpertPair, expert_pos: usize) -> ExpertTensor {
    assert!(expert_pos < 2);
    let words: Vec<u16> = p
        .words
        .iter()
        .map(|&w| decode_word(w, expert_pos).to_bits())
        .collect();
    ExpertTensor::from_bf16_words(p.rows, p.cols, &words)
}
