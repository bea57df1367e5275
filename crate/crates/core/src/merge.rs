//! Dual-mask sparse merging of an expert pair.
//!
//! Two weight matrices merge into one non-negative magnitude matrix plus
//! per-expert masks and signs:
//!
//! * similarity mask: entries whose magnitudes differ by at most `tau` under
//!   the symmetric percent difference get averaged and kept by both experts;
//! * saliency masks: everywhere else, the entry goes to whichever expert has
//!   the larger |weight| * activation-norm score, and only that expert keeps
//!   it;
//! * sign matrices record each expert's original signs so reconstruction can
//!   reapply them.
//!
//! Reconstruction is element-wise: (-1)^sign * mask * merged.
//!
//! All arithmetic here is f32 on f32 inputs; bf16 rounding happens only when
//! the result is packed (see [`crate::codec`]).

use crate::error::{Error, Result};
use crate::tensor::{check_same_shape, BitMatrix, ExpertTensor, Matrix};

/// The five binary matrices produced by mask construction.
#[derive(Clone, Debug)]
pub struct MaskSet {
    /// Entries with similar magnitudes (averaged on merge).
    pub m_sim: BitMatrix,
    /// Expert-0 wins the saliency comparison here (ties go to expert 0).
    pub m_sal_i: BitMatrix,
    /// Complement of `m_sal_i`.
    pub m_sal_j: BitMatrix,
    /// Expert-0 keep mask: `m_sal_i | m_sim`.
    pub m_i: BitMatrix,
    /// Expert-1 keep mask: `m_sal_j | m_sim`.
    pub m_j: BitMatrix,
}

/// Output of merging one expert pair for one linear slot.
#[derive(Clone, Debug)]
pub struct MergeArtifacts {
    /// Non-negative merged magnitudes.
    pub w_merged: Matrix,
    pub masks: MaskSet,
    /// 1 where expert 0's weight was negative.
    pub s_i: BitMatrix,
    /// 1 where expert 1's weight was negative.
    pub s_j: BitMatrix,
}

/// Symmetric percent difference of magnitudes, element-wise in [0, 1].
///
/// Both entries exactly zero count as identical (delta 0).
pub fn similarity_delta(w_i: &ExpertTensor, w_j: &ExpertTensor) -> Result<Matrix> {
    check_same_shape("similarity_delta", w_i.shape(), w_j.shape())?;
    let (rows, cols) = w_i.shape();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            out.set(r, c, delta_scalar(w_i.values.at(r, c), w_j.values.at(r, c)));
        }
    }
    Ok(out)
}

#[inline(always)]
fn delta_scalar(a: f32, b: f32) -> f32 {
    let (a, b) = (a.abs(), b.abs());
    let denom = a + b;
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Build the similarity, saliency, and keep masks for one expert pair.
///
/// `norms_i` / `norms_j` are the per-input-feature activation L2 norms for
/// the two experts (length = in_features); the saliency score of an entry is
/// |W[o,c]| * norms[c]. Saliency ties go to expert 0.
pub fn build_masks(
    w_i: &ExpertTensor,
    w_j: &ExpertTensor,
    norms_i: &[f32],
    norms_j: &[f32],
    tau_sim: f64,
) -> Result<MaskSet> {
    check_same_shape("build_masks", w_i.shape(), w_j.shape())?;
    if !(0.0..=1.0).contains(&tau_sim) || tau_sim.is_nan() {
        return Err(Error::InvalidThreshold(tau_sim));
    }
    let (rows, cols) = w_i.shape();
    if norms_i.len() != cols {
        return Err(Error::DimensionMismatch {
            context: "build_masks norms_i",
            expected: cols,
            got: norms_i.len(),
        });
    }
    if norms_j.len() != cols {
        return Err(Error::DimensionMismatch {
            context: "build_masks norms_j",
            expected: cols,
            got: norms_j.len(),
        });
    }
    let tau = tau_sim as f32;
    let sim = BitMatrix::from_fn(rows, cols, |r, c| {
        delta_scalar(w_i.values.at(r, c), w_j.values.at(r, c)) <= tau
    });
    let sal_i = BitMatrix::from_fn(rows, cols, |r, c| {
        let a_i = w_i.values.at(r, c).abs() * norms_i[c];
        let a_j = w_j.values.at(r, c).abs() * norms_j[c];
        a_i >= a_j
    });
    let sal_j = BitMatrix::from_fn(rows, cols, |r, c| !sal_i.get(r, c));
    let keep_i = BitMatrix::from_fn(rows, cols, |r, c| sal_i.get(r, c) || sim.get(r, c));
    let keep_j = BitMatrix::from_fn(rows, cols, |r, c| sal_j.get(r, c) || sim.get(r, c));
    Ok(MaskSet {
        m_sim: sim,
        m_sal_i: sal_i,
        m_sal_j: sal_j,
        m_i: keep_i,
        m_j: keep_j,
    })
}

/// Merge two experts under the given masks.
///
/// Similar entries average their magnitudes; dissimilar entries take the
/// salient expert's magnitude. Signs are recorded per expert.
pub fn merge_pair(
    w_i: &ExpertTensor,
    w_j: &ExpertTensor,
    masks: MaskSet,
) -> Result<MergeArtifacts> {
    check_same_shape("merge_pair", w_i.shape(), w_j.shape())?;
    check_same_shape("merge_pair masks", w_i.shape(), masks.m_sim.shape())?;
    let (rows, cols) = w_i.shape();
    let mut w_merged = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let a = w_i.values.at(r, c).abs();
            let b = w_j.values.at(r, c).abs();
            let v = if masks.m_sim.get(r, c) {
                (a + b) / 2.0
            } else if masks.m_sal_i.get(r, c) {
                a
            } else {
                b
            };
            w_merged.set(r, c, v);
        }
    }
    let s_i = BitMatrix::from_fn(rows, cols, |r, c| w_i.values.at(r, c) < 0.0);
    let s_j = BitMatrix::from_fn(rows, cols, |r, c| w_j.values.at(r, c) < 0.0);
    Ok(MergeArtifacts {
        w_merged,
        masks,
        s_i,
        s_j,
    })
}

/// Rebuild one expert's dense weights from merge artifacts (exact f32).
pub fn reconstruct(artifacts: &MergeArtifacts, expert_pos: usize) -> ExpertTensor {
    assert!(expert_pos < 2);
    let (rows, cols) = artifacts.w_merged.shape();
    let (mask, sign) = if expert_pos == 0 {
        (&artifacts.masks.m_i, &artifacts.s_i)
    } else {
        (&artifacts.masks.m_j, &artifacts.s_j)
    };
    let values = Matrix::from_fn(rows, cols, |r, c| {
        if !mask.get(r, c) {
            0.0
        } else if sign.get(r, c) {
            -artifacts.w_merged.at(r, c)
        } else {
            artifacts.w_merged.at(r, c)
        }
    });
    ExpertTensor::from_f32(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(rows: usize, cols: usize, v: Vec<f32>) -> ExpertTensor {
        ExpertTensor::from_f32(Matrix::new(rows, cols, v))
    }

    fn worked_pair() -> (ExpertTensor, ExpertTensor) {
        (
            tensor(2, 2, vec![0.5, -1.0, 0.25, 2.0]),
            tensor(2, 2, vec![0.6, 1.0, -1.0, 0.1]),
        )
    }

    fn bits(m: &BitMatrix) -> Vec<u8> {
        (0..m.rows())
            .flat_map(|r| (0..m.cols()).map(move |c| (r, c)))
            .map(|(r, c)| m.get(r, c) as u8)
            .collect()
    }

    #[test]
    fn delta_values() {
        let a = tensor(1, 3, vec![0.5, 1.0, 0.3]);
        let b = tensor(1, 3, vec![0.6, -1.0, 0.0]);
        let d = similarity_delta(&a, &b).unwrap();
        assert!((d.at(0, 0) - 0.1 / 1.1).abs() < 1e-7);
        assert_eq!(d.at(0, 1), 0.0); // equal magnitude, opposite sign
        assert_eq!(d.at(0, 2), 1.0); // paired with zero
    }

    #[test]
    fn delta_zero_over_zero_is_zero() {
        let a = tensor(1, 1, vec![0.0]);
        let d = similarity_delta(&a, &a).unwrap();
        assert_eq!(d.at(0, 0), 0.0);
    }

    #[test]
    fn delta_shape_mismatch() {
        let a = tensor(1, 2, vec![0.0; 2]);
        let b = tensor(2, 1, vec![0.0; 2]);
        assert!(matches!(
            similarity_delta(&a, &b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn worked_masks() {
        let (w_i, w_j) = worked_pair();
        let norms = vec![1.0, 1.0];
        let m = build_masks(&w_i, &w_j, &norms, &norms, 0.4).unwrap();
        assert_eq!(bits(&m.m_sim), vec![1, 1, 0, 0]);
        assert_eq!(bits(&m.m_sal_i), vec![0, 1, 0, 1]);
        assert_eq!(bits(&m.m_sal_j), vec![1, 0, 1, 0]);
        assert_eq!(bits(&m.m_i), vec![1, 1, 0, 1]);
        assert_eq!(bits(&m.m_j), vec![1, 1, 1, 0]);
    }

    #[test]
    fn identical_experts_fully_similar() {
        let (w_i, _) = worked_pair();
        let norms = vec![2.0, 3.0];
        let m = build_masks(&w_i, &w_i, &norms, &norms, 0.0).unwrap();
        assert_eq!(bits(&m.m_sim), vec![1; 4]);
        assert_eq!(bits(&m.m_i), vec![1; 4]);
        assert_eq!(bits(&m.m_j), vec![1; 4]);
    }

    #[test]
    fn saliency_tie_goes_to_expert_zero() {
        let a = tensor(1, 1, vec![0.5]);
        let b = tensor(1, 1, vec![-0.5]);
        let m = build_masks(&a, &b, &[1.0], &[1.0], 0.0).unwrap();
        assert!(m.m_sal_i.get(0, 0));
        assert!(!m.m_sal_j.get(0, 0));
    }

    #[test]
    fn invalid_threshold_rejected() {
        let (w_i, w_j) = worked_pair();
        for tau in [-0.1, 1.5, f64::NAN] {
            assert!(matches!(
                build_masks(&w_i, &w_j, &[1.0, 1.0], &[1.0, 1.0], tau),
                Err(Error::InvalidThreshold(_))
            ));
        }
    }

    #[test]
    fn worked_merge_and_reconstruct() {
        let (w_i, w_j) = worked_pair();
        let norms = vec![1.0, 1.0];
        let masks = build_masks(&w_i, &w_j, &norms, &norms, 0.4).unwrap();
        let art = merge_pair(&w_i, &w_j, masks).unwrap();
        assert_eq!(art.w_merged.values(), &[0.55, 1.0, 1.0, 2.0]);
        assert_eq!(bits(&art.s_i), vec![0, 1, 0, 0]);
        assert_eq!(bits(&art.s_j), vec![0, 0, 1, 0]);
        let r0 = reconstruct(&art, 0);
        let r1 = reconstruct(&art, 1);
        assert_eq!(r0.values.values(), &[0.55, -1.0, 0.0, 2.0]);
        assert_eq!(r1.values.values(), &[0.55, 1.0, -1.0, 0.0]);
    }

    #[test]
    fn self_merge_is_identity() {
        let w = tensor(2, 2, vec![0.5, -1.0, 0.25, 2.0]);
        let masks = build_masks(&w, &w, &[1.0, 1.0], &[1.0, 1.0], 0.4).unwrap();
        let art = merge_pair(&w, &w, masks).unwrap();
        assert_eq!(art.w_merged.values(), &[0.5, 1.0, 0.25, 2.0]);
        for pos in 0..2 {
            assert_eq!(reconstruct(&art, pos).values.values(), w.values.values());
        }
    }

    #[test]
    fn negated_pair_restores_signs() {
        let w = tensor(2, 2, vec![0.5, -1.0, 0.25, 2.0]);
        let neg = tensor(2, 2, w.values.values().iter().map(|v| -v).collect());
        let masks = build_masks(&w, &neg, &[1.0, 1.0], &[1.0, 1.0], 0.4).unwrap();
        let art = merge_pair(&w, &neg, masks).unwrap();
        assert_eq!(art.w_merged.values(), &[0.5, 1.0, 0.25, 2.0]);
        assert_eq!(reconstruct(&art, 0).values.values(), w.values.values());
        assert_eq!(reconstruct(&art, 1).values.values(), neg.values.values());
    }
}
