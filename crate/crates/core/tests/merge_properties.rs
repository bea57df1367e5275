//! Property tests for the merge invariants: mask algebra, threshold
//! monotonicity, scale equivariance, reconstruction support, and the
//! similar-entry error bound.

use proptest::collection::vec;
use proptest::prelude::*;
use pzmoe_core::merge::{build_masks, merge_pair, reconstruct, similarity_delta};
use pzmoe_core::{ExpertTensor, Matrix};

#[derive(Debug, Clone)]
struct PairCase {
    rows: usize,
    cols: usize,
    w_i: Vec<f32>,
    w_j: Vec<f32>,
    norms_i: Vec<f32>,
    norms_j: Vec<f32>,
    tau: f64,
}

fn weight() -> impl Strategy<Value = f32> {
    prop_oneof![
        4 => -4.0f32..4.0,
        1 => Just(0.0f32),
    ]
}

fn pair_case() -> impl Strategy<Value = PairCase> {
    (1usize..8, 1usize..8, 0.0f64..=1.0).prop_flat_map(|(rows, cols, tau)| {
        let n = rows * cols;
        (
            vec(weight(), n..=n),
            vec(weight(), n..=n),
            vec(0.01f32..4.0, cols..=cols),
            vec(0.01f32..4.0, cols..=cols),
        )
            .prop_map(move |(w_i, w_j, norms_i, norms_j)| PairCase {
                rows,
                cols,
                w_i,
                w_j,
                norms_i,
                norms_j,
                tau,
            })
    })
}

impl PairCase {
    fn tensors(&self) -> (ExpertTensor, ExpertTensor) {
        (
            ExpertTensor::from_f32(Matrix::new(self.rows, self.cols, self.w_i.clone())),
            ExpertTensor::from_f32(Matrix::new(self.rows, self.cols, self.w_j.clone())),
        )
    }
}

proptest! {
    #[test]
    fn mask_algebra_holds(case in pair_case()) {
        let (w_i, w_j) = case.tensors();
        let m = build_masks(&w_i, &w_j, &case.norms_i, &case.norms_j, case.tau).unwrap();
        for r in 0..case.rows {
            for c in 0..case.cols {
                // Saliency masks are complementary.
                prop_assert!(m.m_sal_i.get(r, c) != m.m_sal_j.get(r, c));
                // Keep masks are saliency-or-similarity, and jointly cover.
                prop_assert_eq!(m.m_i.get(r, c), m.m_sal_i.get(r, c) || m.m_sim.get(r, c));
                prop_assert_eq!(m.m_j.get(r, c), m.m_sal_j.get(r, c) || m.m_sim.get(r, c));
                prop_assert!(m.m_i.get(r, c) || m.m_j.get(r, c));
            }
        }
    }

    #[test]
    fn similarity_mask_monotone_in_tau(case in pair_case(), tau2 in 0.0f64..=1.0) {
        let (w_i, w_j) = case.tensors();
        let (lo, hi) = if case.tau <= tau2 { (case.tau, tau2) } else { (tau2, case.tau) };
        let m_lo = build_masks(&w_i, &w_j, &case.norms_i, &case.norms_j, lo).unwrap();
        let m_hi = build_masks(&w_i, &w_j, &case.norms_i, &case.norms_j, hi).unwrap();
        for r in 0..case.rows {
            for c in 0..case.cols {
                prop_assert!(!m_lo.m_sim.get(r, c) || m_hi.m_sim.get(r, c));
            }
        }
    }

    #[test]
    fn masks_scale_equivariant(case in pair_case(), log2_scale in -3i32..=3) {
        // Dyadic scales keep f32 arithmetic exact, matching the
        // exact-arithmetic invariant.
        let scale = 2f32.powi(log2_scale);
        let (w_i, w_j) = case.tensors();
        let scale_t = |t: &ExpertTensor| {
            ExpertTensor::from_f32(Matrix::new(
                case.rows,
                case.cols,
                t.values.values().iter().map(|&v| v * scale).collect(),
            ))
        };
        let (s_i, s_j) = (scale_t(&w_i), scale_t(&w_j));
        let delta_a = similarity_delta(&w_i, &w_j).unwrap();
        let delta_b = similarity_delta(&s_i, &s_j).unwrap();
        prop_assert_eq!(delta_a.values(), delta_b.values());
        let m_a = build_masks(&w_i, &w_j, &case.norms_i, &case.norms_j, case.tau).unwrap();
        let m_b = build_masks(&s_i, &s_j, &case.norms_i, &case.norms_j, case.tau).unwrap();
        prop_assert_eq!(&m_a.m_sim, &m_b.m_sim);
        prop_assert_eq!(&m_a.m_sal_i, &m_b.m_sal_i);
        let art_a = merge_pair(&w_i, &w_j, m_a).unwrap();
        let art_b = merge_pair(&s_i, &s_j, m_b).unwrap();
        for (a, b) in art_a.w_merged.values().iter().zip(art_b.w_merged.values()) {
            prop_assert_eq!(a * scale, *b);
        }
    }

    #[test]
    fn merged_magnitudes_non_negative_and_finite(case in pair_case()) {
        let (w_i, w_j) = case.tensors();
        let m = build_masks(&w_i, &w_j, &case.norms_i, &case.norms_j, case.tau).unwrap();
        let art = merge_pair(&w_i, &w_j, m).unwrap();
        for &v in art.w_merged.values() {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
    }

    #[test]
    fn reconstructions_jointly_cover_support(case in pair_case()) {
        let (w_i, w_j) = case.tensors();
        let m = build_masks(&w_i, &w_j, &case.norms_i, &case.norms_j, case.tau).unwrap();
        let art = merge_pair(&w_i, &w_j, m).unwrap();
        let r0 = reconstruct(&art, 0);
        let r1 = reconstruct(&art, 1);
        for r in 0..case.rows {
            for c in 0..case.cols {
                // Every entry survives in at least one expert, except where
                // the surviving source weight is itself zero.
                let any_nonzero = r0.values.at(r, c) != 0.0 || r1.values.at(r, c) != 0.0;
                prop_assert!(any_nonzero || art.w_merged.at(r, c) == 0.0);
            }
        }
    }

    #[test]
    fn similar_entries_bounded_salient_entries_exact(case in pair_case()) {
        let (w_i, w_j) = case.tensors();
        let m = build_masks(&w_i, &w_j, &case.norms_i, &case.norms_j, case.tau).unwrap();
        let art = merge_pair(&w_i, &w_j, m).unwrap();
        for (pos, orig) in [(0, &w_i), (1, &w_j)] {
            let rec = reconstruct(&art, pos);
            let sal = if pos == 0 {
                &art.masks.m_sal_i
            } else {
                &art.masks.m_sal_j
            };
            for r in 0..case.rows {
                for c in 0..case.cols {
                    let w = orig.values.at(r, c) as f64;
                    let merged = art.w_merged.at(r, c) as f64;
                    if art.masks.m_sim.get(r, c) {
                        let err = (rec.values.at(r, c) as f64 - w).abs();
                        prop_assert!(
                            err <= case.tau * merged * (1.0 + 1e-6) + 1e-30,
                            "err {} tau {} merged {}", err, case.tau, merged
                        );
                    } else if sal.get(r, c) {
                        prop_assert_eq!(rec.values.at(r, c), orig.values.at(r, c));
                    }
                }
            }
        }
    }
}
