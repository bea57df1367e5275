//! End-to-end compression pipeline: calibrate, pick pairs, merge each pair
//! per linear slot, pack. Plus the two baselines used for quality
//! comparisons (naive full averaging and keep-one-of-each-pair).

use crate::calib::{collect_norms, CalibrationStats};
use crate::codec::{pack_pair, SaturationCount};
use crate::error::{Error, Result};
use crate::grouping::{group_random, group_search, GroupingStrategy, PairingPlan};
use crate::merge::{build_masks, merge_pair};
use crate::model::{gaussian_inputs, Slot, SlotStorage, ToyMoEModel};
use crate::tensor::{Dtype, ExpertTensor, Matrix};
use serde::Serialize;
use std::sync::Arc;
use std::time::Instant;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CompressOptions {
    pub ratio: f64,
    pub tau: f64,
    pub seed: u64,
    pub grouping: GroupingStrategy,
    pub search_budget: usize,
    pub calib_tokens: usize,
    pub calib_seed: u64,
}

impl Default for CompressOptions {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            tau: 0.4,
            seed: 0,
            grouping: GroupingStrategy::Random,
            search_budget: 64,
            calib_tokens: 256,
            calib_seed: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CompressReport {
    pub expert_bytes_before: u64,
    pub expert_bytes_after: u64,
    pub ratio_achieved: f64,
    pub wall_time_ms: f64,
    pub saturation_count: u64,
    /// Fraction of merged entries with the similarity mask set.
    pub sim_fraction: f64,
    pub pairs_per_layer: usize,
    pub ratio: f64,
    pub tau: f64,
    pub seed: u64,
    pub calib_seed: u64,
    pub calib_tokens: usize,
    pub grouping: GroupingStrategy,
}

pub struct CompressOutput {
    pub model: ToyMoEModel,
    pub plan: PairingPlan,
    pub stats: CalibrationStats,
    pub report: CompressReport,
}

fn require_dense(model: &ToyMoEModel) -> Result<()> {
    for layer in 0..model.config.n_layers {
        for e in 0..model.config.n_experts {
            if model.dense_expert(layer, e).is_none() {
                return Err(Error::DomainError(format!(
                    "expert {layer}/{e} is already packed; compression needs a dense model"
                )));
            }
        }
    }
    Ok(())
}

/// Merge and pack every planned pair. Returns the compressed model, the
/// saturation count and the fraction of merged entries that were similar.
pub fn apply_plan_sparse_merge(
    model: &ToyMoEModel,
    plan: &PairingPlan,
    stats: &CalibrationStats,
    tau: f64,
) -> Result<(ToyMoEModel, SaturationCount, f64)> {
    require_dense(model)?;
    let mut out = model.clone();
    let mut sat = SaturationCount::default();
    let mut sim_ones = 0u64;
    let mut sim_total = 0u64;
    for (li, pairing) in plan.layers.iter().enumerate() {
        for &(a, b) in &pairing.pairs {
            for slot in Slot::ALL {
                let ea = model.dense_expert(li, a).unwrap();
                let eb = model.dense_expert(li, b).unwrap();
                let w_a = ea.slot(slot);
                let w_b = eb.slot(slot);
                let masks = build_masks(
                    w_a,
                    w_b,
                    stats.norms(li, a, slot),
                    stats.norms(li, b, slot),
                    tau,
                )?;
                sim_ones += masks.m_sim.count_ones() as u64;
                sim_total += masks.m_sim.len() as u64;
                let artifacts = merge_pair(w_a, w_b, masks)?;
                let packed = Arc::new(pack_pair(&artifacts, (a, b), &mut sat)?);
                *out.layers[li].experts[a].slot_mut(slot) = SlotStorage::Packed {
                    pair: Arc::clone(&packed),
                    pos: 0,
                };
                *out.layers[li].experts[b].slot_mut(slot) = SlotStorage::Packed {
                    pair: packed,
                    pos: 1,
                };
            }
        }
    }
    let sim_fraction = if sim_total == 0 {
        0.0
    } else {
        sim_ones as f64 / sim_total as f64
    };
    Ok((out, sat, sim_fraction))
}

/// Full pipeline: seeded calibration inputs, norm collection, grouping,
/// per-pair per-slot merging, packing.
pub fn compress(model: &ToyMoEModel, opts: &CompressOptions) -> Result<CompressOutput> {
    require_dense(model)?;
    let t0 = Instant::now();
    let inputs = gaussian_inputs(opts.calib_tokens, model.config.d_model, opts.calib_seed);
    let stats = collect_norms(model, &inputs)?;
    let plan = match opts.grouping {
        GroupingStrategy::Random => group_random(
            model.config.n_layers,
            model.config.n_experts,
            opts.ratio,
            opts.seed,
        )?,
        GroupingStrategy::Search => group_search(
            model,
            &stats,
            opts.ratio,
            opts.tau,
            opts.search_budget,
            opts.seed,
        )?,
    };
    let before = model.expert_payload_bytes();
    let (compressed, sat, sim_fraction) = apply_plan_sparse_merge(model, &plan, &stats, opts.tau)?;
    let after = compressed.expert_payload_bytes();
    let report = CompressReport {
        expert_bytes_before: before,
        expert_bytes_after: after,
        ratio_achieved: after as f64 / before as f64,
        wall_time_ms: t0.elapsed().as_secs_f64() * 1e3,
        saturation_count: sat.total(),
        sim_fraction,
        pairs_per_layer: plan.layers.first().map_or(0, |l| l.pairs.len()),
        ratio: opts.ratio,
        tau: opts.tau,
        seed: opts.seed,
        calib_seed: opts.calib_seed,
        calib_tokens: opts.calib_tokens,
        grouping: opts.grouping,
    };
    Ok(CompressOutput {
        model: compressed,
        plan,
        stats,
        report,
    })
}

fn bf16_dense(values: Matrix) -> SlotStorage {
    SlotStorage::Dense(
        ExpertTensor {
            values,
            dtype: Dtype::F32,
        }
        .to_bf16(),
    )
}

/// Baseline: replace both experts of each pair with their signed average
/// (no masks, no sign restoration), stored in bf16 for parity.
pub fn apply_plan_naive_average(model: &ToyMoEModel, plan: &PairingPlan) -> Result<ToyMoEModel> {
    require_dense(model)?;
    let mut out = model.clone();
    for (li, pairing) in plan.layers.iter().enumerate() {
        for &(a, b) in &pairing.pairs {
            for slot in Slot::ALL {
                let ea = model.dense_expert(li, a).unwrap();
                let eb = model.dense_expert(li, b).unwrap();
                let w_a = ea.slot(slot);
                let w_b = eb.slot(slot);
                let avg = Matrix::from_fn(w_a.out_features(), w_a.in_features(), |r, c| {
                    (w_a.values.at(r, c) + w_b.values.at(r, c)) / 2.0
                });
                *out.layers[li].experts[a].slot_mut(slot) = bf16_dense(avg.clone());
                *out.layers[li].experts[b].slot_mut(slot) = bf16_dense(avg);
            }
        }
    }
    Ok(out)
}

/// Baseline: keep one expert of each pair (the one that saw more calibration
/// tokens; ties keep the lower index) and route the partner's tokens to it.
pub fn apply_plan_drop_one(
    model: &ToyMoEModel,
    plan: &PairingPlan,
    stats: &CalibrationStats,
) -> Result<ToyMoEModel> {
    require_dense(model)?;
    let mut out = model.clone();
    for (li, pairing) in plan.layers.iter().enumerate() {
        for &(a, b) in &pairing.pairs {
            let (kept, dropped) = {
                let ca = stats.token_counts[li][a];
                let cb = stats.token_counts[li][b];
                if cb > ca || (cb == ca && b < a) {
                    (b, a)
                } else {
                    (a, b)
                }
            };
            for slot in Slot::ALL {
                let keep = model.layers[li].experts[kept].slot(slot).clone();
                *out.layers[li].experts[dropped].slot_mut(slot) = keep;
            }
        }
    }
    Ok(out)
}
