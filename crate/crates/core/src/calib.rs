//! Per-expert activation norm collection.
//!
//! One forward pass over calibration tokens records, for every expert that
//! actually receives tokens after routing, the per-input-feature L2 norm of
//! what it saw: the layer input for the gate/up slots, the SwiGLU
//! intermediate for the down slot. These norms feed the saliency masks.
//!
//! Experts that receive no tokens fall back to all-ones norms, degrading
//! saliency to pure weight magnitude for them.

use crate::container::{Container, TensorData, TensorEntry};
use crate::error::{Error, Result};
use crate::model::{Slot, ToyMoEModel};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationStats {
    n_layers: usize,
    n_experts: usize,
    /// [layer][expert][slot] -> per-input-feature norms.
    norms: Vec<Vec<[Vec<f32>; 3]>>,
    /// [layer][expert] -> routed token count.
    pub token_counts: Vec<Vec<u64>>,
}

impl CalibrationStats {
    pub fn norms(&self, layer: usize, expert: usize, slot: Slot) -> &[f32] {
        &self.norms[layer][expert][slot.index()]
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    /// Append the stats to a container as f32 tensors named
    /// `calib/{layer}/{expert}/{slot}`.
    pub fn add_to_container(&self, c: &mut Container) {
        for layer in 0..self.n_layers {
            for expert in 0..self.n_experts {
                for slot in Slot::ALL {
                    let v = &self.norms[layer][expert][slot.index()];
                    c.tensors.push(TensorEntry {
                        name: format!("calib/{layer}/{expert}/{}", slot.name()),
                        shape: vec![v.len()],
                        data: TensorData::F32(v.clone()),
                    });
                }
            }
        }
    }

    /// Read stats back from a container written by [`Self::add_to_container`].
    pub fn from_container(c: &Container, n_layers: usize, n_experts: usize) -> Result<Self> {
        let mut norms = Vec::with_capacity(n_layers);
        for layer in 0..n_layers {
            let mut per_expert = Vec::with_capacity(n_experts);
            for expert in 0..n_experts {
                let mut slots: [Vec<f32>; 3] = Default::default();
                for slot in Slot::ALL {
                    let name = format!("calib/{layer}/{expert}/{}", slot.name());
                    let entry = c.tensor(&name).ok_or_else(|| {
                        Error::CorruptHeader(format!("missing calibration tensor {name}"))
                    })?;
                    match &entry.data {
                        TensorData::F32(v) => slots[slot.index()] = v.clone(),
                        _ => {
                            return Err(Error::CorruptHeader(format!(
                                "calibration tensor {name} is not f32"
                            )))
                        }
                    }
                }
                per_expert.push(slots);
            }
            norms.push(per_expert);
        }
        Ok(Self {
            n_layers,
            n_experts,
            norms,
            token_counts: vec![vec![0; n_experts]; n_layers],
        })
    }
}

/// Run the calibration tokens through the model and collect activation norms.
///
/// Norms accumulate as f64 sums of squares and are rooted at the end;
/// permuting the tokens cannot change the result.
pub fn collect_norms(model: &ToyMoEModel, inputs: &Matrix) -> Result<CalibrationStats> {
    if inputs.rows() == 0 {
        return Err(Error::DomainError(
            "calibration needs at least one token".into(),
        ));
    }
    if inputs.cols() != model.config.d_model {
        return Err(Error::DimensionMismatch {
            context: "calibration input width",
            expected: model.config.d_model,
            got: inputs.cols(),
        });
    }
    let cfg = &model.config;
    let mut sq_input = vec![vec![vec![0.0f64; cfg.d_model]; cfg.n_experts]; cfg.n_layers];
    let mut sq_inter = vec![vec![vec![0.0f64; cfg.d_ff]; cfg.n_experts]; cfg.n_layers];
    let mut counts = vec![vec![0u64; cfg.n_experts]; cfg.n_layers];

    for t in 0..inputs.rows() {
        model.forward_token_observed(
            inputs.row(t).to_vec(),
            &mut |layer, expert, input, inter| {
                let acc_in = &mut sq_input[layer][expert];
                for (a, &x) in acc_in.iter_mut().zip(input) {
                    *a += (x as f64) * (x as f64);
                }
                let acc_mid = &mut sq_inter[layer][expert];
                for (a, &x) in acc_mid.iter_mut().zip(inter) {
                    *a += (x as f64) * (x as f64);
                }
                counts[layer][expert] += 1;
            },
        )?;
    }

    let mut norms = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let mut per_expert = Vec::with_capacity(cfg.n_experts);
        for expert in 0..cfg.n_experts {
            let slots = if counts[layer][expert] == 0 {
                [
                    vec![1.0f32; cfg.d_model],
                    vec![1.0f32; cfg.d_model],
                    vec![1.0f32; cfg.d_ff],
                ]
            } else {
                let input: Vec<f32> = sq_input[layer][expert]
                    .iter()
                    .map(|&s| s.sqrt() as f32)
                    .collect();
                let inter: Vec<f32> = sq_inter[layer][expert]
                    .iter()
                    .map(|&s| s.sqrt() as f32)
                    .collect();
                [input.clone(), input, inter]
            };
            per_expert.push(slots);
        }
        norms.push(per_expert);
    }
    Ok(CalibrationStats {
        n_layers: cfg.n_layers,
        n_experts: cfg.n_experts,
        norms,
        token_counts: counts,
    })
}
