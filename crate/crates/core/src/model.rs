//! A minimal Mixtral-shaped MoE substrate: per layer, a linear top-k router
//! over N SwiGLU experts (gate `w1`, up `w3`, down `w2`), with residual
//! connections and f32 activations. No attention, embeddings, or norms —
//! compression only ever touches expert FFNs, and routers are never packed.

use crate::bf16::Bf16Word;
use crate::codec::{self, PackedExpertPair};
use crate::error::{Error, Result};
use crate::kernel::{gemv_fused, gemv_reference, matvec};
use crate::tensor::{Dtype, ExpertTensor, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ToyMoEConfig {
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl ToyMoEConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
        ] {
            if v == 0 {
                return Err(Error::DomainError(format!("{name} must be >= 1")));
            }
        }
        if self.top_k > self.n_experts {
            return Err(Error::DomainError(format!(
                "top_k {} exceeds n_experts {}",
                self.top_k, self.n_experts
            )));
        }
        Ok(())
    }
}

/// The three linear slots of a SwiGLU expert.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Slot {
    /// Gate projection (d_ff x d_model).
    W1,
    /// Up projection (d_ff x d_model).
    W3,
    /// Down projection (d_model x d_ff).
    W2,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::W1, Slot::W3, Slot::W2];

    pub fn name(self) -> &'static str {
        match self {
            Slot::W1 => "w1",
            Slot::W3 => "w3",
            Slot::W2 => "w2",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Slot::W1 => 0,
            Slot::W3 => 1,
            Slot::W2 => 2,
        }
    }

    pub fn in_features(self, cfg: &ToyMoEConfig) -> usize {
        match self {
            Slot::W1 | Slot::W3 => cfg.d_model,
            Slot::W2 => cfg.d_ff,
        }
    }

    pub fn out_features(self, cfg: &ToyMoEConfig) -> usize {
        match self {
            Slot::W1 | Slot::W3 => cfg.d_ff,
            Slot::W2 => cfg.d_model,
        }
    }
}

/// Weight storage for one linear slot: dense, or one position of a shared
/// packed pair.
#[derive(Clone, Debug)]
pub enum SlotStorage {
    Dense(ExpertTensor),
    Packed {
        pair: Arc<PackedExpertPair>,
        pos: usize,
    },
}

impl SlotStorage {
    pub fn gemv(&self, x: &[f32]) -> Result<Vec<f32>> {
        match self {
            SlotStorage::Dense(t) => gemv_reference(t, x),
            SlotStorage::Packed { pair, pos } => gemv_fused(pair, *pos, x),
        }
    }

    /// Dense view of the stored weights (decodes packed storage).
    pub fn to_dense(&self) -> ExpertTensor {
        match self {
            SlotStorage::Dense(t) => t.clone(),
            SlotStorage::Packed { pair, pos } => codec::unpack_pair(pair, *pos),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            SlotStorage::Dense(t) => t.shape(),
            SlotStorage::Packed { pair, .. } => pair.shape(),
        }
    }

    /// Storage bytes on disk for this slot. A packed pair is shared by two
    /// experts; only its position-0 holder reports it.
    fn owned_bytes(&self) -> u64 {
        match self {
            SlotStorage::Dense(t) => {
                let n = (t.shape().0 * t.shape().1) as u64;
                match t.dtype {
                    Dtype::F32 => 4 * n,
                    Dtype::Bf16 => 2 * n,
                }
            }
            SlotStorage::Packed { pair, pos } => {
                if *pos == 0 {
                    pair.byte_len() as u64
                } else {
                    0
                }
            }
        }
    }
}

/// One expert's three linear slots.
#[derive(Clone, Debug)]
pub struct ExpertSlots {
    pub w1: SlotStorage,
    pub w3: SlotStorage,
    pub w2: SlotStorage,
}

impl ExpertSlots {
    pub fn slot(&self, s: Slot) -> &SlotStorage {
        match s {
            Slot::W1 => &self.w1,
            Slot::W3 => &self.w3,
            Slot::W2 => &self.w2,
        }
    }

    pub fn slot_mut(&mut self, s: Slot) -> &mut SlotStorage {
        match s {
            Slot::W1 => &mut self.w1,
            Slot::W3 => &mut self.w3,
            Slot::W2 => &mut self.w2,
        }
    }
}

/// Dense borrow of one expert's slots, for merge objectives and analysis.
pub struct DenseExpert<'a> {
    pub w1: &'a ExpertTensor,
    pub w3: &'a ExpertTensor,
    pub w2: &'a ExpertTensor,
}

impl<'a> DenseExpert<'a> {
    pub fn slot(&self, s: Slot) -> &'a ExpertTensor {
        match s {
            Slot::W1 => self.w1,
            Slot::W3 => self.w3,
            Slot::W2 => self.w2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    /// Router weights (n_experts x d_model), always dense f32.
    pub router: Matrix,
    pub experts: Vec<ExpertSlots>,
}

#[derive(Clone, Debug)]
pub struct ToyMoEModel {
    pub config: ToyMoEConfig,
    pub layers: Vec<MoeLayer>,
}

#[inline]
fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Top-k expert selection with renormalized softmax weights.
///
/// Selection sorts by logit descending, index ascending on ties; the returned
/// list is re-sorted by expert index so accumulation order is deterministic.
pub(crate) fn route(logits: &[f32], k: usize) -> Vec<(usize, f32)> {
    let mut idx: Vec<(usize, f32)> = logits.iter().copied().enumerate().collect();
    idx.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    idx.truncate(k);
    let max = idx
        .iter()
        .map(|&(_, l)| l)
        .fold(f32::NEG_INFINITY, f32::max);
    let mut weights: Vec<f32> = idx.iter().map(|&(_, l)| (l - max).exp()).collect();
    let sum: f32 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    let mut selected: Vec<(usize, f32)> =
        idx.iter().zip(weights).map(|(&(e, _), w)| (e, w)).collect();
    selected.sort_by_key(|&(e, _)| e);
    selected
}

impl ToyMoEModel {
    /// Run one token through all layers. The observer sees every expert hit
    /// with the expert's input and its SwiGLU intermediate activation.
    pub(crate) fn forward_token_observed<F>(&self, mut h: Vec<f32>, obs: &mut F) -> Result<Vec<f32>>
    where
        F: FnMut(usize, usize, &[f32], &[f32]),
    {
        if h.len() != self.config.d_model {
            return Err(Error::DimensionMismatch {
                context: "forward input width",
                expected: self.config.d_model,
                got: h.len(),
            });
        }
        for (li, layer) in self.layers.iter().enumerate() {
            let logits = matvec(&layer.router, &h);
            let selected = route(&logits, self.config.top_k);
            let mut layer_out = vec![0.0f32; self.config.d_model];
            for (e, w) in selected {
                let expert = &layer.experts[e];
                let gate = expert.w1.gemv(&h)?;
                let up = expert.w3.gemv(&h)?;
                let mut inter = vec![0.0f32; gate.len()];
                for i in 0..gate.len() {
                    inter[i] = silu(gate[i]) * up[i];
                }
                obs(li, e, &h, &inter);
                let out = expert.w2.gemv(&inter)?;
                for (acc, o) in layer_out.iter_mut().zip(&out) {
                    *acc += w * o;
                }
            }
            for (hv, o) in h.iter_mut().zip(&layer_out) {
                *hv += o;
            }
        }
        Ok(h)
    }

    /// Forward a batch of tokens (rows). Tokens are independent and run in
    /// parallel.
    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        if inputs.cols() != self.config.d_model {
            return Err(Error::DimensionMismatch {
                context: "forward input width",
                expected: self.config.d_model,
                got: inputs.cols(),
            });
        }
        let rows: Vec<Vec<f32>> = (0..inputs.rows())
            .into_par_iter()
            .map(|t| self.forward_token_observed(inputs.row(t).to_vec(), &mut |_, _, _, _| ()))
            .collect::<Result<_>>()?;
        let mut out = Matrix::zeros(inputs.rows(), inputs.cols());
        for (t, row) in rows.into_iter().enumerate() {
            for (c, v) in row.into_iter().enumerate() {
                out.set(t, c, v);
            }
        }
        Ok(out)
    }

    /// Expert indices each token routes to, per token then per layer.
    pub fn routing_trace(&self, inputs: &Matrix) -> Result<Vec<Vec<Vec<usize>>>> {
        let mut trace = Vec::with_capacity(inputs.rows());
        for t in 0..inputs.rows() {
            let mut per_layer = vec![Vec::new(); self.config.n_layers];
            self.forward_token_observed(inputs.row(t).to_vec(), &mut |li, e, _, _| {
                per_layer[li].push(e)
            })?;
            trace.push(per_layer);
        }
        Ok(trace)
    }

    /// Dense view of an expert, or None if any slot is packed.
    pub fn dense_expert(&self, layer: usize, expert: usize) -> Option<DenseExpert<'_>> {
        let e = &self.layers[layer].experts[expert];
        match (&e.w1, &e.w3, &e.w2) {
            (SlotStorage::Dense(w1), SlotStorage::Dense(w3), SlotStorage::Dense(w2)) => {
                Some(DenseExpert { w1, w3, w2 })
            }
            _ => None,
        }
    }

    /// Total bytes of expert weight storage (routers excluded; shared packed
    /// pairs counted once).
    pub fn expert_payload_bytes(&self) -> u64 {
        self.layers
            .iter()
            .flat_map(|l| l.experts.iter())
            .map(|e| e.w1.owned_bytes() + e.w3.owned_bytes() + e.w2.owned_bytes())
            .sum()
    }

    pub fn router_params(&self) -> u64 {
        (self.config.n_layers * self.config.n_experts * self.config.d_model) as u64
    }

    pub fn expert_params(&self) -> u64 {
        (self.config.n_layers * self.config.n_experts * 3 * self.config.d_model * self.config.d_ff)
            as u64
    }
}

/// Container metadata for a persisted model. Compression fields are absent
/// on uncompressed checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub config: ToyMoEConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairing_plan: Option<crate::grouping::PairingPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_sim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grouping: Option<crate::grouping::GroupingStrategy>,
}

impl ModelMetadata {
    pub fn plain(config: ToyMoEConfig) -> Self {
        Self {
            config,
            pairing_plan: None,
            tau_sim: None,
            seed: None,
            calib_seed: None,
            calib_tokens: None,
            grouping: None,
        }
    }
}

impl ToyMoEModel {
    /// Replace every packed slot with its dense decoded reconstruction.
    pub fn unpacked(&self) -> ToyMoEModel {
        let mut out = self.clone();
        for layer in &mut out.layers {
            for expert in &mut layer.experts {
                for slot in Slot::ALL {
                    let s = expert.slot_mut(slot);
                    if let SlotStorage::Packed { pair, pos } = s {
                        *s = SlotStorage::Dense(codec::unpack_pair(pair, *pos));
                    }
                }
            }
        }
        out
    }

    /// Serialize to a container. Tensor names: `layer{i}/router`,
    /// `layer{i}/expert{e}/{w1|w3|w2}` for dense slots and
    /// `layer{i}/pair{p}/{w1|w3|w2}` for packed pairs, where `p` indexes the
    /// pairing plan's pair list for that layer.
    pub fn to_container(&self, meta: &ModelMetadata) -> Result<crate::container::Container> {
        use crate::container::{Container, TensorData, TensorEntry};
        let metadata = serde_json::to_value(meta)
            .map_err(|e| Error::CorruptHeader(format!("metadata serialization: {e}")))?;
        let mut c = Container::new(metadata);
        for (li, layer) in self.layers.iter().enumerate() {
            c.tensors.push(TensorEntry {
                name: format!("layer{li}/router"),
                shape: vec![layer.router.rows(), layer.router.cols()],
                data: TensorData::F32(layer.router.values().to_vec()),
            });
            for (e, slots) in layer.experts.iter().enumerate() {
                for slot in Slot::ALL {
                    match slots.slot(slot) {
                        SlotStorage::Dense(t) => {
                            let (rows, cols) = t.shape();
                            let data = match t.dtype {
                                Dtype::F32 => TensorData::F32(t.values.values().to_vec()),
                                Dtype::Bf16 => TensorData::Bf16(t.bf16_words()),
                            };
                            c.tensors.push(TensorEntry {
                                name: format!("layer{li}/expert{e}/{}", slot.name()),
                                shape: vec![rows, cols],
                                data,
                            });
                        }
                        SlotStorage::Packed { .. } => {} // written once below, per pair
                    }
                }
            }
            let pairs = meta
                .pairing_plan
                .as_ref()
                .map(|p| p.layers[li].pairs.as_slice())
                .unwrap_or(&[]);
            let mut packed_experts = 0usize;
            for (p, &(a, b)) in pairs.iter().enumerate() {
                for slot in Slot::ALL {
                    let pair = match layer.experts[a].slot(slot) {
                        SlotStorage::Packed { pair, pos: 0 } => pair,
                        _ => {
                            return Err(Error::DomainError(format!(
                            "plan pair {li}/{p} expects expert {a} slot {} packed at position 0",
                            slot.name()
                        )))
                        }
                    };
                    if pair.pair_id != (a, b) {
                        return Err(Error::DomainError(format!(
                            "packed pair id {:?} disagrees with plan pair ({a}, {b})",
                            pair.pair_id
                        )));
                    }
                    c.tensors.push(TensorEntry {
                        name: format!("layer{li}/pair{p}/{}", slot.name()),
                        shape: vec![pair.rows(), pair.cols()],
                        data: TensorData::Pbf16(pair.words().iter().map(|w| w.to_bits()).collect()),
                    });
                }
                packed_experts += 2;
            }
            let actual_packed = layer
                .experts
                .iter()
                .filter(|e| matches!(e.w1, SlotStorage::Packed { .. }))
                .count();
            if actual_packed != packed_experts {
                return Err(Error::DomainError(format!(
                    "layer {li} has {actual_packed} packed experts but the plan covers {packed_experts}"
                )));
            }
        }
        Ok(c)
    }

    /// Load a model written by [`Self::to_container`].
    pub fn from_container(c: &crate::container::Container) -> Result<(ToyMoEModel, ModelMetadata)> {
        use crate::container::TensorData;
        let meta: ModelMetadata = serde_json::from_value(c.metadata.clone())
            .map_err(|e| Error::CorruptHeader(format!("metadata: {e}")))?;
        let cfg = meta.config;
        cfg.validate()?;
        let get = |name: &str| {
            c.tensor(name)
                .ok_or_else(|| Error::CorruptHeader(format!("missing tensor {name}")))
        };
        let expect_shape = |name: &str, got: &[usize], want: (usize, usize)| {
            if got != [want.0, want.1] {
                return Err(Error::CorruptHeader(format!(
                    "tensor {name} has shape {got:?}, expected [{}, {}]",
                    want.0, want.1
                )));
            }
            Ok(())
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for li in 0..cfg.n_layers {
            let router_entry = get(&format!("layer{li}/router"))?;
            expect_shape(
                &router_entry.name,
                &router_entry.shape,
                (cfg.n_experts, cfg.d_model),
            )?;
            let router = match &router_entry.data {
                TensorData::F32(v) => Matrix::new(cfg.n_experts, cfg.d_model, v.clone()),
                _ => {
                    return Err(Error::CorruptHeader(format!(
                        "layer{li}/router must be f32"
                    )))
                }
            };
            let mut slots_by_expert: Vec<Option<ExpertSlots>> = vec![None; cfg.n_experts];
            if let Some(plan) = &meta.pairing_plan {
                for (p, &(a, b)) in plan.layers[li].pairs.iter().enumerate() {
                    let load_slot = |slot: Slot| -> Result<Arc<PackedExpertPair>> {
                        let name = format!("layer{li}/pair{p}/{}", slot.name());
                        let entry = get(&name)?;
                        let want = (slot.out_features(&cfg), slot.in_features(&cfg));
                        expect_shape(&name, &entry.shape, want)?;
                        let words = match &entry.data {
                            TensorData::Pbf16(v) => v
                                .iter()
                                .map(|&w| crate::codec::PackedWord::from_bits(w))
                                .collect(),
                            _ => return Err(Error::CorruptHeader(format!("{name} must be pbf16"))),
                        };
                        Ok(Arc::new(PackedExpertPair::from_words(
                            want.0,
                            want.1,
                            words,
                            (a, b),
                        )))
                    };
                    let w1 = load_slot(Slot::W1)?;
                    let w3 = load_slot(Slot::W3)?;
                    let w2 = load_slot(Slot::W2)?;
                    let make = |pos: usize| ExpertSlots {
                        w1: SlotStorage::Packed {
                            pair: Arc::clone(&w1),
                            pos,
                        },
                        w3: SlotStorage::Packed {
                            pair: Arc::clone(&w3),
                            pos,
                        },
                        w2: SlotStorage::Packed {
                            pair: Arc::clone(&w2),
                            pos,
                        },
                    };
                    slots_by_expert[a] = Some(make(0));
                    slots_by_expert[b] = Some(make(1));
                }
            }
            let mut experts = Vec::with_capacity(cfg.n_experts);
            for (e, prebuilt) in slots_by_expert.into_iter().enumerate() {
                if let Some(slots) = prebuilt {
                    experts.push(slots);
                    continue;
                }
                let load_dense = |slot: Slot| -> Result<SlotStorage> {
                    let name = format!("layer{li}/expert{e}/{}", slot.name());
                    let entry = get(&name)?;
                    let want = (slot.out_features(&cfg), slot.in_features(&cfg));
                    expect_shape(&name, &entry.shape, want)?;
                    let tensor = match &entry.data {
                        TensorData::F32(v) => ExpertTensor {
                            values: Matrix::new(want.0, want.1, v.clone()),
                            dtype: Dtype::F32,
                        },
                        TensorData::Bf16(v) => ExpertTensor::from_bf16_words(want.0, want.1, v),
                        _ => {
                            return Err(Error::CorruptHeader(format!("{name} must be f32 or bf16")))
                        }
                    };
                    Ok(SlotStorage::Dense(tensor))
                };
                experts.push(ExpertSlots {
                    w1: load_dense(Slot::W1)?,
                    w3: load_dense(Slot::W3)?,
                    w2: load_dense(Slot::W2)?,
                });
            }
            layers.push(MoeLayer { router, experts });
        }
        Ok((
            ToyMoEModel {
                config: cfg,
                layers,
            },
            meta,
        ))
    }
}

/// Keep a generated weight inside the packable exponent band [112, 143] so
/// that bf16 <-> pbf16 conversion is lossless on generated models (the same
/// band real expert weights concentrate in). Mantissa and sign are preserved;
/// exact zeros become +2^-15.
fn clamp_to_packable(x: f32) -> f32 {
    let w = Bf16Word::from_f32(x);
    let e = w.exponent().clamp(codec::EXP_LOW, codec::EXP_HIGH);
    Bf16Word::from_bits((w.sign() << 15) | (e << 7) | w.mantissa()).to_f32()
}

/// Generate a seeded toy model.
///
/// Routers and gate/up weights draw from N(0, 1/d_model), down weights from
/// N(0, 1/d_ff). With `duplicate_pairs`, expert 2k+1 is expert 2k plus
/// N(0, (noise*std)^2) perturbation — a controlled redundancy knob. Expert
/// weights are bf16 and clamped into the packable exponent band; routers stay
/// f32.
pub fn generate_toy(
    config: &ToyMoEConfig,
    duplicate_pairs: bool,
    noise: f64,
) -> Result<ToyMoEModel> {
    config.validate()?;
    if noise.is_nan() || noise < 0.0 {
        return Err(Error::DomainError(format!("noise {noise} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_model = 1.0 / (config.d_model as f64).sqrt();
    let std_ff = 1.0 / (config.d_ff as f64).sqrt();

    fn gauss(rng: &mut ChaCha8Rng, std: f64) -> f32 {
        let z: f64 = StandardNormal.sample(rng);
        (z * std) as f32
    }

    fn fresh(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> SlotStorage {
        let m = Matrix::from_fn(rows, cols, |_, _| clamp_to_packable(gauss(rng, std)));
        SlotStorage::Dense(ExpertTensor {
            values: m,
            dtype: Dtype::Bf16,
        })
    }

    fn perturb(rng: &mut ChaCha8Rng, t: &SlotStorage, std: f64) -> SlotStorage {
        let src = match t {
            SlotStorage::Dense(t) => t,
            _ => unreachable!("generation only builds dense slots"),
        };
        let (rows, cols) = src.shape();
        let vals = src
            .values
            .values()
            .iter()
            .map(|&v| clamp_to_packable(v + gauss(rng, std)))
            .collect();
        SlotStorage::Dense(ExpertTensor {
            values: Matrix::new(rows, cols, vals),
            dtype: Dtype::Bf16,
        })
    }

    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let router = Matrix::from_fn(config.n_experts, config.d_model, |_, _| {
            gauss(&mut rng, std_model)
        });
        let mut experts: Vec<ExpertSlots> = Vec::with_capacity(config.n_experts);
        for e in 0..config.n_experts {
            let slots = if duplicate_pairs && e % 2 == 1 {
                let base = &experts[e - 1];
                ExpertSlots {
                    w1: perturb(&mut rng, &base.w1, noise * std_model),
                    w3: perturb(&mut rng, &base.w3, noise * std_model),
                    w2: perturb(&mut rng, &base.w2, noise * std_ff),
                }
            } else {
                ExpertSlots {
                    w1: fresh(&mut rng, config.d_ff, config.d_model, std_model),
                    w3: fresh(&mut rng, config.d_ff, config.d_model, std_model),
                    w2: fresh(&mut rng, config.d_model, config.d_ff, std_ff),
                }
            };
            experts.push(slots);
        }
        layers.push(MoeLayer { router, experts });
    }
    Ok(ToyMoEModel {
        config: *config,
        layers,
    })
}

/// Relative output deviation between two models on the same inputs.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DeviationReport {
    pub mean_rel_l2: f64,
    pub max_rel_l2: f64,
}

/// Per token: ||y_compressed - y_original||_2 / (||y_original||_2 + 1e-12).
pub fn eval_deviation(
    original: &ToyMoEModel,
    compressed: &ToyMoEModel,
    inputs: &Matrix,
) -> Result<DeviationReport> {
    if original.config != compressed.config {
        return Err(Error::ConfigMismatch(format!(
            "{:?} vs {:?}",
            original.config, compressed.config
        )));
    }
    let y_o = original.forward(inputs)?;
    let y_c = compressed.forward(inputs)?;
    let mut sum = 0.0f64;
    let mut max = 0.0f64;
    for t in 0..inputs.rows() {
        let mut diff2 = 0.0f64;
        let mut base2 = 0.0f64;
        for c in 0..inputs.cols() {
            let d = (y_c.at(t, c) - y_o.at(t, c)) as f64;
            diff2 += d * d;
            base2 += (y_o.at(t, c) as f64).powi(2);
        }
        let rel = diff2.sqrt() / (base2.sqrt() + 1e-12);
        sum += rel;
        max = max.max(rel);
    }
    let n = inputs.rows().max(1) as f64;
    Ok(DeviationReport {
        mean_rel_l2: sum / n,
        max_rel_l2: max,
    })
}

/// Seeded standard-normal token batch, one token per row.
pub fn gaussian_inputs(tokens: usize, d_model: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(tokens, d_model, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ToyMoEConfig {
        ToyMoEConfig {
            n_layers: 2,
            n_experts: 4,
            top_k: 2,
            d_model: 8,
            d_ff: 16,
            seed: 42,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config();
        let a = generate_toy(&cfg, false, 0.0).unwrap();
        let b = generate_toy(&cfg, false, 0.0).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.router, lb.router);
            for (ea, eb) in la.experts.iter().zip(&lb.experts) {
                for s in Slot::ALL {
                    assert_eq!(
                        ea.slot(s).to_dense().values.values(),
                        eb.slot(s).to_dense().values.values()
                    );
                }
            }
        }
    }

    #[test]
    fn duplicate_pairs_with_zero_noise_are_identical() {
        let cfg = small_config();
        let m = generate_toy(&cfg, true, 0.0).unwrap();
        for layer in &m.layers {
            for k in 0..cfg.n_experts / 2 {
                for s in Slot::ALL {
                    assert_eq!(
                        layer.experts[2 * k].slot(s).to_dense().values.values(),
                        layer.experts[2 * k + 1].slot(s).to_dense().values.values()
                    );
                }
            }
        }
    }

    #[test]
    fn duplicate_pairs_with_noise_are_highly_correlated() {
        let cfg = ToyMoEConfig {
            d_model: 32,
            d_ff: 64,
            ..small_config()
        };
        let m = generate_toy(&cfg, true, 0.1).unwrap();
        let a = m.layers[0].experts[0].w1.to_dense();
        let b = m.layers[0].experts[1].w1.to_dense();
        let r = crate::analysis::pearson_pairwise(&a, &b).unwrap();
        assert!(r > 0.9, "pair correlation {r} too low");
    }

    #[test]
    fn generated_weights_live_in_packable_band() {
        let m = generate_toy(&small_config(), false, 0.0).unwrap();
        for layer in &m.layers {
            for e in &layer.experts {
                for s in Slot::ALL {
                    for &v in e.slot(s).to_dense().values.values() {
                        let w = Bf16Word::from_f32(v.abs());
                        assert!((codec::EXP_LOW..=codec::EXP_HIGH).contains(&w.exponent()));
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_routing_weight_is_one() {
        let sel = route(&[0.3], 1);
        assert_eq!(sel, vec![(0, 1.0)]);
    }

    #[test]
    fn route_orders_by_logit_then_index() {
        let sel = route(&[0.1, 0.5, 0.5, -1.0], 2);
        let idx: Vec<usize> = sel.iter().map(|&(e, _)| e).collect();
        assert_eq!(idx, vec![1, 2]);
        assert!((sel[0].1 - 0.5).abs() < 1e-6);
    }

    #[test]
    fn single_expert_forward_is_residual_plus_expert() {
        let cfg = ToyMoEConfig {
            n_layers: 1,
            n_experts: 1,
            top_k: 1,
            d_model: 2,
            d_ff: 2,
            seed: 7,
        };
        let m = generate_toy(&cfg, false, 0.0).unwrap();
        let x = vec![0.5f32, -1.0];
        let e = &m.layers[0].experts[0];
        let gate = e.w1.gemv(&x).unwrap();
        let up = e.w3.gemv(&x).unwrap();
        let inter: Vec<f32> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
        let out = e.w2.gemv(&inter).unwrap();
        let y = m.forward(&Matrix::new(1, 2, x.clone())).unwrap();
        assert_eq!(y.at(0, 0), x[0] + out[0]);
        assert_eq!(y.at(0, 1), x[1] + out[1]);
    }

    #[test]
    fn hand_computed_swiglu_layer() {
        // d_model = 2, single expert, hand-set weights.
        let cfg = ToyMoEConfig {
            n_layers: 1,
            n_experts: 1,
            top_k: 1,
            d_model: 2,
            d_ff: 2,
            seed: 0,
        };
        let w1 = ExpertTensor::from_f32(Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let w3 = ExpertTensor::from_f32(Matrix::new(2, 2, vec![0.5, 0.0, 0.0, 0.5]));
        let w2 = ExpertTensor::from_f32(Matrix::new(2, 2, vec![1.0, 1.0, 0.0, 2.0]));
        let model = ToyMoEModel {
            config: cfg,
            layers: vec![MoeLayer {
                router: Matrix::new(1, 2, vec![1.0, 0.0]),
                experts: vec![ExpertSlots {
                    w1: SlotStorage::Dense(w1),
                    w3: SlotStorage::Dense(w3),
                    w2: SlotStorage::Dense(w2),
                }],
            }],
        };
        let x = [1.0f32, 2.0];
        // gate = x, up = x/2, inter_i = silu(x_i) * x_i/2.
        let inter = [silu(1.0) * 0.5, silu(2.0) * 1.0];
        let expect = [x[0] + (inter[0] + inter[1]), x[1] + 2.0 * inter[1]];
        let y = model.forward(&Matrix::new(1, 2, x.to_vec())).unwrap();
        assert_eq!(y.at(0, 0), expect[0]);
        assert_eq!(y.at(0, 1), expect[1]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = generate_toy(&small_config(), false, 0.0).unwrap();
        let x = Matrix::zeros(1, 3);
        assert!(matches!(
            m.forward(&x),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn eval_deviation_zero_for_identical_models() {
        let m = generate_toy(&small_config(), false, 0.0).unwrap();
        let inputs = gaussian_inputs(8, m.config.d_model, 1);
        let d = eval_deviation(&m, &m, &inputs).unwrap();
        assert_eq!(d.mean_rel_l2, 0.0);
        assert_eq!(d.max_rel_l2, 0.0);
    }

    #[test]
    fn eval_deviation_rejects_config_mismatch() {
        let a = generate_toy(&small_config(), false, 0.0).unwrap();
        let cfg_b = ToyMoEConfig {
            d_ff: 8,
            ..small_config()
        };
        let b = generate_toy(&cfg_b, false, 0.0).unwrap();
        let inputs = gaussian_inputs(2, 8, 1);
        assert!(matches!(
            eval_deviation(&a, &b, &inputs),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.n_experts = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.top_k = 5;
        assert!(cfg.validate().is_err());
    }
}
