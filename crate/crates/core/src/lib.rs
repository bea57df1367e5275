//! Training-free MoE expert compression: dual-mask sparse merging of expert
//! pairs, a packed-bfloat16 storage format that embeds masks and signs in
//! the underutilized exponent/sign bits, and a fused GEMV that decodes the
//! packed words on the fly. A desk-scale toy MoE model backs calibration,
//! compression, and before/after evaluation end to end.

pub mod analysis;
pub mod bf16;
pub mod calib;
pub mod codec;
pub mod compress;
pub mod container;
pub mod error;
pub mod grouping;
pub mod kernel;
pub mod merge;
pub mod model;
pub mod quant;
pub mod tensor;

pub use bf16::Bf16Word;
pub use calib::CalibrationStats;
pub use codec::{PackedExpertPair, PackedWord, SaturationCount};
pub use compress::{CompressOptions, CompressOutput, CompressReport};
pub use container::{Container, TensorData, TensorEntry};
pub use error::{Error, Result};
pub use grouping::{GroupingStrategy, LayerPairing, PairingPlan};
pub use kernel::BenchReport;
pub use merge::{MaskSet, MergeArtifacts};
pub use model::{
    DeviationReport, ExpertSlots, ModelMetadata, MoeLayer, Slot, SlotStorage, ToyMoEConfig,
    ToyMoEModel,
};
pub use quant::QuantizedTensor;
pub use tensor::{BitMatrix, Dtype, ExpertTensor, Matrix};
