//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {a:?} vs {b:?}")]
    ShapeMismatch {
        context: &'static str,
        a: (usize, usize),
        b: (usize, usize),
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("similarity threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),

    #[error("compression ratio {ratio} infeasible for {n_experts} experts")]
    RatioOutOfRange { ratio: f64, n_experts: usize },

    #[error("quantization bit width {0} unsupported (need 2..=16)")]
    InvalidBits(u32),

    #[error("Pearson correlation undefined: {0}")]
    DegenerateVariance(&'static str),

    #[error("argument outside domain: {0}")]
    DomainError(String),

    #[error("model configs differ: {0}")]
    ConfigMismatch(String),

    #[error("bad container magic {0:02x?}")]
    BadMagic([u8; 4]),

    #[error("corrupt container header: {0}")]
    CorruptHeader(String),

    #[error("container payload truncated: tensor {name} needs bytes {offset}..{end}, payload has {available}")]
    TruncatedPayload {
        name: String,
        offset: u64,
        end: u64,
        available: u64,
    },

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
