use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: alloc::vec::Vec<usize>,
        right: alloc::vec::Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: i32, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(alloc::vec::Vec<usize>),
    #[error("sequence of length {len} exceeds {limit} positions")]
    TooLong { len: usize, limit: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenRange { id: u32, size: usize },
    #[error("malformed label {0:?}")]
    MalformedLabel(String),
    #[error("non-finite loss at step {step} (batch {batch}, seed {seed})")]
    NonFinite { step: u64, batch: usize, seed: u64 },
    #[error("{0}")]
    Invalid(String),
}
