use thiserror::Error;

/// Errors produced across data generation, training, fusion, and file IO.
#[derive(Debug, Error)]
pub enum Error {
    /// Rejection sampling could not place `n` identities at the requested
    /// separation; the embedding-space dimension is too small.
    #[error("identity bank capacity exceeded: placed {placed} of {requested} identities in dim {dim} after {attempts} attempts per identity")]
    BankCapacity {
        requested: usize,
        placed: usize,
        dim: usize,
        attempts: usize,
    },

    /// A split spec that cannot be realized; the message names the violated constraint.
    #[error("invalid split: {0}")]
    Split(String),

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Pre-normalization network output collapsed below the representable threshold.
    #[error("degenerate embedding: pre-normalization norm {norm:e} in batch row {row} is below 1e-12")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed or truncated file contents.
    #[error("bad file format: {0}")]
    Format(String),

    /// File carries a format version this build does not read.
    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    /// Payload bytes do not match the stored checksum.
    #[error("checksum mismatch: file is corrupt or truncated")]
    Checksum,

    /// Configuration validation failed; lists every violated key.
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    /// Training produced a non-finite loss; carries a diagnostic dump of the batch.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    /// A similarity report was requested but fewer than two datasets are present.
    #[error("empty similarity report: fewer than two datasets among active proxies")]
    EmptyReport,
}

pub type Result<T> = std::result::Result<T, Error>;
