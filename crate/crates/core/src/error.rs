use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("degenerate feature")]
    DegenerateFeature,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid probability vector: {0}")]
    InvalidProb(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("bank underfilled: need {needed} neighbours, {available} candidates available")]
    BankUnderfilled { needed: usize, available: usize },

    #[error("no complementary label exists for {classes} classes")]
    NoComplementaryLabel { classes: usize },

    #[error("feature is not unit-norm (norm {norm})")]
    NotUnitNorm { norm: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unlabelled source sample {0}")]
    Unlabelled(u64),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("config serialize error: {0}")]
    ConfigSerialize(#[from] toml::ser::Error),
}
