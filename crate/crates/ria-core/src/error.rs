use thiserror::Error;

/// Errors surfaced by any stage of the pipeline.
#[derive(Error, Debug)]
pub enum RiaError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violation in {module}: {detail}")]
    Contract {
        module: &'static str,
        detail: String,
    },

    #[error("embedding lookup out of range: field `{field}` index {index} not in [0, {vocab})")]
    Lookup {
        field: String,
        index: usize,
        vocab: usize,
    },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("record `{record_id}` violates invariant `{rule}`")]
    Invariant { record_id: String, rule: String },

    #[error("cache miss for key `{key}`")]
    CacheMiss { key: String },

    #[error("training error on parameter `{param}`: {detail}")]
    Training { param: String, detail: String },

    #[error("metric undefined: {detail}")]
    UndefinedMetric { detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RiaError>;
