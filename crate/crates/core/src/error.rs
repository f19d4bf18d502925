use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}shape mismatch: expected {expected}, got {actual:?}", layer_prefix(*.layer))]
    Shape {
        layer: Option<usize>,
        expected: String,
        actual: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    TensorLength { shape: Vec<usize>, len: usize },

    #[error("backward pass requested without a cached forward state")]
    MissingCache,

    #[error("backward pass requested with an eval-mode cache")]
    EvalCache,

    #[error("cache does not belong to layer variant {0}")]
    CacheMismatch(&'static str),

    #[error("parameter `{0}` not found")]
    MissingParam(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("component {index} out of range (cascade has {count})")]
    ComponentOutOfRange { index: usize, count: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite loss {loss} in phase {phase}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        phase: String,
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("bad magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated input: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("{actual} bytes where the header implies {expected}")]
    TrailingBytes { expected: usize, actual: usize },

    #[error("gzip stream: {0}")]
    Gzip(#[source] std::io::Error),

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("input size {0} is not a multiple of the 3073-byte CIFAR record")]
    CifarRecordSize(usize),

    #[error("record {record}: label byte {label} exceeds 9")]
    CifarLabel { record: usize, label: u8 },

    #[error("not a model file (bad magic {0:?})")]
    ModelMagic([u8; 4]),

    #[error("unsupported model format version {found} (this build reads {supported})")]
    ModelVersion { found: u16, supported: u16 },

    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },

    #[error("parameter section does not align with the spec: {0}")]
    Misaligned(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn layer_prefix(layer: Option<usize>) -> String {
    match layer {
        Some(i) => format!("layer {i}: "),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, actual: &[usize]) -> Self {
        Error::Shape {
            layer: None,
            expected: expected.into(),
            actual: actual.to_vec(),
        }
    }

    /// Attaches a layer index to a shape error that does not carry one yet.
    pub(crate) fn at_layer(self, index: usize) -> Self {
        match self {
            Error::Shape {
                layer: None,
                expected,
                actual,
            } => Error::Shape {
                layer: Some(index),
                expected,
                actual,
            },
            other => other,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
