//! Cascade assembly, early-exit inference and cost accounting.

mod infer;
mod macs;
mod model;
mod spec;

pub use infer::{
    batch_infer, ci_infer, run_cascade, ClassifierOutput, ComponentSource, InferenceTrace, ModelRunner,
    RecordedOutputs, Threshold, ThresholdVector,
};
pub use macs::{LayerMacs, MacTable};
pub use model::{build_cascade, CascadeModel};
pub use spec::{ArchConfig, CascadeSpec, ComponentSpec, Preset, MAX_DIM};
