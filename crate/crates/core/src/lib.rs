//! Edge deployment toolchain for a small crack-classification CNN.
//!
//! The flow mirrors a vendor NPU toolchain: describe the network
//! ([`graph`]), load it ([`model_io`]), check it against a device profile
//! ([`compat`]), compress and quantize it ([`optimize`]), package it into a
//! single `.enef` binary ([`enef`]) and run it with integer-only kernels
//! ([`runtime`]). [`harness`] provides synthetic data, a hand-built reference
//! classifier and evaluation.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choice.

pub mod compat;
pub mod enef;
pub mod graph;
pub mod harness;
pub mod model_io;
pub mod optimize;
pub mod runtime;
pub mod scalar;

pub use compat::{
    check_compat, default_kl520_profile, estimate_memory, strip_unsupported_head, DeviceProfile, KL520_MEMORY_BYTES,
};
pub use enef::{pack, unpack, EnefArchive, EnefError, Metadata};
pub use graph::{
    build_reference_net, infer_shapes, validate_graph, DataType, GraphBuilder, GraphError, ModelGraph, NodeSpec,
    OpKind, Padding, TensorSpec, Violation, ViolationCode,
};
pub use model_io::{ImageBuffer, Label, LabeledSample, ModelIoError};
pub use optimize::{
    compute_qparams, compute_requant, quantize_model, CalibrationStats, QuantParams, QuantizedModel,
    RequantMultiplier,
};
pub use runtime::{
    postprocess, preprocess, run_float, run_quant, Classifier, FloatTensor, LatencyStats, Prediction, RawOutput,
};
pub use scalar::Scalar;

/// Single-precision model graph.
pub type Model = ModelGraph<f32>;
/// Double-precision model graph.
pub type Model64 = ModelGraph<f64>;
/// Single-precision activation tensor.
pub type Tensor = FloatTensor<f32>;
/// Double-precision activation tensor.
pub type Tensor64 = FloatTensor<f64>;
