//! End-to-end license-plate location and recognition toolkit.
//!
//! The crate covers everything between a backbone's feature maps and the
//! final plate string:
//!
//! * [`tensor`] — minimal dense `B×C×H×W` tensors and the handful of ops the
//!   pipeline needs (convolution, pooling, upsampling, bilinear sampling).
//! * [`fusion`] — pyramid construction and fusion of four backbone stages
//!   into one shared 128-channel map at 1/4 resolution.
//! * [`heatmap`] — encoding plate annotations into center/corner heatmaps
//!   plus regression maps, and decoding peaks back into detections.
//! * [`rectify`] — RoIAlign crops and homography-based perspective
//!   rectification of plate regions.
//! * [`recognize`] — the convolutional recognition head, greedy and prefix
//!   beam-search CTC decoding, and rule-based post-processing.
//! * [`loss`] — focal, masked-L1 and CTC losses with analytic gradients.
//! * [`fixtures`], [`eval`], [`ptar`], [`schema`] — synthetic scene
//!   generation, detection/end-to-end metrics, the tensor-archive file
//!   format, and the JSON annotation/prediction schemas.
//!
//! Numeric code is generic over the scalar storage type via [`scalar::Scalar`]
//! (`f32` for the pipeline, `f64` where tests need tighter tolerances);
//! reductions always accumulate in `f64` so results do not depend on the
//! storage width more than storage rounding itself.

pub mod error;
pub mod eval;
pub mod fixtures;
pub mod fusion;
pub mod geometry;
pub mod heatmap;
pub mod loss;
pub mod ptar;
pub mod recognize;
pub mod rectify;
pub mod scalar;
pub mod schema;
pub mod tensor;

pub use error::{Error, Result};

/// Single-precision tensor, the storage type used by the file formats and CLI.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used where tests demand 64-bit tolerances.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision convolution layer.
pub type ConvSpec32 = tensor::ConvSpec<f32>;
/// Single-precision encoded detection targets.
pub type DetectionTargets32 = heatmap::DetectionTargets<f32>;
/// Single-precision recognition-head output.
pub type RecognitionOutput32 = recognize::RecognitionOutput<f32>;
