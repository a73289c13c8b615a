//! Spatiotemporal sampling network for object detection in video.
//!
//! Layers, bottom up:
//! - [`tensor`], [`tape`], [`gradcheck`]: dense tensors with reverse-mode autodiff
//! - [`conv`]: standard and deformable convolution with bilinear sampling
//! - [`model`]: backbone, spatiotemporal sampling block, temporal aggregation, dense head
//! - [`synthvid`]: deterministic synthetic clips with degraded reference frames
//! - [`train`]: loss, momentum SGD, IoU / NMS / mAP and the ablation procedures
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common widths.

pub mod bbox;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod scalar;
pub mod synthvid;
pub mod tape;
pub mod tensor;
pub mod train;

pub use bbox::{iou, BBox};
pub use conv::{bilinear_sample, ConvParams, ConvSpec, OffsetField};
pub use error::{Error, Result};
pub use gradcheck::finite_difference_grad;
pub use model::{stsn_forward, ModelConfig, Prediction, StsnParams};
pub use scalar::Scalar;
pub use tape::{GradientMap, Tape, Var};
pub use tensor::Tensor;
pub use train::{evaluate, map_at_05, nms, train, EvalConfig, EvalReport, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
