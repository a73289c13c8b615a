//! Loss, optimizer, training loop, detection metrics and ablations.

mod eval;
mod loss;
mod metrics;
mod optim;
mod trainer;

pub use eval::{
    ablation_frame_count, ablation_stride, cosine2, evaluate, offset_tracking, reference_gt, weight_profile, EvalConfig,
    EvalReport, OffsetSample, TrackingSummary,
};
pub use loss::{center_cell, detection_loss, DetectionLoss, DetectionTargets, LossWeights};
pub use metrics::{average_precision, map_at_05, mean_average_precision, nms, MapReport, MATCH_IOU, NMS_THRESHOLD};
pub use optim::{clip_grad_norm, MomentumSgd};
pub use trainer::{train, TrainConfig, TrainOutcome};
