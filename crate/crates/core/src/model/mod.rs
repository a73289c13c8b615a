//! Spatiotemporal sampling network.
//!
//! A small conv backbone turns each frame into a `[c, h, w]` feature map.
//! For every frame in the window around the reference frame, the sampling
//! block predicts offsets from the concatenated reference/support features
//! and resamples the supporting features with a deformable convolution. The
//! resampled maps are mixed per pixel with softmax-normalized
//! `exp(cosine similarity)` weights and fed to a dense detection head.

mod config;
mod decode;
mod forward;
mod params;

pub use config::ModelConfig;
pub use decode::{decode_box, decode_detections, encode_box, Detection};
pub use forward::{
    aggregate, aggregation_weights, backbone_forward, detection_head, embed, forward_window, sampling_block,
    supporting_frame_indices, ForwardOutput, HeadOutput, SampledFeatures, COSINE_EPS,
};
pub use params::{AggregationSubnetParams, BoundLayer, BoundParams, HeadParams, Layer, SamplingBlockParams, StsnParams};

use crate::conv::OffsetField;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Result of running the network on one reference frame.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub detections: Vec<Detection>,
    /// `[2K+1, h, w]`, window order `t−K·k … t+K·k`.
    pub weights: Tensor<T>,
    /// `o⁽⁴⁾` for each window position.
    pub offsets: Vec<OffsetField<T>>,
    pub scores: Tensor<T>,
    pub boxes: Tensor<T>,
    pub frame_indices: Vec<usize>,
}

/// Full pipeline for reference frame `t` of `frames` (each `[in_channels, H, W]`).
pub fn stsn_forward<T: Scalar>(
    frames: &[Tensor<T>],
    t: usize,
    config: &ModelConfig,
    params: &StsnParams<T>,
    score_threshold: f64,
) -> Result<Prediction<T>> {
    if frames.is_empty() {
        return Err(Error::invalid("clip has no frames"));
    }
    if t >= frames.len() {
        return Err(Error::invalid(format!("reference frame {t} outside clip of {}", frames.len())));
    }
    let indices = supporting_frame_indices(t, config.support_frames, config.temporal_stride, frames.len());
    predict_window(frames, &indices, config, params, score_threshold)
}

/// Like [`stsn_forward`] with an explicit window of frame indices.
pub fn predict_window<T: Scalar>(
    frames: &[Tensor<T>],
    indices: &[usize],
    config: &ModelConfig,
    params: &StsnParams<T>,
    score_threshold: f64,
) -> Result<Prediction<T>> {
    config.validate()?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let out = forward_window(&mut tape, &bound, config, indices, |tape, i| {
        let f = frames
            .get(i)
            .ok_or_else(|| Error::invalid(format!("frame index {i} out of range")))?;
        tape.constant(f)
    })?;
    let scores = tape.value(out.head.scores)?.clone();
    let boxes = tape.value(out.head.boxes)?.clone();
    let (h, w) = config.feature_dims();
    let spec = params.sampling.deform[3].spec;
    let offsets = out
        .offsets
        .iter()
        .map(|&o| OffsetField::new(&spec, h, w, tape.value(o)?.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prediction {
        detections: decode_detections(&scores, &boxes, score_threshold, config),
        weights: tape.value(out.weights)?.clone(),
        offsets,
        scores,
        boxes,
        frame_indices: out.frame_indices,
    })
}
