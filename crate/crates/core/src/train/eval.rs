use serde::{Deserialize, Serialize};

use super::loss::center_cell;
use super::metrics::{mean_average_precision, nms, MATCH_IOU, NMS_THRESHOLD};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::model::{predict_window, supporting_frame_indices, Detection, ModelConfig, StsnParams};
use crate::scalar::Scalar;
use crate::synthvid::Clip;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// `K_eval`: supporting frames on each side.
    pub support_frames: usize,
    pub temporal_stride: usize,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            support_frames: 2,
            temporal_stride: 1,
            score_threshold: 0.01,
            nms_threshold: NMS_THRESHOLD,
            iou_threshold: MATCH_IOU,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("score_threshold", self.score_threshold),
            ("nms_threshold", self.nms_threshold),
            ("iou_threshold", self.iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.temporal_stride == 0 {
            return Err(Error::invalid("temporal_stride must be positive"));
        }
        Ok(())
    }
}

/// Final-layer offset at one object centre for one window position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetSample {
    pub clip: usize,
    pub object: usize,
    /// Window position relative to the reference: `−K..=K`.
    pub k: isize,
    pub frame: usize,
    /// Mean `o⁽⁴⁾` over the kernel taps at the centre cell, in image pixels `(dy, dx)`.
    pub mean_offset: (f64, f64),
    /// True object displacement from the reference frame to `frame`, in pixels.
    pub motion: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    /// Post-NMS detections on each clip's reference frame.
    pub detections: Vec<Vec<Detection>>,
    /// Mean aggregation weight at gt centres per window position `−K..=K`.
    pub weight_profile: Vec<f64>,
    pub offsets: Vec<OffsetSample>,
}

/// Ground truth `(class, box)` on the designated reference frame.
pub fn reference_gt(clip: &Clip) -> Vec<(usize, BBox)> {
    clip.boxes[clip.reference].iter().map(|b| (b.class_id, b.bbox)).collect()
}

/// Runs the model on every clip's designated reference frame.
pub fn evaluate<T: Scalar>(params: &StsnParams<T>, model: &ModelConfig, clips: &[Clip], ec: &EvalConfig) -> Result<EvalReport> {
    ec.validate()?;
    if clips.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let cfg = ModelConfig {
        support_frames: ec.support_frames,
        temporal_stride: ec.temporal_stride,
        ..model.clone()
    };
    cfg.validate()?;
    let stride = cfg.head_stride as f64;
    let window = cfg.window();
    let mut detections = Vec::with_capacity(clips.len());
    let mut gt = Vec::with_capacity(clips.len());
    let mut weight_sum = vec![0.0; window];
    let mut centres = 0usize;
    let mut offsets = Vec::new();
    for (ci, clip) in clips.iter().enumerate() {
        let frames = clip.frame_tensors::<T>();
        let t = clip.reference;
        let indices = supporting_frame_indices(t, cfg.support_frames, cfg.temporal_stride, clip.len());
        let pred = predict_window(&frames, &indices, &cfg, params, ec.score_threshold)?;
        detections.push(nms(&pred.detections, ec.nms_threshold));
        let ref_gt = reference_gt(clip);
        for (object, (_, bbox)) in ref_gt.iter().enumerate() {
            let (i, j) = center_cell(bbox, &cfg);
            for (k, slot) in weight_sum.iter_mut().enumerate() {
                *slot += pred.weights.at(&[k, i, j]).to_f64_lossy();
            }
            centres += 1;
            for (k, (&frame, field)) in indices.iter().zip(&pred.offsets).enumerate() {
                let (dy, dx) = field.mean_at(i, j);
                offsets.push(OffsetSample {
                    clip: ci,
                    object,
                    k: k as isize - cfg.support_frames as isize,
                    frame,
                    mean_offset: (dy.to_f64_lossy() * stride, dx.to_f64_lossy() * stride),
                    motion: clip.displacement(object, t, frame),
                });
            }
        }
        gt.push(ref_gt);
    }
    let report = mean_average_precision(&detections, &gt, ec.iou_threshold)?;
    Ok(EvalReport {
        map: report.map,
        per_class_ap: report.per_class,
        detections,
        weight_profile: weight_sum.iter().map(|s| s / centres.max(1) as f64).collect(),
        offsets,
    })
}

/// mAP for each `K_eval` in `ks`, other settings from `base`.
pub fn ablation_frame_count<T: Scalar>(
    params: &StsnParams<T>,
    model: &ModelConfig,
    clips: &[Clip],
    base: &EvalConfig,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    ks.iter()
        .map(|&k| {
            let ec = EvalConfig {
                support_frames: k,
                ..base.clone()
            };
            Ok((k, evaluate(params, model, clips, &ec)?.map))
        })
        .collect()
}

/// mAP for each temporal stride, other settings from `base`.
pub fn ablation_stride<T: Scalar>(
    params: &StsnParams<T>,
    model: &ModelConfig,
    clips: &[Clip],
    base: &EvalConfig,
    strides: &[usize],
) -> Result<Vec<(usize, f64)>> {
    strides
        .iter()
        .map(|&s| {
            let ec = EvalConfig {
                temporal_stride: s,
                ..base.clone()
            };
            Ok((s, evaluate(params, model, clips, &ec)?.map))
        })
        .collect()
}

/// Mean aggregation weight at gt centres of the reference frames, per `k = −K..=K`.
pub fn weight_profile<T: Scalar>(params: &StsnParams<T>, model: &ModelConfig, clips: &[Clip], k: usize) -> Result<Vec<f64>> {
    let ec = EvalConfig {
        support_frames: k,
        ..Default::default()
    };
    Ok(evaluate(params, model, clips, &ec)?.weight_profile)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    pub cases: usize,
    pub agreeing: usize,
}

impl TrackingSummary {
    pub fn fraction(&self) -> f64 {
        if self.cases == 0 {
            0.0
        } else {
            self.agreeing as f64 / self.cases as f64
        }
    }
}

/// Cosine similarity of two 2-vectors; zero when either vanishes.
pub fn cosine2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let na = a.0.hypot(a.1);
    let nb = b.0.hypot(b.1);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (a.0 * b.0 + a.1 * b.1) / (na * nb)
    }
}

/// Counts supporting-frame samples whose object moved at least `min_motion`
/// pixels and whose mean offset points along the motion (`cosine > min_cosine`).
pub fn offset_tracking(samples: &[OffsetSample], min_motion: f64, min_cosine: f64) -> TrackingSummary {
    let moving: Vec<&OffsetSample> = samples
        .iter()
        .filter(|s| s.k != 0 && s.motion.0.hypot(s.motion.1) >= min_motion)
        .collect();
    TrackingSummary {
        cases: moving.len(),
        agreeing: moving
            .iter()
            .filter(|s| cosine2(s.mean_offset, s.motion) > min_cosine)
            .count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthvid::{generate_dataset, ClipConfig};

    fn setup() -> (ModelConfig, Vec<Clip>, StsnParams<f64>) {
        let model = ModelConfig {
            feature_channels: 4,
            image_h: 16,
            image_w: 16,
            embed_channels: [2, 2, 4],
            ..Default::default()
        };
        let clips = generate_dataset(
            &ClipConfig {
                frames: 5,
                image_h: 16,
                image_w: 16,
                max_objects: 1,
                object_size: (4, 6),
                speed: (1, 2),
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let p = StsnParams::init(&model, 7).unwrap();
        (model, clips, p)
    }

    #[test]
    fn profile_sums_to_one_and_frozen_clips_are_uniform() {
        let (model, clips, p) = setup();
        let frozen: Vec<Clip> = clips.iter().map(|c| c.frozen_at(c.reference)).collect();
        for k in [1, 2] {
            let prof = weight_profile(&p, &model, &clips, k).unwrap();
            assert_eq!(prof.len(), 2 * k + 1);
            assert!((prof.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for w in weight_profile(&p, &model, &frozen, k).unwrap() {
                assert!((w - 1.0 / (2 * k + 1) as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn frame_count_ablation_is_flat_on_frozen_clips() {
        let (model, clips, p) = setup();
        let frozen: Vec<Clip> = clips.iter().map(|c| c.frozen_at(c.reference)).collect();
        let ec = EvalConfig {
            score_threshold: 0.0,
            ..Default::default()
        };
        let curve = ablation_frame_count(&p, &model, &frozen, &ec, &[0, 1, 2]).unwrap();
        for (_, m) in &curve {
            assert!((m - curve[0].1).abs() < 1e-9);
        }
        let plain = evaluate(&p, &model, &frozen, &EvalConfig { support_frames: 0, ..ec }).unwrap();
        assert_eq!(curve[0].1, plain.map);
    }

    #[test]
    fn zero_init_offsets_are_zero() {
        let (model, clips, p) = setup();
        let r = evaluate(&p, &model, &clips, &EvalConfig::default()).unwrap();
        assert!(!r.offsets.is_empty());
        assert!(r.offsets.iter().all(|s| s.mean_offset == (0.0, 0.0)));
        assert_eq!(offset_tracking(&r.offsets, 0.0, 0.5).agreeing, 0);
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine2((1.0, 0.0), (2.0, 0.0)), 1.0);
        assert_eq!(cosine2((1.0, 0.0), (0.0, 3.0)), 0.0);
        assert_eq!(cosine2((0.0, 0.0), (1.0, 1.0)), 0.0);
        assert!(EvalConfig { nms_threshold: 1.5, ..Default::default() }.validate().is_err());
    }
}
