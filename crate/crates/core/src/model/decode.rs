use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::bbox::BBox;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Regression outputs are clamped to this range before `exp` when decoding sizes.
const MAX_LOG_SIZE: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Box for grid cell `(i, j)` given regression `(dx, dy, log w, log h)` in cell units.
///
/// Zero regression gives a one-cell box centred on the cell centre.
pub fn decode_box(i: usize, j: usize, reg: [f64; 4], stride: usize) -> BBox {
    let s = stride as f64;
    let cx = (j as f64 + 0.5 + reg[0]) * s;
    let cy = (i as f64 + 0.5 + reg[1]) * s;
    let w = reg[2].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp() * s;
    let h = reg[3].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp() * s;
    BBox::from_center(cy, cx, h, w)
}

/// Inverse of [`decode_box`] for a target box assigned to cell `(i, j)`.
pub fn encode_box(i: usize, j: usize, bbox: &BBox, stride: usize) -> [f64; 4] {
    let s = stride as f64;
    let (cy, cx) = bbox.center();
    [
        cx / s - (j as f64 + 0.5),
        cy / s - (i as f64 + 0.5),
        (bbox.width() / s).ln(),
        (bbox.height() / s).ln(),
    ]
}

/// Every `(class, cell)` with score at or above `threshold`, boxes clipped to the image.
///
/// `scores` is `[num_classes, h, w]` (post-sigmoid) and `boxes` is `[4, h, w]`.
/// Boxes that collapse to zero area after clipping are dropped.
pub fn decode_detections<T: Scalar>(scores: &Tensor<T>, boxes: &Tensor<T>, threshold: f64, config: &ModelConfig) -> Vec<Detection> {
    let (nc, h, w) = (scores.dims()[0], scores.dims()[1], scores.dims()[2]);
    let plane = h * w;
    let (ih, iw) = (config.image_h as f64, config.image_w as f64);
    let mut out = Vec::new();
    for c in 0..nc {
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let score = scores.data()[c * plane + p].to_f64_lossy();
                if score < threshold {
                    continue;
                }
                let reg = std::array::from_fn(|k| boxes.data()[k * plane + p].to_f64_lossy());
                let bbox = decode_box(i, j, reg, config.head_stride).clip(ih, iw);
                if bbox.x1 < bbox.x2 && bbox.y1 < bbox.y2 {
                    out.push(Detection { class_id: c, score, bbox });
                }
            }
        }
    }
    out
}
