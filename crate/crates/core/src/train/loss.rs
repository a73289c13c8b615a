use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::model::{encode_box, HeadOutput, ModelConfig};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, bbox: 1.0 }
    }
}

/// Dense training targets on the feature grid.
#[derive(Clone, Debug)]
pub struct DetectionTargets<T> {
    /// `[num_classes, h, w]`, 1 where a gt centre of that class falls in the cell.
    pub classes: Tensor<T>,
    /// `[4, h, w]` encoded regression targets (zero at negative cells).
    pub boxes: Tensor<T>,
    /// `[4, h, w]` indicator of positive cells.
    pub mask: Tensor<T>,
    pub positives: usize,
}

/// Grid cell containing the box centre.
pub fn center_cell(bbox: &BBox, config: &ModelConfig) -> (usize, usize) {
    let (h, w) = config.feature_dims();
    let s = config.head_stride as f64;
    let (cy, cx) = bbox.center();
    let i = ((cy / s).floor().max(0.0) as usize).min(h - 1);
    let j = ((cx / s).floor().max(0.0) as usize).min(w - 1);
    (i, j)
}

impl<T: Scalar> DetectionTargets<T> {
    /// When two boxes share a cell the first one supplies the regression target.
    pub fn build(gt: &[(usize, BBox)], config: &ModelConfig) -> Result<Self> {
        let (h, w) = config.feature_dims();
        let plane = h * w;
        let mut classes = vec![T::zero(); config.num_classes * plane];
        let mut boxes = vec![T::zero(); 4 * plane];
        let mut mask = vec![T::zero(); 4 * plane];
        let mut positives = 0;
        for (class, bbox) in gt {
            if *class >= config.num_classes {
                return Err(Error::invalid(format!("class {class} outside 0..{}", config.num_classes)));
            }
            let (i, j) = center_cell(bbox, config);
            let p = i * w + j;
            classes[class * plane + p] = T::one();
            if mask[p] == T::zero() {
                positives += 1;
                let reg = encode_box(i, j, bbox, config.head_stride);
                for k in 0..4 {
                    mask[k * plane + p] = T::one();
                    boxes[k * plane + p] = T::from_f64_lossy(reg[k]);
                }
            }
        }
        Ok(Self {
            classes: Tensor::new(&[config.num_classes, h, w], classes)?,
            boxes: Tensor::new(&[4, h, w], boxes)?,
            mask: Tensor::new(&[4, h, w], mask)?,
            positives,
        })
    }
}

/// Loss terms as tape variables (scalars).
#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub total: Var,
    pub classification: Var,
    /// `None` when the frame has no positives.
    pub regression: Option<Var>,
}

/// `λ_cls · mean BCE(logits, cell targets) + λ_box · Σ|Δbox| / positives`.
///
/// The regression term is an L1 over the four box coordinates at positive
/// cells, normalized by the number of positive cells.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    head: &HeadOutput,
    targets: &DetectionTargets<T>,
    weights: LossWeights,
) -> Result<DetectionLoss> {
    let bce = tape.bce_with_logits(head.logits, &targets.classes)?;
    let cls = tape.mean(bce)?;
    let classification = tape.scale(cls, T::from_f64_lossy(weights.cls))?;
    if targets.positives == 0 {
        return Ok(DetectionLoss {
            total: classification,
            classification,
            regression: None,
        });
    }
    let target = tape.constant(&targets.boxes)?;
    let mask = tape.constant(&targets.mask)?;
    let diff = tape.sub(head.boxes, target)?;
    let abs = tape.abs(diff)?;
    let masked = tape.mul(abs, mask)?;
    let l1 = tape.sum(masked)?;
    let scale = weights.bbox / targets.positives as f64;
    let regression = tape.scale(l1, T::from_f64_lossy(scale))?;
    let total = tape.add(classification, regression)?;
    Ok(DetectionLoss {
        total,
        classification,
        regression: Some(regression),
    })
}
