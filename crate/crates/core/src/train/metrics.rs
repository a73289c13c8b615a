use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::model::Detection;

pub const NMS_THRESHOLD: f64 = 0.3;
pub const MATCH_IOU: f64 = 0.5;

/// Indices sorted by descending score; equal scores keep input order.
fn by_score(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let s: Vec<f64> = scores.collect();
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Greedy per-class non-maximum suppression.
///
/// A box is dropped when its IoU with an already kept box of the same class
/// exceeds `threshold`. Output is sorted by descending score.
pub fn nms(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in by_score(detections.iter().map(|d| d.score)) {
        let d = detections[i];
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= threshold)
        {
            kept.push(d);
        }
    }
    kept
}

/// Area under the all-points interpolated precision/recall curve.
///
/// `hits` lists detections in rank order (true = matched a gt).
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (n, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (n + 1) as f64);
    }
    // running max from the tail gives the precision envelope
    let mut envelope = precision.clone();
    for n in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[n] = envelope[n].max(envelope[n + 1]);
    }
    let sum: f64 = hits
        .iter()
        .zip(&envelope)
        .filter(|(&h, _)| h)
        .fold(0.0, |acc, (_, &p)| acc + p);
    sum / num_gt as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// AP per class id; `None` for classes absent from the ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Ranked hit flags for one class over all images.
fn class_hits(detections: &[Vec<Detection>], gt: &[Vec<(usize, BBox)>], class: usize, threshold: f64) -> Vec<bool> {
    let mut pool: Vec<(usize, Detection)> = Vec::new();
    for (img, dets) in detections.iter().enumerate() {
        pool.extend(dets.iter().filter(|d| d.class_id == class).map(|&d| (img, d)));
    }
    let mut matched: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    by_score(pool.iter().map(|(_, d)| d.score))
        .into_iter()
        .map(|i| {
            let (img, d) = pool[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, (c, b)) in gt.get(img).map(Vec::as_slice).unwrap_or(&[]).iter().enumerate() {
                if *c != class || matched[img][g] {
                    continue;
                }
                let v = iou(&d.bbox, b);
                if v >= threshold && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    matched[img][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Mean AP over classes present in the ground truth.
///
/// `detections[i]` and `gt[i]` belong to image `i`; gt entries are `(class, box)`.
pub fn mean_average_precision(detections: &[Vec<Detection>], gt: &[Vec<(usize, BBox)>], iou_threshold: f64) -> Result<MapReport> {
    if detections.len() != gt.len() {
        return Err(Error::invalid(format!(
            "{} detection lists for {} ground-truth lists",
            detections.len(),
            gt.len()
        )));
    }
    let classes = gt
        .iter()
        .flatten()
        .map(|(c, _)| c + 1)
        .chain(detections.iter().flatten().map(|d| d.class_id + 1))
        .max()
        .unwrap_or(0);
    let mut per_class = vec![None; classes];
    for (c, slot) in per_class.iter_mut().enumerate() {
        let num_gt = gt.iter().flatten().filter(|(k, _)| *k == c).count();
        if num_gt > 0 {
            *slot = Some(average_precision(&class_hits(detections, gt, c, iou_threshold), num_gt));
        }
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::invalid("mAP is undefined without ground truth"));
    }
    Ok(MapReport {
        map: present.iter().fold(0.0, |a, b| a + b) / present.len() as f64,
        per_class,
    })
}

/// [`mean_average_precision`] at IoU 0.5.
pub fn map_at_05(detections: &[Vec<Detection>], gt: &[Vec<(usize, BBox)>]) -> Result<MapReport> {
    mean_average_precision(detections, gt, MATCH_IOU)
}
