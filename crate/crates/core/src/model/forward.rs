//! The forward graph: backbone, spatiotemporal sampling, aggregation, head.

use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::params::{BoundLayer, BoundParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Added to the norm product in the cosine similarity so zero embeddings stay finite.
pub const COSINE_EPS: f64 = 1e-8;

/// Per-frame feature extractor: 3×3 conv + relu layers.
pub fn backbone_forward<T: Scalar>(tape: &mut Tape<T>, frame: Var, layers: &[BoundLayer], config: &ModelConfig) -> Result<Var> {
    let want = [config.in_channels, config.image_h, config.image_w];
    if tape.dims(frame)? != want {
        return Err(Error::ShapeMismatch {
            op: "backbone_forward",
            left: tape.dims(frame)?.to_vec(),
            right: want.to_vec(),
        });
    }
    let mut x = frame;
    for layer in layers {
        x = layer.conv_relu(tape, x)?;
    }
    Ok(x)
}

/// Outputs of one pass through the sampling block.
#[derive(Clone, Copy, Debug)]
pub struct SampledFeatures {
    /// `g⁽⁴⁾`: the supporting features resampled for the reference frame.
    pub features: Var,
    /// `o⁽⁴⁾`: the offsets used by the final deformable layer.
    pub offsets: Var,
}

/// Four chained deformable layers conditioned on the reference/support pair.
///
/// Layer 1 reads the channel concatenation `[f_ref; f_supp]`, layers 2 and 3
/// read the previous layer's output, and layer 4 applies the offsets
/// predicted from layer 3's output to the original supporting features.
pub fn sampling_block<T: Scalar>(
    tape: &mut Tape<T>,
    f_ref: Var,
    f_supp: Var,
    offset_layers: &[BoundLayer; 4],
    deform_layers: &[BoundLayer; 4],
) -> Result<SampledFeatures> {
    if tape.dims(f_ref)? != tape.dims(f_supp)? {
        return Err(Error::ShapeMismatch {
            op: "sampling_block",
            left: tape.dims(f_ref)?.to_vec(),
            right: tape.dims(f_supp)?.to_vec(),
        });
    }
    let pair = tape.concat_channels(f_ref, f_supp)?;
    let mut g = pair;
    for l in 0..3 {
        let o = deformable_offsets(tape, g, &offset_layers[l], &deform_layers[l])?;
        let y = tape.deform_conv2d(g, o, deform_layers[l].weight, deform_layers[l].bias, &deform_layers[l].spec)?;
        g = tape.relu(y)?;
    }
    let o4 = deformable_offsets(tape, g, &offset_layers[3], &deform_layers[3])?;
    let g4 = tape.deform_conv2d(f_supp, o4, deform_layers[3].weight, deform_layers[3].bias, &deform_layers[3].spec)?;
    Ok(SampledFeatures {
        features: g4,
        offsets: o4,
    })
}

fn deformable_offsets<T: Scalar>(tape: &mut Tape<T>, input: Var, offset: &BoundLayer, deform: &BoundLayer) -> Result<Var> {
    tape.offset_conv(input, offset.weight, offset.bias, &offset.spec, &deform.spec)
}

/// Embedding `S(x)`: 1×1 conv, relu, 3×3 conv, relu, 1×1 conv.
pub fn embed<T: Scalar>(tape: &mut Tape<T>, g: Var, subnet: &[BoundLayer; 3]) -> Result<Var> {
    let x = subnet[0].conv_relu(tape, g)?;
    let x = subnet[1].conv_relu(tape, x)?;
    subnet[2].conv(tape, x)
}

/// Per-pixel aggregation weights `[2K+1, h, w]`.
///
/// Each entry is `exp(cos(S(g_ref)(p), S(g_k)(p)))`, then normalized with a
/// softmax over the window so every pixel's column sums to one.
pub fn aggregation_weights<T: Scalar>(tape: &mut Tape<T>, g_ref: Var, g_list: &[Var], subnet: &[BoundLayer; 3]) -> Result<Var> {
    if g_list.is_empty() {
        return Err(Error::invalid("aggregation needs at least one sampled feature tensor"));
    }
    let eps = T::from_f64_lossy(COSINE_EPS);
    let ref_embed = embed(tape, g_ref, subnet)?;
    let mut cache: BTreeMap<usize, Var> = BTreeMap::new();
    let mut scores = Vec::with_capacity(g_list.len());
    for &g in g_list {
        let e = match cache.get(&g.index()) {
            Some(&e) => e,
            None => {
                let s = if g == g_ref { ref_embed } else { embed(tape, g, subnet)? };
                let cos = tape.cosine_similarity(ref_embed, s, eps)?;
                let e = tape.exp(cos)?;
                cache.insert(g.index(), e);
                e
            }
        };
        scores.push(e);
    }
    let stacked = tape.concat(&scores)?;
    tape.softmax_over_leading_axis(stacked)
}

/// `Σ_k w_k(p) · g_k(p)` with each `[1,h,w]` weight map broadcast over channels.
pub fn aggregate<T: Scalar>(tape: &mut Tape<T>, g_list: &[Var], weights: Var) -> Result<Var> {
    let m = tape.dims(weights)?[0];
    if m != g_list.len() || g_list.is_empty() {
        return Err(Error::invalid(format!(
            "aggregate: {} feature tensors for {} weight maps",
            g_list.len(),
            m
        )));
    }
    let mut acc: Option<Var> = None;
    for (k, &g) in g_list.iter().enumerate() {
        let w = tape.slice(weights, k, 1)?;
        let term = tape.mul(g, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty list"))
}

/// Dense head outputs on the feature grid.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[num_classes, h, w]` pre-sigmoid scores.
    pub logits: Var,
    /// `[num_classes, h, w]` sigmoid objectness.
    pub scores: Var,
    /// `[4, h, w]`: `(dx, dy)` centre offset in cells, `(log w, log h)` in cells.
    pub boxes: Var,
}

pub fn detection_head<T: Scalar>(
    tape: &mut Tape<T>,
    g_agg: Var,
    hidden: &BoundLayer,
    objectness: &BoundLayer,
    regression: &BoundLayer,
) -> Result<HeadOutput> {
    let h = hidden.conv_relu(tape, g_agg)?;
    let logits = objectness.conv(tape, h)?;
    let scores = tape.sigmoid(logits)?;
    let boxes = regression.conv(tape, h)?;
    Ok(HeadOutput { logits, scores, boxes })
}

/// Frame indices `t + j·stride` for `j = −K..=K`, clamped into the clip.
///
/// Clamping repeats the first/last frame at the clip boundaries. The
/// reference frame sits at position `K`.
pub fn supporting_frame_indices(t: usize, support: usize, stride: usize, len: usize) -> Vec<usize> {
    assert!(t < len, "reference frame {t} outside clip of length {len}");
    let k = support as isize;
    (-k..=k)
        .map(|j| (t as isize + j * stride as isize).clamp(0, len as isize - 1) as usize)
        .collect()
}

/// Everything a forward pass produces, as tape variables.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub head: HeadOutput,
    /// `[2K+1, h, w]` aggregation weights.
    pub weights: Var,
    /// `o⁽⁴⁾` for each window position (duplicates share a var).
    pub offsets: Vec<Var>,
    pub g_agg: Var,
    pub frame_indices: Vec<usize>,
}

/// Runs the network for the window `frame_indices` (reference in the middle).
///
/// `frame_var` registers frame `i` on the tape; backbone features and
/// sampled features are computed once per distinct frame index.
pub fn forward_window<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    config: &ModelConfig,
    frame_indices: &[usize],
    mut frame_var: impl FnMut(&mut Tape<T>, usize) -> Result<Var>,
) -> Result<ForwardOutput> {
    if frame_indices.is_empty() || frame_indices.len() % 2 == 0 {
        return Err(Error::invalid("window must hold 2K+1 frame indices"));
    }
    let reference = frame_indices[frame_indices.len() / 2];
    let mut features: BTreeMap<usize, Var> = BTreeMap::new();
    for &i in frame_indices {
        if !features.contains_key(&i) {
            let x = frame_var(tape, i)?;
            let f = backbone_forward(tape, x, &bound.backbone, config)?;
            features.insert(i, f);
        }
    }
    let f_ref = features[&reference];
    let mut sampled: BTreeMap<usize, SampledFeatures> = BTreeMap::new();
    for &i in frame_indices {
        if !sampled.contains_key(&i) {
            let s = sampling_block(tape, f_ref, features[&i], &bound.offset, &bound.deform)?;
            sampled.insert(i, s);
        }
    }
    let g_ref = sampled[&reference].features;
    let g_list: Vec<Var> = frame_indices.iter().map(|i| sampled[i].features).collect();
    let weights = aggregation_weights(tape, g_ref, &g_list, &bound.subnet)?;
    let g_agg = aggregate(tape, &g_list, weights)?;
    let head = detection_head(tape, g_agg, &bound.head_hidden, &bound.head_objectness, &bound.head_regression)?;
    Ok(ForwardOutput {
        head,
        weights,
        offsets: frame_indices.iter().map(|i| sampled[i].offsets).collect(),
        g_agg,
        frame_indices: frame_indices.to_vec(),
    })
}
