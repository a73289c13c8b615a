use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{detection_loss, DetectionTargets, LossWeights};
use super::optim::{clip_grad_norm, MomentumSgd};
use crate::error::{Error, Result};
use crate::model::{forward_window, ModelConfig, StsnParams};
use crate::scalar::Scalar;
use crate::synthvid::Clip;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Samples whose gradients are averaged per update.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Iteration from which the rate is multiplied by `decay_factor`.
    pub decay_at: usize,
    pub decay_factor: f64,
    pub momentum: f64,
    /// Supporting frames on each side of the reference (`K_train`).
    pub support_frames: usize,
    /// Supporting frames are drawn at most this many frames from the reference.
    pub support_radius: usize,
    /// Chance of training on the clip's designated (degraded) reference frame
    /// instead of a uniformly drawn one.
    pub designated_reference_prob: f64,
    pub loss: LossWeights,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Step-size multiplier for the offset predictors of the sampling block.
    pub offset_lr_scale: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 2,
            learning_rate: 1e-2,
            decay_at: 2000,
            decay_factor: 0.1,
            momentum: 0.9,
            support_frames: 1,
            support_radius: 2,
            designated_reference_prob: 0.5,
            loss: LossWeights { cls: 100.0, bbox: 1.0 },
            grad_clip: Some(2.0),
            offset_lr_scale: 1.0,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::invalid("iterations and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.designated_reference_prob) {
            return Err(Error::invalid("designated_reference_prob must lie in [0, 1]"));
        }
        if self.support_radius == 0 || self.log_every == 0 {
            return Err(Error::invalid("support_radius and log_every must be positive"));
        }
        if !(self.loss.cls >= 0.0 && self.loss.bbox >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if !(self.offset_lr_scale > 0.0) {
            return Err(Error::invalid("offset_lr_scale must be positive"));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        if iteration >= self.decay_at {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: StsnParams<T>,
    /// Loss of every iteration.
    pub losses: Vec<f64>,
    /// `(iteration, mean loss over the trailing log_every iterations)`, every `log_every` iterations.
    pub curve: Vec<(usize, f64)>,
}

/// Reference frame followed by the window `[before_K … before_1, t, after_1 … after_K]`.
fn sample_window(rng: &mut ChaCha8Rng, clip: &Clip, tc: &TrainConfig) -> (usize, Vec<usize>) {
    let n = clip.len();
    let t = if rng.gen_bool(tc.designated_reference_prob) {
        clip.reference
    } else {
        rng.gen_range(0..n)
    };
    let r = tc.support_radius as isize;
    let k = tc.support_frames as isize;
    let mut before = Vec::new();
    let mut after = Vec::new();
    for j in 1..=k {
        let span = (j - 1) * r;
        before.push(t as isize - span - rng.gen_range(1..=r));
        after.push(t as isize + span + rng.gen_range(1..=r));
    }
    let clamp = |i: isize| i.clamp(0, n as isize - 1) as usize;
    let mut window: Vec<usize> = before.into_iter().rev().map(clamp).collect();
    window.push(t);
    window.extend(after.into_iter().map(clamp));
    (t, window)
}

/// Loss and parameter gradients for one reference frame and window.
fn sample_gradient<T: Scalar>(
    params: &StsnParams<T>,
    model: &ModelConfig,
    clip: &Clip,
    t: usize,
    window: &[usize],
    weights: LossWeights,
) -> Result<(f64, StsnParams<T>)> {
    let gt: Vec<_> = clip.boxes[t].iter().map(|b| (b.class_id, b.bbox)).collect();
    let targets = DetectionTargets::<T>::build(&gt, model)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let out = forward_window(&mut tape, &bound, model, window, |tape, i| tape.constant(&clip.frame::<T>(i)))?;
    let loss = detection_loss(&mut tape, &out.head, &targets, weights)?;
    let value = tape.value(loss.total)?.item().to_f64_lossy();
    let grads = tape.backward(loss.total)?;
    Ok((value, params.gradients(&bound, &grads)?))
}

fn add_params<T: Scalar>(mut acc: StsnParams<T>, g: &StsnParams<T>) -> Result<StsnParams<T>> {
    for (a, (_, b)) in acc.tensors_mut().into_iter().zip(g.named_tensors()) {
        let sum = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        *a = Tensor::new(a.dims(), sum)?;
    }
    Ok(acc)
}

/// Trains `params` on `clips`, calling `on_log(iteration, mean_loss)` every `log_every` iterations.
///
/// Each iteration draws `batch_size` samples (clip, reference frame and
/// `K_train` supporting frames on each side), averages their gradients and
/// takes one momentum step on the detection loss.
/// With `support_frames = 0` the window is the reference frame alone.
/// Deterministic for a fixed `seed`.
pub fn train<T: Scalar>(
    params: StsnParams<T>,
    model: &ModelConfig,
    clips: &[Clip],
    tc: &TrainConfig,
    mut on_log: impl FnMut(usize, f64),
) -> Result<TrainOutcome<T>> {
    tc.validate()?;
    model.validate()?;
    if clips.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let want = [model.in_channels, model.image_h, model.image_w];
    if clips.iter().any(|c| c.frames.dims()[1..] != want) {
        return Err(Error::invalid("clip dims do not match the model input"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = MomentumSgd::new(tc.momentum)?;
    let mut params = params;
    let mut losses = Vec::with_capacity(tc.iterations);
    let mut curve = Vec::new();
    for it in 0..tc.iterations {
        let diverged = |e: Error| Error::Diverged {
            iteration: it,
            detail: e.to_string(),
        };
        let mut value = 0.0;
        let mut batch_grad: Option<StsnParams<T>> = None;
        for _ in 0..tc.batch_size {
            let clip = &clips[rng.gen_range(0..clips.len())];
            let (t, window) = sample_window(&mut rng, clip, tc);
            let (loss, g) = sample_gradient(&params, model, clip, t, &window, tc.loss).map_err(diverged)?;
            if !loss.is_finite() {
                return Err(diverged(Error::NonFinite { op: "detection_loss" }));
            }
            value += loss / tc.batch_size as f64;
            batch_grad = Some(match batch_grad {
                None => g,
                Some(acc) => add_params(acc, &g)?,
            });
        }
        let mut g = batch_grad.expect("batch_size > 0");
        if tc.batch_size > 1 {
            let s = T::from_f64_lossy(1.0 / tc.batch_size as f64);
            for t in g.tensors_mut() {
                *t = t.map(|v| v * s);
            }
        }
        if let Some(max) = tc.grad_clip {
            clip_grad_norm(&mut g, max);
        }
        if tc.offset_lr_scale != 1.0 {
            let s = T::from_f64_lossy(tc.offset_lr_scale);
            for l in g.sampling.offset.iter_mut() {
                l.params.weight = l.params.weight.map(|v| v * s);
                l.params.bias = l.params.bias.map(|v| v * s);
            }
        }
        opt.step(&mut params, &g, tc.learning_rate_at(it)).map_err(diverged)?;

        losses.push(value);
        if it % tc.log_every == 0 || it + 1 == tc.iterations {
            let from = (it + 1).saturating_sub(tc.log_every);
            let mean = losses[from..].iter().sum::<f64>() / (it + 1 - from) as f64;
            curve.push((it, mean));
            on_log(it, mean);
        }
    }
    Ok(TrainOutcome { params, losses, curve })
}
