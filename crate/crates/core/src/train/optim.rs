use crate::error::{Error, Result};
use crate::model::StsnParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Heavy-ball SGD: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct MomentumSgd<T> {
    pub momentum: f64,
    velocity: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> MomentumSgd<T> {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self { momentum, velocity: None })
    }

    /// Applies one update in place. `grads` must have the layout of `params`.
    pub fn step(&mut self, params: &mut StsnParams<T>, grads: &StsnParams<T>, lr: f64) -> Result<()> {
        let mu = T::from_f64_lossy(self.momentum);
        let lr = T::from_f64_lossy(lr);
        let grad_tensors: Vec<&Tensor<T>> = grads.named_tensors().into_iter().map(|(_, t)| t).collect();
        let slots = params.tensors_mut();
        if grad_tensors.len() != slots.len() {
            return Err(Error::invalid("gradient layout does not match parameters"));
        }
        let velocity = self
            .velocity
            .get_or_insert_with(|| grad_tensors.iter().map(|g| vec![T::zero(); g.len()]).collect());
        for ((slot, g), v) in slots.into_iter().zip(grad_tensors).zip(velocity.iter_mut()) {
            if g.dims() != slot.dims() {
                return Err(Error::ShapeMismatch {
                    op: "momentum_sgd",
                    left: slot.dims().to_vec(),
                    right: g.dims().to_vec(),
                });
            }
            let mut values = slot.to_vec();
            for ((p, &gi), vi) in values.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = mu * *vi + gi;
                *p = *p - lr * *vi;
            }
            *slot = Tensor::new(slot.dims(), values)?;
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut StsnParams<T>, max_norm: f64) -> f64 {
    let norm = grads
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_f64_lossy().powi(2)))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        for t in grads.tensors_mut() {
            *t = t.map(|v| v * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            feature_channels: 4,
            image_h: 16,
            image_w: 16,
            embed_channels: [2, 2, 4],
            ..Default::default()
        }
    }

    #[test]
    fn momentum_recurrence() {
        let p0 = StsnParams::<f64>::init(&small(), 1).unwrap();
        let mut grads = p0.clone();
        for t in grads.tensors_mut() {
            *t = t.map(|_| 1.0);
        }
        let mut p = p0.clone();
        let mut opt = MomentumSgd::new(0.9).unwrap();
        opt.step(&mut p, &grads, 0.1).unwrap();
        opt.step(&mut p, &grads, 0.1).unwrap();
        // v1 = 1, v2 = 1.9 → total step 0.1 · 2.9
        let (a, b) = (&p0.named_tensors()[0].1, &p.named_tensors()[0].1);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y - 0.29).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lr_leaves_params() {
        let p0 = StsnParams::<f64>::init(&small(), 2).unwrap();
        let mut p = p0.clone();
        let mut opt = MomentumSgd::new(0.9).unwrap();
        opt.step(&mut p, &p0, 0.0).unwrap();
        for ((_, a), (_, b)) in p0.named_tensors().iter().zip(p.named_tensors()) {
            assert!(a.bit_eq(b));
        }
        assert!(MomentumSgd::<f64>::new(1.0).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = StsnParams::<f64>::init(&small(), 3).unwrap();
        for t in g.tensors_mut() {
            *t = t.map(|_| 2.0);
        }
        let before = clip_grad_norm(&mut g, 1.0);
        assert!(before > 1.0);
        let after = clip_grad_norm(&mut g, 1e9);
        assert!((after - 1.0).abs() < 1e-9);
    }
}
