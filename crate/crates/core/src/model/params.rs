use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::conv::{ConvParams, ConvSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradientMap, Tape, Var};
use crate::tensor::Tensor;

/// Initial objectness probability encoded in the classification bias.
const OBJECTNESS_PRIOR: f64 = 0.01;

/// One convolution layer: its geometry and its tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub spec: ConvSpec,
    pub params: ConvParams<T>,
}

/// The four deformable layers and their four offset predictors.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingBlockParams<T> {
    pub deform: [Layer<T>; 4],
    pub offset: [Layer<T>; 4],
}

/// Embedding network applied before the cosine similarity: 1×1, 3×3, 1×1.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationSubnetParams<T> {
    pub layers: [Layer<T>; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub hidden: Layer<T>,
    pub objectness: Layer<T>,
    pub regression: Layer<T>,
}

/// Every trainable tensor of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct StsnParams<T> {
    pub backbone: Vec<Layer<T>>,
    pub sampling: SamplingBlockParams<T>,
    pub subnet: AggregationSubnetParams<T>,
    pub head: HeadParams<T>,
}

/// How a layer's weights are drawn at initialization.
#[derive(Clone, Copy, Debug)]
enum Init {
    Zero,
    /// Normal with std `sqrt(gain / fan_in)`.
    Scaled(f64),
    Normal(f64),
}

fn make_layer<T: Scalar>(spec: ConvSpec, init: Init, bias: f64, rng: &mut ChaCha8Rng) -> Layer<T> {
    let n: usize = spec.weight_dims().iter().product();
    let fan_in = (spec.in_channels * spec.taps()) as f64;
    let weights: Vec<T> = match init {
        Init::Zero => vec![T::zero(); n],
        Init::Scaled(gain) => draw(n, (gain / fan_in).sqrt(), rng),
        Init::Normal(std) => draw(n, std, rng),
    };
    Layer {
        spec,
        params: ConvParams {
            weight: Tensor::from_parts(spec.weight_dims().to_vec(), weights),
            bias: Tensor::full(&[spec.out_channels], T::from_f64_lossy(bias)),
        },
    }
}

fn draw<T: Scalar>(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect()
}

impl<T: Scalar> StsnParams<T> {
    /// Deterministic initialization from `seed`.
    ///
    /// He-normal weights for relu layers, zero offset predictors so the
    /// sampling block starts as a plain convolution stack, and an objectness
    /// bias encoding a 1% prior.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.feature_channels;
        let he = Init::Scaled(2.0);

        let mut backbone = Vec::with_capacity(config.backbone_depth);
        let mut cin = config.in_channels;
        for i in 0..config.backbone_depth {
            let stride = if i < config.downsampling_layers() { 2 } else { 1 };
            backbone.push(make_layer(ConvSpec::new(cin, c, 3, stride, 1)?, he, 0.0, &mut rng));
            cin = c;
        }

        let deform_spec = |cin| ConvSpec::same(cin, c, 3);
        let offset_spec = |cin| ConvSpec::same(cin, 18, 3);
        let mut deform = Vec::with_capacity(4);
        let mut offset = Vec::with_capacity(4);
        for l in 0..4 {
            let cin = if l == 0 { 2 * c } else { c };
            offset.push(make_layer(offset_spec(cin)?, Init::Zero, 0.0, &mut rng));
            // the last layer resamples the c-channel supporting features
            let din = if l == 0 { 2 * c } else { c };
            let gain = if l == 3 { 1.0 } else { 2.0 };
            deform.push(make_layer(deform_spec(din)?, Init::Scaled(gain), 0.0, &mut rng));
        }

        let [e1, e2, e3] = config.embed_channels;
        let subnet = AggregationSubnetParams {
            layers: [
                make_layer(ConvSpec::same(c, e1, 1)?, he, 0.0, &mut rng),
                make_layer(ConvSpec::same(e1, e2, 3)?, he, 0.0, &mut rng),
                make_layer(ConvSpec::same(e2, e3, 1)?, Init::Scaled(1.0), 0.0, &mut rng),
            ],
        };

        let prior_bias = -((1.0 - OBJECTNESS_PRIOR) / OBJECTNESS_PRIOR).ln();
        let head = HeadParams {
            hidden: make_layer(ConvSpec::same(c, c, 3)?, he, 0.0, &mut rng),
            objectness: make_layer(ConvSpec::same(c, config.num_classes, 1)?, Init::Normal(0.01), prior_bias, &mut rng),
            regression: make_layer(ConvSpec::same(c, 4, 1)?, Init::Normal(0.01), 0.0, &mut rng),
        };

        Ok(Self {
            backbone,
            sampling: SamplingBlockParams {
                deform: to_array(deform),
                offset: to_array(offset),
            },
            subnet,
            head,
        })
    }

    /// Layers in a fixed canonical order with stable names.
    pub fn layers(&self) -> Vec<(String, &Layer<T>)> {
        let mut out: Vec<(String, &Layer<T>)> = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}"), l));
        }
        for (i, l) in self.sampling.offset.iter().enumerate() {
            out.push((format!("sampling.offset.{i}"), l));
        }
        for (i, l) in self.sampling.deform.iter().enumerate() {
            out.push((format!("sampling.deform.{i}"), l));
        }
        for (i, l) in self.subnet.layers.iter().enumerate() {
            out.push((format!("subnet.{i}"), l));
        }
        out.push(("head.hidden".into(), &self.head.hidden));
        out.push(("head.objectness".into(), &self.head.objectness));
        out.push(("head.regression".into(), &self.head.regression));
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Layer<T>> {
        let mut out: Vec<&mut Layer<T>> = self.backbone.iter_mut().collect();
        out.extend(self.sampling.offset.iter_mut());
        out.extend(self.sampling.deform.iter_mut());
        out.extend(self.subnet.layers.iter_mut());
        out.push(&mut self.head.hidden);
        out.push(&mut self.head.objectness);
        out.push(&mut self.head.regression);
        out
    }

    /// `(name, tensor)` for every weight and bias, e.g. `sampling.deform.3.weight`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.weight"), &l.params.weight),
                    (format!("{name}.bias"), &l.params.bias),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.params.weight, &mut l.params.bias])
            .collect()
    }

    /// Replaces every tensor from a name lookup; dims must match the architecture.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        let names: Vec<String> = self.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(self.tensors_mut()) {
            let t = lookup(name).ok_or_else(|| Error::invalid(format!("missing tensor {name}")))?;
            if t.dims() != slot.dims() {
                return Err(Error::ShapeMismatch {
                    op: "load_named",
                    left: t.dims().to_vec(),
                    right: slot.dims().to_vec(),
                });
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> StsnParams<U> {
        let layer = |l: &Layer<T>| Layer {
            spec: l.spec,
            params: ConvParams {
                weight: l.params.weight.cast(),
                bias: l.params.bias.cast(),
            },
        };
        StsnParams {
            backbone: self.backbone.iter().map(layer).collect(),
            sampling: SamplingBlockParams {
                deform: self.sampling.deform.each_ref().map(layer),
                offset: self.sampling.offset.each_ref().map(layer),
            },
            subnet: AggregationSubnetParams {
                layers: self.subnet.layers.each_ref().map(layer),
            },
            head: HeadParams {
                hidden: layer(&self.head.hidden),
                objectness: layer(&self.head.objectness),
                regression: layer(&self.head.regression),
            },
        }
    }

    /// Registers every tensor on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundParams> {
        let mut bind = |l: &Layer<T>| -> Result<BoundLayer> {
            Ok(BoundLayer {
                spec: l.spec,
                weight: tape.param(&l.params.weight)?,
                bias: tape.param(&l.params.bias)?,
            })
        };
        let backbone = self.backbone.iter().map(&mut bind).collect::<Result<Vec<_>>>()?;
        let offset = self.sampling.offset.iter().map(&mut bind).collect::<Result<Vec<_>>>()?;
        let deform = self.sampling.deform.iter().map(&mut bind).collect::<Result<Vec<_>>>()?;
        let subnet = self.subnet.layers.iter().map(&mut bind).collect::<Result<Vec<_>>>()?;
        Ok(BoundParams {
            backbone,
            offset: to_array(offset),
            deform: to_array(deform),
            subnet: to_array(subnet),
            head_hidden: bind(&self.head.hidden)?,
            head_objectness: bind(&self.head.objectness)?,
            head_regression: bind(&self.head.regression)?,
        })
    }

    /// Gradient tensors in the same layout as `self`.
    pub fn gradients(&self, bound: &BoundParams, grads: &GradientMap<T>) -> Result<Self> {
        let mut out = self.clone();
        let vars = bound.vars();
        for (slot, var) in out.tensors_mut().into_iter().zip(vars) {
            *slot = grads
                .get(var)
                .cloned()
                .ok_or_else(|| Error::invalid("gradient missing for a bound parameter"))?;
        }
        Ok(out)
    }
}

fn to_array<X, const N: usize>(v: Vec<X>) -> [X; N] {
    v.try_into()
        .unwrap_or_else(|v: Vec<X>| panic!("expected {N} layers, got {}", v.len()))
}

/// A layer's tensors registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub spec: ConvSpec,
    pub weight: Var,
    pub bias: Var,
}

impl BoundLayer {
    pub fn conv<T: Scalar>(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        tape.conv2d(input, self.weight, self.bias, &self.spec)
    }

    pub fn conv_relu<T: Scalar>(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        let y = self.conv(tape, input)?;
        tape.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct BoundParams {
    pub backbone: Vec<BoundLayer>,
    pub offset: [BoundLayer; 4],
    pub deform: [BoundLayer; 4],
    pub subnet: [BoundLayer; 3],
    pub head_hidden: BoundLayer,
    pub head_objectness: BoundLayer,
    pub head_regression: BoundLayer,
}

impl BoundParams {
    /// Vars in the canonical order of [`StsnParams::tensors_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut layers: Vec<&BoundLayer> = self.backbone.iter().collect();
        layers.extend(self.offset.iter());
        layers.extend(self.deform.iter());
        layers.extend(self.subnet.iter());
        layers.extend([&self.head_hidden, &self.head_objectness, &self.head_regression]);
        layers.into_iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}
