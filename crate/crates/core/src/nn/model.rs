use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::tensor::DenseTensor;
use crate::fmath;
use crate::{Error, Result};

/// Per-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// One dense layer: `y = act(W x + b)` with `W` of shape `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: DenseTensor,
    pub bias: DenseTensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Model parameters of one client: feature extractor layers followed by a
/// single linear decision classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub extractor: Vec<DenseLayer>,
    pub classifier: DenseLayer,
}

impl ModelParams {
    /// Check the dimension chain: layer outputs feed the next layer's input
    /// and the extractor output dimension equals the classifier input.
    pub fn validate(&self) -> Result<()> {
        if self.extractor.is_empty() {
            return Err(Error::ShapeMismatch("extractor has no layers".into()));
        }
        for w in self.extractor.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "extractor chain breaks: {} -> {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        let proto = self.extractor.last().unwrap().out_dim();
        if proto != self.classifier.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "extractor output {} != classifier input {}",
                proto,
                self.classifier.in_dim()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.extractor[0].in_dim()
    }

    /// Dimension of the compressed feature space (prototype dimension).
    pub fn proto_dim(&self) -> usize {
        self.extractor.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.out_dim()
    }
}

/// Gradients, shape-congruent with the [`ModelParams`] they differentiate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub extractor: Vec<LayerGrad>,
    pub classifier: LayerGrad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: DenseTensor,
    pub bias: DenseTensor,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let layer_zeros = |l: &DenseLayer| LayerGrad {
            weight: DenseTensor::zeros(l.weight.shape().to_vec()),
            bias: DenseTensor::zeros(l.bias.shape().to_vec()),
        };
        GradientSet {
            extractor: params.extractor.iter().map(layer_zeros).collect(),
            classifier: layer_zeros(&params.classifier),
        }
    }

    fn congruent_with(&self, params: &ModelParams) -> bool {
        self.extractor.len() == params.extractor.len()
            && self
                .extractor
                .iter()
                .zip(&params.extractor)
                .all(|(g, l)| g.weight.shape() == l.weight.shape() && g.bias.shape() == l.bias.shape())
            && self.classifier.weight.shape() == params.classifier.weight.shape()
            && self.classifier.bias.shape() == params.classifier.bias.shape()
    }
}

fn init_layer(out: usize, inp: usize, activation: Activation, rng: &mut impl Rng) -> DenseLayer {
    // Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], zero bias.
    let bound = 1.0 / fmath::sqrt(inp as f64);
    let data: Vec<f64> = (0..out * inp).map(|_| rng.gen_range(-bound..bound)).collect();
    DenseLayer {
        weight: DenseTensor::new(vec![out, inp], data).unwrap(),
        bias: DenseTensor::zeros(vec![out]),
        activation,
    }
}

/// Build the desk-scale model: `input -> hidden (ReLU) -> proto_dim` extractor
/// and a linear `proto_dim -> n_classes` classifier.
pub fn init_model(
    input_dim: usize,
    hidden_dim: usize,
    proto_dim: usize,
    n_classes: usize,
    rng: &mut impl Rng,
) -> ModelParams {
    ModelParams {
        extractor: vec![
            init_layer(hidden_dim, input_dim, Activation::Relu, rng),
            init_layer(proto_dim, hidden_dim, Activation::Linear, rng),
        ],
        classifier: init_layer(n_classes, proto_dim, Activation::Linear, rng),
    }
}

fn apply_layer(layer: &DenseLayer, x: &DenseTensor) -> Result<DenseTensor> {
    let (rows, inp) = match x.shape() {
        [d] => (1usize, *d),
        [n, d] => (*n, *d),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "expected rank 1 or 2 input, got shape {other:?}"
            )))
        }
    };
    if inp != layer.in_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input dim {} != layer in dim {}",
            inp,
            layer.in_dim()
        )));
    }
    let out = layer.out_dim();
    let w = layer.weight.as_slice();
    let b = layer.bias.as_slice();
    let xs = x.as_slice();
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        let xi = &xs[r * inp..(r + 1) * inp];
        for o in 0..out {
            let wo = &w[o * inp..(o + 1) * inp];
            let mut acc = b[o];
            for (wv, xv) in wo.iter().zip(xi) {
                acc += wv * xv;
            }
            y[r * out + o] = match layer.activation {
                Activation::Relu => {
                    if acc > 0.0 {
                        acc
                    } else {
                        0.0
                    }
                }
                Activation::Linear => acc,
            };
        }
    }
    if x.rank() == 1 {
        DenseTensor::new(vec![out], y)
    } else {
        DenseTensor::new(vec![rows, out], y)
    }
}

/// Map raw sample features to compressed features. Accepts a single sample
/// (rank 1) or a batch (rank 2, one sample per row).
pub fn forward_extract(params: &ModelParams, x: &DenseTensor) -> Result<DenseTensor> {
    let mut cur = x.clone();
    for layer in &params.extractor {
        cur = apply_layer(layer, &cur)?;
    }
    Ok(cur)
}

/// Map compressed features to class logits.
pub fn forward_classify(params: &ModelParams, u: &DenseTensor) -> Result<DenseTensor> {
    apply_layer(&params.classifier, u)
}

/// One plain SGD step: `w' = w - eta * g`. Returns new parameters.
pub fn sgd_step(params: &ModelParams, grads: &GradientSet, eta: f64) -> Result<ModelParams> {
    if !grads.congruent_with(params) {
        return Err(Error::ShapeMismatch(
            "gradient set not congruent with parameters".into(),
        ));
    }
    let step_layer = |l: &DenseLayer, g: &LayerGrad| {
        let w: Vec<f64> = l
            .weight
            .as_slice()
            .iter()
            .zip(g.weight.as_slice())
            .map(|(wv, gv)| wv - eta * gv)
            .collect();
        let b: Vec<f64> = l
            .bias
            .as_slice()
            .iter()
            .zip(g.bias.as_slice())
            .map(|(bv, gv)| bv - eta * gv)
            .collect();
        DenseLayer {
            weight: DenseTensor::new(l.weight.shape().to_vec(), w).unwrap(),
            bias: DenseTensor::new(l.bias.shape().to_vec(), b).unwrap(),
            activation: l.activation,
        }
    };
    Ok(ModelParams {
        extractor: params
            .extractor
            .iter()
            .zip(&grads.extractor)
            .map(|(l, g)| step_layer(l, g))
            .collect(),
        classifier: step_layer(&params.classifier, &grads.classifier),
    })
}
