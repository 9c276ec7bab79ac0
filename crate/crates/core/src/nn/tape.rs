//! Reverse-mode trace over whole-tensor operations.
//!
//! A [`Tape`] records the forward computation as a list of nodes; [`backward`]
//! runs one reverse sweep and gathers gradients for the parameter leaves.
//! Shape agreement between tape inputs is the caller's responsibility
//! (violations panic); public entry points in `proto` validate beforehand.

use alloc::vec;
use alloc::vec::Vec;

use super::model::{GradientSet, LayerGrad, ModelParams};
use super::tensor::DenseTensor;
use crate::fmath;
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// `[n, in] x [out, in]^T -> [n, out]`
    MatMulT {
        x: Var,
        w: Var,
    },
    /// `[n, d] + [d]` broadcast over rows
    AddRow {
        x: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    /// Mean of the given rows of a `[n, d]` tensor -> `[d]`
    MeanRows {
        x: Var,
        rows: Vec<usize>,
    },
    Dot {
        a: Var,
        b: Var,
    },
    /// Euclidean norm -> scalar
    Norm {
        a: Var,
    },
    /// Mean over rows of `logsumexp(z_i) - z_i[label_i]` -> scalar
    SoftmaxCe {
        z: Var,
        labels: Vec<usize>,
    },
    SAdd {
        a: Var,
        b: Var,
    },
    /// `mul * a + add` on a scalar; the constant term has no gradient
    SAffine {
        a: Var,
        mul: f64,
    },
    SDiv {
        a: Var,
        b: Var,
    },
}

struct Node {
    op: Op,
    value: Vec<f64>,
    shape: Vec<usize>,
}

/// Forward trace builder.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Vec<f64>, shape: Vec<usize>) -> Var {
        self.nodes.push(Node { op, value, shape });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn leaf(&mut self, t: &DenseTensor) -> Var {
        self.push(Op::Leaf, t.as_slice().to_vec(), t.shape().to_vec())
    }

    pub fn leaf_vec(&mut self, v: Vec<f64>) -> Var {
        let n = v.len();
        self.push(Op::Leaf, v, vec![n])
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(Op::Leaf, vec![x], vec![1])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.val(v)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.val(v)[0]
    }

    /// `x [n, in] * w^T` with `w [out, in]` -> `[n, out]`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let (n, inp) = (self.shape_of(x)[0], self.shape_of(x)[1]);
        let (out, win) = (self.shape_of(w)[0], self.shape_of(w)[1]);
        assert_eq!(inp, win, "matmul_t inner dims");
        let mut y = vec![0.0; n * out];
        {
            let xs = self.val(x);
            let ws = self.val(w);
            for r in 0..n {
                for o in 0..out {
                    let mut acc = 0.0;
                    for i in 0..inp {
                        acc += xs[r * inp + i] * ws[o * inp + i];
                    }
                    y[r * out + o] = acc;
                }
            }
        }
        self.push(Op::MatMulT { x, w }, y, vec![n, out])
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (n, d) = (self.shape_of(x)[0], self.shape_of(x)[1]);
        assert_eq!(self.shape_of(b), &[d], "add_row bias dim");
        let mut y = self.val(x).to_vec();
        {
            let bs = self.val(b).to_vec();
            for r in 0..n {
                for i in 0..d {
                    y[r * d + i] += bs[i];
                }
            }
        }
        self.push(Op::AddRow { x, b }, y, vec![n, d])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y: Vec<f64> = self.val(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Relu { x }, y, shape)
    }

    pub fn mean_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        assert!(!rows.is_empty(), "mean_rows over empty set");
        let d = self.shape_of(x)[1];
        let mut y = vec![0.0; d];
        {
            let xs = self.val(x);
            for &r in &rows {
                for i in 0..d {
                    y[i] += xs[r * d + i];
                }
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for v in &mut y {
            *v *= inv;
        }
        self.push(Op::MeanRows { x, rows }, y, vec![d])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape_of(a), self.shape_of(b), "dot dims");
        let v = fmath::dot(self.val(a), self.val(b));
        self.push(Op::Dot { a, b }, vec![v], vec![1])
    }

    pub fn norm(&mut self, a: Var) -> Var {
        let v = fmath::norm(self.val(a));
        self.push(Op::Norm { a }, vec![v], vec![1])
    }

    pub fn softmax_ce(&mut self, z: Var, labels: Vec<usize>) -> Var {
        let (n, k) = (self.shape_of(z)[0], self.shape_of(z)[1]);
        assert_eq!(labels.len(), n, "one label per row");
        let mut total = 0.0;
        {
            let zs = self.val(z);
            for (r, &y) in labels.iter().enumerate() {
                let row = &zs[r * k..(r + 1) * k];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + fmath::ln(row.iter().map(|&v| fmath::exp(v - m)).sum::<f64>());
                total += lse - row[y];
            }
        }
        let v = total / n as f64;
        self.push(Op::SoftmaxCe { z, labels }, vec![v], vec![1])
    }

    pub fn s_add(&mut self, a: Var, b: Var) -> Var {
        let v = self.scalar_value(a) + self.scalar_value(b);
        self.push(Op::SAdd { a, b }, vec![v], vec![1])
    }

    pub fn s_affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let v = mul * self.scalar_value(a) + add;
        self.push(Op::SAffine { a, mul }, vec![v], vec![1])
    }

    pub fn s_div(&mut self, a: Var, b: Var) -> Var {
        let v = self.scalar_value(a) / self.scalar_value(b);
        self.push(Op::SDiv { a, b }, vec![v], vec![1])
    }

    /// Reverse sweep from `loss`; returns per-node gradient buffers.
    fn sweep(&self, loss: Var) -> Result<Vec<Vec<f64>>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::NoTrace);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::ShapeMismatch("loss must be scalar".into()));
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        grads[loss.0][0] = 1.0;
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if grads[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMulT { x, w } => {
                    let g = grads[idx].clone();
                    let (n, out) = (node.shape[0], node.shape[1]);
                    let inp = self.shape_of(*x)[1];
                    let xs = self.val(*x);
                    let ws = self.val(*w);
                    for r in 0..n {
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go == 0.0 {
                                continue;
                            }
                            for i in 0..inp {
                                grads[x.0][r * inp + i] += go * ws[o * inp + i];
                                grads[w.0][o * inp + i] += go * xs[r * inp + i];
                            }
                        }
                    }
                }
                Op::AddRow { x, b } => {
                    let g = grads[idx].clone();
                    let (n, d) = (node.shape[0], node.shape[1]);
                    for r in 0..n {
                        for i in 0..d {
                            grads[x.0][r * d + i] += g[r * d + i];
                            grads[b.0][i] += g[r * d + i];
                        }
                    }
                }
                Op::Relu { x } => {
                    let g = grads[idx].clone();
                    let xs = self.val(*x);
                    for (i, &xv) in xs.iter().enumerate() {
                        if xv > 0.0 {
                            grads[x.0][i] += g[i];
                        }
                    }
                }
                Op::MeanRows { x, rows } => {
                    let g = grads[idx].clone();
                    let d = node.shape[0];
                    let inv = 1.0 / rows.len() as f64;
                    for &r in rows {
                        for i in 0..d {
                            grads[x.0][r * d + i] += g[i] * inv;
                        }
                    }
                }
                Op::Dot { a, b } => {
                    let g = grads[idx][0];
                    let av = self.val(*a).to_vec();
                    let bv = self.val(*b).to_vec();
                    for i in 0..av.len() {
                        grads[a.0][i] += g * bv[i];
                        grads[b.0][i] += g * av[i];
                    }
                }
                Op::Norm { a } => {
                    let g = grads[idx][0];
                    let nv = node.value[0];
                    if nv > 0.0 {
                        let av = self.val(*a).to_vec();
                        for i in 0..av.len() {
                            grads[a.0][i] += g * av[i] / nv;
                        }
                    }
                }
                Op::SoftmaxCe { z, labels } => {
                    let g = grads[idx][0];
                    let (n, k) = (self.shape_of(*z)[0], self.shape_of(*z)[1]);
                    let zs = self.val(*z);
                    let scale = g / n as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        let row = &zs[r * k..(r + 1) * k];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&v| fmath::exp(v - m)).sum();
                        for i in 0..k {
                            let p = fmath::exp(row[i] - m) / denom;
                            let delta = if i == y { 1.0 } else { 0.0 };
                            grads[z.0][r * k + i] += scale * (p - delta);
                        }
                    }
                }
                Op::SAdd { a, b } => {
                    let g = grads[idx][0];
                    grads[a.0][0] += g;
                    grads[b.0][0] += g;
                }
                Op::SAffine { a, mul, .. } => {
                    let g = grads[idx][0];
                    grads[a.0][0] += g * mul;
                }
                Op::SDiv { a, b } => {
                    let g = grads[idx][0];
                    let av = self.val(*a)[0];
                    let bv = self.val(*b)[0];
                    grads[a.0][0] += g / bv;
                    grads[b.0][0] += -g * av / (bv * bv);
                }
            }
        }
        Ok(grads)
    }
}

/// Tape locations of every model parameter leaf.
pub struct ParamVars {
    pub extractor: Vec<(Var, Var)>,
    pub classifier: (Var, Var),
}

impl ParamVars {
    /// Register all parameters of `params` as tape leaves.
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        ParamVars {
            extractor: params
                .extractor
                .iter()
                .map(|l| (tape.leaf(&l.weight), tape.leaf(&l.bias)))
                .collect(),
            classifier: (
                tape.leaf(&params.classifier.weight),
                tape.leaf(&params.classifier.bias),
            ),
        }
    }
}

/// A recorded forward pass ending in a scalar loss.
pub struct LossTrace {
    pub tape: Tape,
    pub loss: Var,
    pub params: ParamVars,
    pub(crate) shapes: ModelShapes,
}

pub(crate) struct ModelShapes {
    extractor: Vec<(Vec<usize>, Vec<usize>)>,
    classifier: (Vec<usize>, Vec<usize>),
}

impl ModelShapes {
    pub(crate) fn of(params: &ModelParams) -> Self {
        ModelShapes {
            extractor: params
                .extractor
                .iter()
                .map(|l| (l.weight.shape().to_vec(), l.bias.shape().to_vec()))
                .collect(),
            classifier: (
                params.classifier.weight.shape().to_vec(),
                params.classifier.bias.shape().to_vec(),
            ),
        }
    }
}

impl LossTrace {
    pub fn loss_value(&self) -> f64 {
        self.tape.scalar_value(self.loss)
    }
}

/// Assemble a [`LossTrace`] from a finished tape. `params` supplies the
/// shapes the gradient set is reassembled with.
pub fn trace_from_parts(
    tape: Tape,
    loss: Var,
    params_vars: ParamVars,
    params: &ModelParams,
) -> LossTrace {
    LossTrace {
        tape,
        loss,
        params: params_vars,
        shapes: ModelShapes::of(params),
    }
}

/// Run the reverse sweep over a recorded trace and assemble the gradient of
/// the loss with respect to every model parameter.
pub fn backward(trace: &LossTrace) -> Result<GradientSet> {
    let grads = trace.tape.sweep(trace.loss)?;
    let take = |v: Var, shape: &[usize]| -> DenseTensor {
        DenseTensor::new(shape.to_vec(), grads[v.0].clone()).unwrap()
    };
    Ok(GradientSet {
        extractor: trace
            .params
            .extractor
            .iter()
            .zip(&trace.shapes.extractor)
            .map(|(&(w, b), (ws, bs))| LayerGrad {
                weight: take(w, ws),
                bias: take(b, bs),
            })
            .collect(),
        classifier: {
            let (w, b) = trace.params.classifier;
            LayerGrad {
                weight: take(w, &trace.shapes.classifier.0),
                bias: take(b, &trace.shapes.classifier.1),
            }
        },
    })
}
