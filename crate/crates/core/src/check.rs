//! Numerical verification utilities: central finite differences over the
//! full local objective. These evaluate the loss through the pure forward
//! path only, independently of the recorded-trace gradients they are used
//! to check.

use alloc::vec::Vec;

use crate::nn::{DenseTensor, GradientSet, ModelParams};
use crate::proto::{total_loss, GlobalPrototypeSet, LocalDataset};
use crate::Result;

fn perturbed(params: &ModelParams, layer: usize, bias: bool, idx: usize, delta: f64) -> ModelParams {
    let mut p = params.clone();
    let tensor: &mut DenseTensor = if layer < p.extractor.len() {
        if bias {
            &mut p.extractor[layer].bias
        } else {
            &mut p.extractor[layer].weight
        }
    } else if bias {
        &mut p.classifier.bias
    } else {
        &mut p.classifier.weight
    };
    tensor.as_mut_slice()[idx] += delta;
    p
}

/// Central finite differences of [`total_loss`] with step `h` for every
/// model parameter.
pub fn finite_difference_grads(
    params: &ModelParams,
    batch: &LocalDataset,
    global: &GlobalPrototypeSet,
    lambda: f64,
    h: f64,
) -> Result<GradientSet> {
    let mut grads = GradientSet::zeros_like(params);
    let n_layers = params.extractor.len();
    for layer in 0..=n_layers {
        for bias in [false, true] {
            let len = if layer < n_layers {
                if bias {
                    params.extractor[layer].bias.len()
                } else {
                    params.extractor[layer].weight.len()
                }
            } else if bias {
                params.classifier.bias.len()
            } else {
                params.classifier.weight.len()
            };
            for idx in 0..len {
                let plus = total_loss(&perturbed(params, layer, bias, idx, h), batch, global, lambda)?;
                let minus =
                    total_loss(&perturbed(params, layer, bias, idx, -h), batch, global, lambda)?;
                let g = (plus - minus) / (2.0 * h);
                let slot = if layer < n_layers {
                    if bias {
                        grads.extractor[layer].bias.as_mut_slice()
                    } else {
                        grads.extractor[layer].weight.as_mut_slice()
                    }
                } else if bias {
                    grads.classifier.bias.as_mut_slice()
                } else {
                    grads.classifier.weight.as_mut_slice()
                };
                slot[idx] = g;
            }
        }
    }
    Ok(grads)
}

fn flat(gs: &GradientSet) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &gs.extractor {
        out.extend_from_slice(l.weight.as_slice());
        out.extend_from_slice(l.bias.as_slice());
    }
    out.extend_from_slice(gs.classifier.weight.as_slice());
    out.extend_from_slice(gs.classifier.bias.as_slice());
    out
}

/// Largest relative disagreement between two gradient sets, with a floor so
/// that absolute differences below 1e-7 never register as failures.
pub fn max_rel_error(analytic: &GradientSet, numeric: &GradientSet) -> f64 {
    let (a, b) = (flat(analytic), flat(numeric));
    a.iter()
        .zip(&b)
        .map(|(x, y)| {
            let scale = crate::fmath::abs(*x).max(crate::fmath::abs(*y)).max(1e-3);
            crate::fmath::abs(x - y) / scale
        })
        .fold(0.0, f64::max)
}
