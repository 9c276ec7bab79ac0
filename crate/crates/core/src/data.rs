//! Synthetic Gaussian-blob dataset generation.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::fmath;
use crate::rng::{stream, Domain};
use crate::{Error, Result};

/// A labeled sample pool prior to partitioning.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPool {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledPool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map(|f| f.len()).unwrap_or(0)
    }
}

/// Parameters of the blob generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Class centers are drawn uniformly on the sphere of this radius.
    pub radius: f64,
    /// Within-class standard deviation.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            n_classes: 10,
            dim: 32,
            samples_per_class: 200,
            radius: 5.0,
            sigma: 1.0,
            seed: 0,
        }
    }
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("blobs need at least 2 classes".into()));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config("blob sigma must be positive".into()));
        }
        if self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("blob dim and samples must be positive".into()));
        }
        Ok(())
    }
}

/// Generate the pool: each class center sits uniformly on the radius-R
/// sphere, samples are center plus isotropic Gaussian noise. Deterministic
/// given the spec seed.
pub fn gen_blobs(spec: &BlobSpec) -> LabeledPool {
    let mut rng = stream(spec.seed, Domain::BlobGen, 0, 0);
    let mut features = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    for class in 0..spec.n_classes {
        let mut center: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = fmath::norm(&center).max(1e-12);
        for c in &mut center {
            *c *= spec.radius / norm;
        }
        for _ in 0..spec.samples_per_class {
            let sample: Vec<f64> = center
                .iter()
                .map(|&c| c + spec.sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            features.push(sample);
            labels.push(class);
        }
    }
    LabeledPool {
        features,
        labels,
        n_classes: spec.n_classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_collapses_to_centers() {
        let spec = BlobSpec {
            n_classes: 3,
            dim: 4,
            samples_per_class: 5,
            sigma: 0.0,
            ..BlobSpec::default()
        };
        let pool = gen_blobs(&spec);
        for class in 0..3 {
            let rows: Vec<&Vec<f64>> = pool
                .features
                .iter()
                .zip(&pool.labels)
                .filter(|(_, &l)| l == class)
                .map(|(f, _)| f)
                .collect();
            for r in &rows[1..] {
                assert_eq!(*r, rows[0]);
            }
            assert!((fmath::norm(rows[0]) - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = BlobSpec::default();
        assert_eq!(gen_blobs(&spec), gen_blobs(&spec));
    }

    #[test]
    fn sample_mean_approaches_center() {
        let spec = BlobSpec {
            n_classes: 2,
            dim: 8,
            samples_per_class: 400,
            radius: 5.0,
            sigma: 1.0,
            seed: 7,
        };
        let pool = gen_blobs(&spec);
        let zero_sigma = gen_blobs(&BlobSpec { sigma: 0.0, ..spec });
        for class in 0..2 {
            let rows: Vec<&Vec<f64>> = pool
                .features
                .iter()
                .zip(&pool.labels)
                .filter(|(_, &l)| l == class)
                .map(|(f, _)| f)
                .collect();
            let center = &zero_sigma.features[class * 400];
            let n = rows.len() as f64;
            for d in 0..8 {
                let mean: f64 = rows.iter().map(|r| r[d]).sum::<f64>() / n;
                // Within 3 sigma / sqrt(n) of the true center coordinate.
                assert!(
                    (mean - center[d]).abs() < 3.0 / fmath::sqrt(n) + 1e-9,
                    "class {class} dim {d}: mean {mean} vs center {}",
                    center[d]
                );
            }
        }
    }
}
