//! Attack injectors: transformations that turn a benign client's dataset or
//! submission into the adversary models under study. All operations are
//! dataset-local and deterministic under a fixed seed.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::Rng;

use crate::proto::{LocalDataset, Prototype};
use crate::{Error, Result};

/// What a malicious client does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum AttackKind {
    None,
    /// Replace training features with uniform noise over the data's range.
    Feature,
    /// Relabel every sample to a random different class.
    Label,
    /// Alternate feature and label attacks between consecutive rounds.
    Dynamic,
    /// Scale submitted prototypes so they are no longer unit vectors.
    Amplify,
}

/// Adversary configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Fraction of clients that are malicious.
    pub fraction: f64,
    pub amplify_factor: f64,
    pub seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            kind: AttackKind::None,
            fraction: 0.0,
            amplify_factor: 5.0,
            seed: 0,
        }
    }
}

impl AttackSpec {
    /// Validation; fractions above one half are allowed but flagged, since
    /// the threat model assumes a malicious minority.
    pub fn validate(&self) -> Result<Option<&'static str>> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::Config("attack.fraction must be in [0, 1]".into()));
        }
        if self.kind == AttackKind::Amplify && self.amplify_factor <= 1.0 {
            return Err(Error::Config("attack.amplify_factor must exceed 1".into()));
        }
        if self.fraction > 0.5 {
            return Ok(Some("attack fraction above 50%: outside the assumed threat model"));
        }
        Ok(None)
    }
}

/// Choose `floor(fraction * n)` malicious clients uniformly, as a prefix of
/// a seeded permutation: any subset is equally likely, and for a fixed seed
/// the sets are nested across fractions, so experiments that sweep the
/// fraction compare against a common benign core.
pub fn select_malicious(n_clients: usize, fraction: f64, rng: &mut impl Rng) -> BTreeSet<usize> {
    let count = crate::fmath::floor(fraction * n_clients as f64) as usize;
    let permutation = rand::seq::index::sample(rng, n_clients, n_clients);
    permutation.into_iter().take(count.min(n_clients)).collect()
}

/// Replace every feature vector with i.i.d. uniform draws over the dataset's
/// own per-dimension [min, max] range. Labels are untouched.
pub fn poison_features(data: &LocalDataset, rng: &mut impl Rng) -> LocalDataset {
    if data.is_empty() {
        return data.clone();
    }
    let dim = data.feature_dim();
    let mut lo = data.samples()[0].0.clone();
    let mut hi = lo.clone();
    for (x, _) in data.samples() {
        for d in 0..dim {
            lo[d] = lo[d].min(x[d]);
            hi[d] = hi[d].max(x[d]);
        }
    }
    let samples = data
        .samples()
        .iter()
        .map(|(_, label)| {
            let x: Vec<f64> = (0..dim)
                .map(|d| {
                    if hi[d] > lo[d] {
                        rng.gen_range(lo[d]..hi[d])
                    } else {
                        lo[d]
                    }
                })
                .collect();
            (x, *label)
        })
        .collect();
    LocalDataset::new(samples)
}

/// Replace every label with a uniformly random different label from the
/// class universe. Features are untouched.
pub fn poison_labels(
    data: &LocalDataset,
    n_classes: usize,
    rng: &mut impl Rng,
) -> Result<LocalDataset> {
    if n_classes < 2 {
        return Err(Error::AttackUndefined(
            "label flipping needs at least 2 classes".into(),
        ));
    }
    let samples = data
        .samples()
        .iter()
        .map(|(x, label)| {
            let mut pick = rng.gen_range(0..n_classes - 1);
            if pick >= *label {
                pick += 1;
            }
            (x.clone(), pick)
        })
        .collect();
    Ok(LocalDataset::new(samples))
}

/// Effective attack for round `t` under the dynamic schedule: feature attacks
/// on odd rounds, label attacks on even rounds.
pub fn dynamic_behavior(t: u64) -> AttackKind {
    if t % 2 == 1 {
        AttackKind::Feature
    } else {
        AttackKind::Label
    }
}

/// Scale each prototype vector by `factor`, breaking unit norm.
pub fn amplify_prototypes(protos: &[Prototype], factor: f64) -> Vec<Prototype> {
    protos
        .iter()
        .map(|p| Prototype {
            class_id: p.class_id,
            vector: p.vector.iter().map(|v| v * factor).collect(),
            round: p.round,
            owner: p.owner,
        })
        .collect()
}
