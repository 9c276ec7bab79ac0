//! Plaintext reference pipeline: the same per-round math as the encrypted
//! protocol, on bare vectors. Blinding scalars are drawn from the same mask
//! streams so the rounding rule sees the same `p`; masks cancel exactly here.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::protocol::{round6_micro, AggregationWeight, ProtocolParams, ZeroMinPolicy};
use crate::fmath;
use crate::hesim::max_iteration_raw;
use crate::rng::{stream, Domain};
use crate::{Error, Result};

/// Plaintext submissions for one round: client -> class -> vector.
pub type PlainSubmissions = BTreeMap<usize, BTreeMap<usize, Vec<f64>>>;

/// Outcome of the plaintext reference round, mirroring the encrypted one.
#[derive(Debug, Clone)]
pub struct PlainOutcome {
    pub survivors: BTreeSet<usize>,
    pub global: BTreeMap<usize, Vec<f64>>,
    pub weights: Vec<AggregationWeight>,
    pub sums: BTreeMap<usize, f64>,
    pub trusted_norms: BTreeMap<usize, f64>,
    pub retained: BTreeSet<usize>,
    pub warnings: Vec<String>,
}

/// Run one reference round. `prev_global` supplies the retained entry for
/// classes whose submissions are all filtered.
pub fn reference_secure_aggregation(
    submissions: &PlainSubmissions,
    prev_global: &BTreeMap<usize, Vec<f64>>,
    params: &ProtocolParams,
) -> Result<PlainOutcome> {
    let survivors: BTreeSet<usize> = submissions
        .iter()
        .filter(|(_, protos)| {
            protos
                .values()
                .all(|c| fmath::abs(fmath::dot(c, c) - 1.0) <= params.norm_tolerance)
        })
        .map(|(&c, _)| c)
        .collect();
    if survivors.is_empty() {
        return Err(Error::ProtocolAbort(
            "normalization verification removed every client".into(),
        ));
    }
    let mut outcome = PlainOutcome {
        survivors: survivors.clone(),
        global: prev_global.clone(),
        weights: Vec::new(),
        sums: BTreeMap::new(),
        trusted_norms: BTreeMap::new(),
        retained: BTreeSet::new(),
        warnings: Vec::new(),
    };

    let classes: BTreeSet<usize> = submissions
        .iter()
        .filter(|(c, _)| survivors.contains(c))
        .flat_map(|(_, m)| m.keys().copied())
        .collect();
    for class in classes {
        let owners: Vec<usize> = submissions
            .iter()
            .filter(|(c, m)| survivors.contains(c) && m.contains_key(&class))
            .map(|(&c, _)| c)
            .collect();
        if owners.is_empty() {
            continue;
        }
        let dim = submissions[&owners[0]][&class].len();

        if params.chi == -1.0 {
            let mut mean = alloc::vec![0.0; dim];
            for &client in &owners {
                for (m, v) in mean.iter_mut().zip(&submissions[&client][&class]) {
                    *m += v;
                }
                outcome.weights.push(AggregationWeight {
                    client,
                    class,
                    value: 1.0,
                    filtered: false,
                });
            }
            for m in &mut mean {
                *m /= owners.len() as f64;
            }
            outcome.global.insert(class, mean);
            outcome.sums.insert(class, owners.len() as f64);
            continue;
        }

        // Trusted prototype and its norm.
        let mut trusted = alloc::vec![0.0; dim];
        for &client in &owners {
            for (t, v) in trusted.iter_mut().zip(&submissions[&client][&class]) {
                *t += v;
            }
        }
        for t in &mut trusted {
            *t /= owners.len() as f64;
        }
        let norm = fmath::norm(&trusted);
        outcome.trusted_norms.insert(class, norm);
        if norm < 1e-12 {
            outcome.retained.insert(class);
            outcome
                .warnings
                .push(format!("class {class}: degenerate trusted prototype, retained"));
            continue;
        }

        // Same blinding scalar as the encrypted path: first draw of the
        // per-(round, class) mask stream.
        let mut mask_rng = stream(params.mask_seed, Domain::Mask, params.round, class as u64);
        let p: f64 = mask_rng.gen_range(0.5..2.0);
        let chi_prime = (params.chi + 1.0) / 2.0;

        let mut ph: BTreeMap<usize, f64> = BTreeMap::new();
        for &client in &owners {
            let sim = fmath::dot(&submissions[&client][&class], &trusted) / norm;
            let shifted = (sim + 1.0) / 2.0;
            let h = max_iteration_raw(shifted, chi_prime, params.cipher_max_iters);
            ph.insert(client, p * h);
        }
        let rounded: BTreeMap<usize, i64> =
            ph.iter().map(|(&c, &v)| (c, round6_micro(v))).collect();
        let zero_cut = match params.policy {
            ZeroMinPolicy::Literal => *rounded.values().min().expect("nonempty"),
            ZeroMinPolicy::OnlyIfBelowThreshold => round6_micro(p * chi_prime) + 1,
        };

        let mut sum = 0.0;
        let mut weights = Vec::with_capacity(owners.len());
        for &client in &owners {
            let filtered = rounded[&client] <= zero_cut;
            let j = if filtered { 0.0 } else { ph[&client] };
            sum += j;
            weights.push(AggregationWeight {
                client,
                class,
                value: j,
                filtered,
            });
        }
        outcome.sums.insert(class, sum);
        if sum <= 0.0 {
            outcome.retained.insert(class);
            outcome
                .warnings
                .push(format!("class {class}: every submission filtered, retained"));
            outcome.weights.extend(weights);
            continue;
        }
        let mut global = alloc::vec![0.0; dim];
        for w in &weights {
            if w.value == 0.0 {
                continue;
            }
            for (g, v) in global.iter_mut().zip(&submissions[&w.client][&class]) {
                *g += w.value * v;
            }
        }
        for g in &mut global {
            *g /= sum;
        }
        outcome.global.insert(class, global);
        outcome.weights.extend(weights);
    }
    Ok(outcome)
}

/// Simple per-class mean over every submission; no verification, no
/// filtering. The unnormalized-averaging baseline.
pub fn plain_mean(submissions: &PlainSubmissions) -> BTreeMap<usize, Vec<f64>> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for protos in submissions.values() {
        for (&class, v) in protos {
            let entry = sums
                .entry(class)
                .or_insert_with(|| (alloc::vec![0.0; v.len()], 0));
            for (s, x) in entry.0.iter_mut().zip(v) {
                *s += x;
            }
            entry.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(class, (mut s, n))| {
            for x in &mut s {
                *x /= n as f64;
            }
            (class, s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto::normalize;
    use alloc::vec;

    fn params(chi: f64) -> ProtocolParams {
        ProtocolParams {
            chi,
            cipher_max_iters: 29,
            policy: ZeroMinPolicy::Literal,
            norm_tolerance: 1e-5,
            mask_seed: 3,
            round: 1,
        }
    }

    /// Theorem-2 shape: under plain averaging with benign mean `u_ben` and
    /// malicious mean `u_mal`, the global prototype deviates from the benign
    /// mean by exactly `kappa * ||u_mal - u_ben||`, which is at most `2 kappa`.
    #[test]
    fn plain_average_deviation_is_linear_in_malicious_fraction() {
        let u_ben = normalize(&[1.0, 0.0]).unwrap();
        let u_mal = normalize(&[0.0, 1.0]).unwrap();
        let n = 10usize;
        let kappa = 0.2;
        let n_mal = (kappa * n as f64) as usize;
        let mut submissions: PlainSubmissions = BTreeMap::new();
        for client in 0..n {
            let v = if client < n_mal { u_mal.clone() } else { u_ben.clone() };
            submissions.insert(client, BTreeMap::from([(0usize, v)]));
        }
        let out =
            reference_secure_aggregation(&submissions, &BTreeMap::new(), &params(-1.0)).unwrap();
        let c = &out.global[&0];
        let dev = fmath::norm(&[c[0] - u_ben[0], c[1] - u_ben[1]]);
        let expect = kappa * fmath::norm(&[u_mal[0] - u_ben[0], u_mal[1] - u_ben[1]]);
        assert!((dev - expect).abs() < 1e-12);
        assert!((dev - 0.2 * fmath::sqrt(2.0)).abs() < 1e-12);
        assert!(dev <= 2.0 * kappa + 1e-12);
    }

    #[test]
    fn unnormalized_submission_fails_reference_verification() {
        let mut submissions: PlainSubmissions = BTreeMap::new();
        submissions.insert(0, BTreeMap::from([(0usize, vec![1.0, 0.0])]));
        submissions.insert(1, BTreeMap::from([(0usize, vec![3.0, 4.0])]));
        let out =
            reference_secure_aggregation(&submissions, &BTreeMap::new(), &params(0.0)).unwrap();
        assert!(out.survivors.contains(&0) && !out.survivors.contains(&1));
    }

    #[test]
    fn plain_mean_averages_per_class() {
        let mut submissions: PlainSubmissions = BTreeMap::new();
        submissions.insert(0, BTreeMap::from([(0usize, vec![1.0, 0.0])]));
        submissions.insert(1, BTreeMap::from([(0usize, vec![0.0, 1.0])]));
        let mean = plain_mean(&submissions);
        assert_eq!(mean[&0], vec![0.5, 0.5]);
    }
}
