//! The two-server secure aggregation protocol: normalization verification,
//! trusted-prototype construction, ciphertext credibility scoring, the masked
//! two-party weight exchange and Byzantine-robust weighted aggregation.
//!
//! The aggregator computes on ciphertexts and holds the blinding masks; the
//! verifier holds the only secret key used here and sees nothing but squared
//! norms, blinded comparison scalars and masked prototypes. Every transfer is
//! logged in the round transcript, every decryption in the decrypt log.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::transcript::{DecryptLog, MessageKind, Party, PayloadKind, RoundTranscript};
use crate::fmath;
use crate::hesim::{CipherScalar, CipherVector, HeSim, KeyPair, KeyRole, PublicKey};
use crate::rng::{stream, Domain};
use crate::{Error, Result};

/// How the per-class minimum rule treats rounds where nobody scores below
/// the detection threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ZeroMinPolicy {
    /// Zero every entry whose rounded blinded weight equals the per-class
    /// minimum, exactly as written. When all submitters are honest this
    /// still zeroes the lowest one.
    #[default]
    Literal,
    /// Zero an entry only when its blinded weight matches the blinded
    /// threshold reference, so a round with no outlier filters nobody.
    OnlyIfBelowThreshold,
}

/// Per-round protocol knobs.
#[derive(Debug, Clone, Copy)]
pub struct ProtocolParams {
    /// Detection threshold on cosine credibility; -1 disables filtering and
    /// switches to plain averaging of surviving prototypes.
    pub chi: f64,
    /// Iteration count of the ciphertext maximum.
    pub cipher_max_iters: u32,
    pub policy: ZeroMinPolicy,
    /// Tolerance on |‖c‖² - 1| during normalization verification.
    pub norm_tolerance: f64,
    /// Seed for the aggregator's blinding masks.
    pub mask_seed: u64,
    pub round: u64,
}

/// Aggregation weight of one local prototype.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AggregationWeight {
    pub client: usize,
    pub class: usize,
    pub value: f64,
    pub filtered: bool,
}

/// Aggregator-side state. Holds public keys and blinding masks, never a
/// secret key.
#[derive(Debug)]
pub struct AggregatorState {
    pub verifier_pk: PublicKey,
    pub clients_pk: PublicKey,
    /// Submissions of the current round, per client then class.
    pub received: BTreeMap<usize, BTreeMap<usize, CipherVector>>,
    /// Clients that passed normalization verification this round.
    pub active: BTreeSet<usize>,
    /// Blinding scalar per class, fresh each round.
    pub round_p: BTreeMap<usize, f64>,
    /// Blinding vector per (client, class), fresh each round.
    pub round_masks: BTreeMap<(usize, usize), Vec<f64>>,
    /// Evolving global prototypes under the clients' key; classes whose
    /// submissions were all filtered keep their previous entry.
    pub global: BTreeMap<usize, CipherVector>,
}

impl AggregatorState {
    pub fn new(verifier_pk: PublicKey, clients_pk: PublicKey) -> Self {
        AggregatorState {
            verifier_pk,
            clients_pk,
            received: BTreeMap::new(),
            active: BTreeSet::new(),
            round_p: BTreeMap::new(),
            round_masks: BTreeMap::new(),
            global: BTreeMap::new(),
        }
    }

    /// Classes present among the active clients' submissions.
    fn active_classes(&self) -> BTreeSet<usize> {
        self.received
            .iter()
            .filter(|(c, _)| self.active.contains(c))
            .flat_map(|(_, m)| m.keys().copied())
            .collect()
    }
}

/// Verifier-side state: the verifier keypair and the clients' public key.
#[derive(Debug)]
pub struct VerifierState {
    kp: KeyPair,
    pub clients_pk: PublicKey,
}

impl VerifierState {
    pub fn new(kp: KeyPair, clients_pk: PublicKey) -> Result<Self> {
        if kp.role() != KeyRole::Verifier {
            return Err(Error::Config("verifier state needs the verifier keypair".into()));
        }
        Ok(VerifierState { kp, clients_pk })
    }

    pub fn public_key(&self) -> PublicKey {
        self.kp.public()
    }

    fn decrypt_scalar(
        &self,
        he: &HeSim,
        c: &CipherScalar,
        round: u64,
        dlog: &mut DecryptLog,
    ) -> Result<f64> {
        dlog.record(round, Party::Verifier, KeyRole::Verifier);
        he.decrypt_scalar(&self.kp, c)
    }

    fn decrypt_vector(
        &self,
        he: &HeSim,
        c: &CipherVector,
        round: u64,
        dlog: &mut DecryptLog,
    ) -> Result<Vec<f64>> {
        dlog.record(round, Party::Verifier, KeyRole::Verifier);
        he.decrypt(&self.kp, c)
    }
}

/// Round a value to the 6th decimal place, half away from zero, on the
/// decimal string. Returned in integer micro-units so equality comparisons
/// are exact and platform-stable.
pub fn round6_micro(x: f64) -> i64 {
    let s = format!("{x:.7}");
    let neg = s.starts_with('-');
    let body = s.trim_start_matches('-');
    let (int_part, frac_part) = body.split_once('.').expect("fixed-precision format");
    let int: i64 = int_part.parse().expect("integer part");
    let first6: i64 = frac_part[..6].parse().expect("six decimals");
    let seventh = frac_part.as_bytes()[6] - b'0';
    let mut micro = int * 1_000_000 + first6;
    if seventh >= 5 {
        micro += 1;
    }
    if neg {
        -micro
    } else {
        micro
    }
}

/// Record one client's encrypted submissions at the aggregator.
pub fn submit_to_aggregator(
    agg: &mut AggregatorState,
    client: usize,
    protos: BTreeMap<usize, CipherVector>,
    transcript: &mut RoundTranscript,
) {
    for (class, c) in &protos {
        transcript.log(
            Party::Client(client),
            Party::Aggregator,
            MessageKind::SubmitPrototype,
            Some(*class),
            Some(client),
            PayloadKind::CipherVector {
                key: KeyRole::Verifier,
                dim: c.dim(),
            },
        );
    }
    agg.received.insert(client, protos);
}

/// Normalization verification: the aggregator sends each prototype's squared
/// norm (as a ciphertext inner product) to the verifier, which decrypts and
/// removes every client with any deviation beyond tolerance.
pub fn verify_normalization(
    he: &mut HeSim,
    agg: &mut AggregatorState,
    ver: &VerifierState,
    params: &ProtocolParams,
    transcript: &mut RoundTranscript,
    dlog: &mut DecryptLog,
) -> Result<BTreeSet<usize>> {
    let mut rejected: BTreeSet<usize> = BTreeSet::new();
    for (&client, protos) in &agg.received {
        for (&class, c) in protos {
            let ip = he.inner(c, c)?;
            transcript.log(
                Party::Aggregator,
                Party::Verifier,
                MessageKind::NormCheckInner,
                Some(class),
                Some(client),
                PayloadKind::CipherScalar {
                    key: KeyRole::Verifier,
                },
            );
            let sq = ver.decrypt_scalar(he, &ip, params.round, dlog)?;
            if fmath::abs(sq - 1.0) > params.norm_tolerance {
                rejected.insert(client);
            }
        }
    }
    let survivors: BTreeSet<usize> = agg
        .received
        .keys()
        .copied()
        .filter(|c| !rejected.contains(c))
        .collect();
    if survivors.is_empty() {
        return Err(Error::ProtocolAbort(
            "normalization verification removed every client".into(),
        ));
    }
    transcript.log(
        Party::Verifier,
        Party::Aggregator,
        MessageKind::SurvivorSet,
        None,
        None,
        PayloadKind::ClientSet {
            n: survivors.len(),
        },
    );
    agg.active = survivors.clone();
    Ok(survivors)
}

/// Ciphertext mean of the surviving submissions for one class, plus the
/// plaintext norm obtained through the verifier. `None` when no surviving
/// client submitted the class.
pub fn trusted_prototype(
    he: &mut HeSim,
    agg: &AggregatorState,
    ver: &VerifierState,
    class: usize,
    params: &ProtocolParams,
    transcript: &mut RoundTranscript,
    dlog: &mut DecryptLog,
) -> Result<Option<(CipherVector, f64)>> {
    let mut acc: Option<CipherVector> = None;
    let mut n = 0usize;
    for (&client, protos) in &agg.received {
        if !agg.active.contains(&client) {
            continue;
        }
        if let Some(c) = protos.get(&class) {
            acc = Some(match acc {
                None => c.clone(),
                Some(a) => he.add(&a, c)?,
            });
            n += 1;
        }
    }
    let Some(sum) = acc else {
        return Ok(None);
    };
    let trusted = he.scale(&sum, 1.0 / n as f64);
    let ip = he.inner(&trusted, &trusted)?;
    transcript.log(
        Party::Aggregator,
        Party::Verifier,
        MessageKind::TrustedNormInner,
        Some(class),
        None,
        PayloadKind::CipherScalar {
            key: KeyRole::Verifier,
        },
    );
    let sq = ver.decrypt_scalar(he, &ip, params.round, dlog)?;
    transcript.log(
        Party::Verifier,
        Party::Aggregator,
        MessageKind::TrustedNormValue,
        Some(class),
        None,
        PayloadKind::PlainScalar,
    );
    Ok(Some((trusted, fmath::sqrt(sq.max(0.0)))))
}

/// Credibility of a verified (unit) prototype: the encrypted cosine
/// similarity `(1/‖C'‖) * <c̃, C'>`.
pub fn credibility(
    he: &mut HeSim,
    submission: &CipherVector,
    trusted: &CipherVector,
    trusted_norm: f64,
) -> Result<CipherScalar> {
    if trusted_norm < 1e-12 {
        return Err(Error::DegenerateVector(
            "trusted prototype has zero norm".into(),
        ));
    }
    let ip = he.inner(submission, trusted)?;
    Ok(he.s_affine(&ip, 1.0 / trusted_norm, 0.0))
}

fn draw_masks(
    params: &ProtocolParams,
    class: usize,
    clients: &[usize],
    dim: usize,
) -> (f64, BTreeMap<usize, Vec<f64>>) {
    let mut rng = stream(params.mask_seed, Domain::Mask, params.round, class as u64);
    let p = rng.gen_range(0.5..2.0);
    let mut masks = BTreeMap::new();
    for &client in clients {
        let v: Vec<f64> = (0..dim)
            .map(|_| {
                let mag = rng.gen_range(0.5..2.0);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        masks.insert(client, v);
    }
    (p, masks)
}

/// What the verifier hands back for one class.
pub struct ClassExchange {
    /// Per client: re-encrypted weight and masked prototype under the
    /// clients' key.
    pub returned: BTreeMap<usize, (CipherScalar, CipherVector)>,
    pub sum: f64,
    pub weights: Vec<AggregationWeight>,
}

/// The masked two-party weight computation for one class.
///
/// The aggregator blinds each comparison result with `p` and each prototype
/// with `V`, the verifier decrypts, applies the rounded-minimum rule, sums
/// the weights and re-encrypts everything under the clients' key.
#[allow(clippy::too_many_arguments)]
pub fn masked_weight_exchange(
    he: &mut HeSim,
    agg: &mut AggregatorState,
    ver: &VerifierState,
    class: usize,
    sims: &BTreeMap<usize, CipherScalar>,
    params: &ProtocolParams,
    transcript: &mut RoundTranscript,
    dlog: &mut DecryptLog,
) -> Result<ClassExchange> {
    if !(-1.0..1.0).contains(&params.chi) {
        return Err(Error::Range("chi must lie in [-1, 1)".into()));
    }
    let clients: Vec<usize> = sims.keys().copied().collect();
    let dim = agg
        .received
        .values()
        .find_map(|m| m.get(&class))
        .map(|c| c.dim())
        .ok_or_else(|| Error::Protocol(format!("no submission for class {class}")))?;
    let (p, masks) = draw_masks(params, class, &clients, dim);
    if p <= 0.0 || masks.values().any(|v| v.iter().any(|&x| x == 0.0)) {
        return Err(Error::Protocol("blinding mask invariant violated".into()));
    }
    agg.round_p.insert(class, p);
    for (&client, v) in &masks {
        agg.round_masks.insert((client, class), v.clone());
    }

    let chi_prime = (params.chi + 1.0) / 2.0;
    let enc_chi = he.encrypt_scalar(&agg.verifier_pk, chi_prime)?;

    // Aggregator side: shift, compare, blind, send.
    let mut blinded: BTreeMap<usize, CipherScalar> = BTreeMap::new();
    let mut masked: BTreeMap<usize, CipherVector> = BTreeMap::new();
    for &client in &clients {
        let sim = &sims[&client];
        let shifted = he.shift_to_unit(sim);
        let h = he.cipher_max(&shifted, &enc_chi, params.cipher_max_iters)?;
        let ph = he.s_affine(&h, p, 0.0);
        transcript.log(
            Party::Aggregator,
            Party::Verifier,
            MessageKind::MaskedWeight,
            Some(class),
            Some(client),
            PayloadKind::CipherScalar {
                key: KeyRole::Verifier,
            },
        );
        blinded.insert(client, ph);
        let proto = &agg.received[&client][&class];
        let vc = he.hadamard_plain(proto, &masks[&client])?;
        transcript.log(
            Party::Aggregator,
            Party::Verifier,
            MessageKind::MaskedPrototype,
            Some(class),
            Some(client),
            PayloadKind::CipherVector {
                key: KeyRole::Verifier,
                dim,
            },
        );
        masked.insert(client, vc);
    }
    // Threshold reference entry: under the below-threshold policy the
    // aggregator also blinds the shifted threshold itself, giving the
    // verifier a reference value instead of relying on the bare minimum.
    let reference = match params.policy {
        ZeroMinPolicy::Literal => None,
        ZeroMinPolicy::OnlyIfBelowThreshold => {
            let ph_ref = he.s_affine(&enc_chi, p, 0.0);
            transcript.log(
                Party::Aggregator,
                Party::Verifier,
                MessageKind::MaskedWeight,
                Some(class),
                None,
                PayloadKind::CipherScalar {
                    key: KeyRole::Verifier,
                },
            );
            Some(ph_ref)
        }
    };

    // Verifier side: decrypt, apply the rounded-minimum rule, re-encrypt.
    let mut ph_plain: BTreeMap<usize, f64> = BTreeMap::new();
    for (&client, ph) in &blinded {
        ph_plain.insert(client, ver.decrypt_scalar(he, ph, params.round, dlog)?);
    }
    let rounded: BTreeMap<usize, i64> = ph_plain
        .iter()
        .map(|(&c, &v)| (c, round6_micro(v)))
        .collect();
    let zero_cut = match (params.policy, &reference) {
        (ZeroMinPolicy::Literal, _) => *rounded.values().min().expect("nonempty class"),
        (ZeroMinPolicy::OnlyIfBelowThreshold, Some(ph_ref)) => {
            // One micro-unit of slack absorbs rounding jitter around the
            // reference so every at-threshold entry lands on the zero side.
            round6_micro(ver.decrypt_scalar(he, ph_ref, params.round, dlog)?) + 1
        }
        (ZeroMinPolicy::OnlyIfBelowThreshold, None) => unreachable!(),
    };

    let mut returned = BTreeMap::new();
    let mut weights = Vec::with_capacity(clients.len());
    let mut sum = 0.0;
    for &client in &clients {
        let filtered = rounded[&client] <= zero_cut;
        let j = if filtered { 0.0 } else { ph_plain[&client] };
        sum += j;
        weights.push(AggregationWeight {
            client,
            class,
            value: j,
            filtered,
        });
        let jx = he.encrypt_scalar(&ver.clients_pk, j)?;
        transcript.log(
            Party::Verifier,
            Party::Aggregator,
            MessageKind::WeightReturn,
            Some(class),
            Some(client),
            PayloadKind::CipherScalar {
                key: KeyRole::ClientsShared,
            },
        );
        let mx_plain = ver.decrypt_vector(he, &masked[&client], params.round, dlog)?;
        let mx = he.encrypt(&ver.clients_pk, &mx_plain)?;
        transcript.log(
            Party::Verifier,
            Party::Aggregator,
            MessageKind::MaskedPrototypeReturn,
            Some(class),
            Some(client),
            PayloadKind::CipherVector {
                key: KeyRole::ClientsShared,
                dim,
            },
        );
        returned.insert(client, (jx, mx));
    }
    transcript.log(
        Party::Verifier,
        Party::Aggregator,
        MessageKind::SumValue,
        Some(class),
        None,
        PayloadKind::PlainScalar,
    );
    Ok(ClassExchange {
        returned,
        sum,
        weights,
    })
}

/// Unmask, weight and average the returned prototypes of one class:
/// `(1/Sum) Σ ⟦j⟧ × ⟦c̃⟧` under the clients' key.
pub fn aggregate_class(
    he: &mut HeSim,
    agg: &AggregatorState,
    class: usize,
    exchange: &ClassExchange,
    sum: f64,
) -> Result<CipherVector> {
    if sum <= 0.0 {
        return Err(Error::Protocol(format!("class {class} aggregated with Sum <= 0")));
    }
    let mut acc: Option<CipherVector> = None;
    for (&client, (jx, mx)) in &exchange.returned {
        let mask = agg
            .round_masks
            .get(&(client, class))
            .ok_or_else(|| Error::Protocol(format!("missing mask for client {client}")))?;
        let inv: Vec<f64> = mask.iter().map(|m| 1.0 / m).collect();
        let unmasked = he.hadamard_plain(mx, &inv)?;
        let term = he.scale_by(&unmasked, jx)?;
        acc = Some(match acc {
            None => term,
            Some(a) => he.add(&a, &term)?,
        });
    }
    let total = acc.ok_or_else(|| Error::Protocol("no prototypes to aggregate".into()))?;
    Ok(he.scale(&total, 1.0 / sum))
}

/// Average aggregation used when `chi == -1`: no credibility scoring, the
/// masked prototypes are re-encrypted under the clients' key and averaged
/// with equal weights.
fn average_class(
    he: &mut HeSim,
    agg: &mut AggregatorState,
    ver: &VerifierState,
    class: usize,
    clients: &[usize],
    params: &ProtocolParams,
    transcript: &mut RoundTranscript,
    dlog: &mut DecryptLog,
) -> Result<(CipherVector, Vec<AggregationWeight>, f64)> {
    let dim = agg.received[&clients[0]][&class].dim();
    let (_, masks) = draw_masks(params, class, clients, dim);
    for (&client, v) in &masks {
        agg.round_masks.insert((client, class), v.clone());
    }
    let mut acc: Option<CipherVector> = None;
    let mut weights = Vec::with_capacity(clients.len());
    for &client in clients {
        let proto = &agg.received[&client][&class];
        let vc = he.hadamard_plain(proto, &masks[&client])?;
        transcript.log(
            Party::Aggregator,
            Party::Verifier,
            MessageKind::MaskedPrototype,
            Some(class),
            Some(client),
            PayloadKind::CipherVector {
                key: KeyRole::Verifier,
                dim,
            },
        );
        let plain = ver.decrypt_vector(he, &vc, params.round, dlog)?;
        let mx = he.encrypt(&ver.clients_pk, &plain)?;
        transcript.log(
            Party::Verifier,
            Party::Aggregator,
            MessageKind::MaskedPrototypeReturn,
            Some(class),
            Some(client),
            PayloadKind::CipherVector {
                key: KeyRole::ClientsShared,
                dim,
            },
        );
        let inv: Vec<f64> = masks[&client].iter().map(|m| 1.0 / m).collect();
        let unmasked = he.hadamard_plain(&mx, &inv)?;
        acc = Some(match acc {
            None => unmasked,
            Some(a) => he.add(&a, &unmasked)?,
        });
        weights.push(AggregationWeight {
            client,
            class,
            value: 1.0,
            filtered: false,
        });
    }
    let global = he.scale(&acc.expect("clients nonempty"), 1.0 / clients.len() as f64);
    Ok((global, weights, clients.len() as f64))
}

/// Outcome of one secure aggregation round.
#[derive(Debug)]
pub struct RoundOutcome {
    pub survivors: BTreeSet<usize>,
    /// Global prototypes under the clients' key, including retained classes.
    pub global: BTreeMap<usize, CipherVector>,
    pub weights: Vec<AggregationWeight>,
    pub sums: BTreeMap<usize, f64>,
    pub trusted_norms: BTreeMap<usize, f64>,
    /// Classes whose submissions were all filtered; previous global kept.
    pub retained: BTreeSet<usize>,
    pub warnings: Vec<String>,
}

/// Run the full protocol for one round over the submissions already recorded
/// in the aggregator state.
pub fn run_secure_aggregation(
    he: &mut HeSim,
    agg: &mut AggregatorState,
    ver: &VerifierState,
    params: &ProtocolParams,
    transcript: &mut RoundTranscript,
    dlog: &mut DecryptLog,
) -> Result<RoundOutcome> {
    agg.round_p.clear();
    agg.round_masks.clear();
    let survivors = verify_normalization(he, agg, ver, params, transcript, dlog)?;
    let mut outcome = RoundOutcome {
        survivors,
        global: BTreeMap::new(),
        weights: Vec::new(),
        sums: BTreeMap::new(),
        trusted_norms: BTreeMap::new(),
        retained: BTreeSet::new(),
        warnings: Vec::new(),
    };
    for class in agg.active_classes() {
        let owners: Vec<usize> = agg
            .received
            .iter()
            .filter(|(c, m)| agg.active.contains(c) && m.contains_key(&class))
            .map(|(&c, _)| c)
            .collect();
        if owners.is_empty() {
            continue;
        }
        if params.chi == -1.0 {
            let (global, weights, sum) =
                average_class(he, agg, ver, class, &owners, params, transcript, dlog)?;
            agg.global.insert(class, global);
            outcome.weights.extend(weights);
            outcome.sums.insert(class, sum);
            continue;
        }
        let Some((trusted, norm)) =
            trusted_prototype(he, agg, ver, class, params, transcript, dlog)?
        else {
            continue;
        };
        outcome.trusted_norms.insert(class, norm);
        if norm < 1e-12 {
            outcome.retained.insert(class);
            outcome
                .warnings
                .push(format!("class {class}: degenerate trusted prototype, retained"));
            continue;
        }
        let mut sims = BTreeMap::new();
        for &client in &owners {
            let sim = credibility(he, &agg.received[&client][&class], &trusted, norm)?;
            sims.insert(client, sim);
        }
        let exchange = masked_weight_exchange(he, agg, ver, class, &sims, params, transcript, dlog)?;
        outcome.sums.insert(class, exchange.sum);
        if exchange.sum <= 0.0 {
            outcome.retained.insert(class);
            outcome
                .warnings
                .push(format!("class {class}: every submission filtered, retained"));
            outcome.weights.extend(exchange.weights);
            continue;
        }
        let global = aggregate_class(he, agg, class, &exchange, exchange.sum)?;
        agg.global.insert(class, global);
        outcome.weights.extend(exchange.weights);
    }
    outcome.global = agg.global.clone();
    agg.received.clear();
    Ok(outcome)
}

/// Log the distribution of the encrypted global prototypes to every client.
pub fn log_distribution(
    agg: &AggregatorState,
    clients: &[usize],
    transcript: &mut RoundTranscript,
) {
    for &client in clients {
        for (&class, c) in &agg.global {
            transcript.log(
                Party::Aggregator,
                Party::Client(client),
                MessageKind::GlobalPrototype,
                Some(class),
                Some(client),
                PayloadKind::CipherVector {
                    key: KeyRole::ClientsShared,
                    dim: c.dim(),
                },
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto::normalize;
    use alloc::vec;

    fn setup() -> (HeSim, AggregatorState, VerifierState, KeyPair) {
        let mut he = HeSim::new(404);
        let ver_kp = he.keygen(KeyRole::Verifier);
        let cli_kp = he.keygen(KeyRole::ClientsShared);
        let agg = AggregatorState::new(ver_kp.public(), cli_kp.public());
        let ver = VerifierState::new(ver_kp, cli_kp.public()).unwrap();
        (he, agg, ver, cli_kp)
    }

    fn params(chi: f64) -> ProtocolParams {
        ProtocolParams {
            chi,
            cipher_max_iters: 29,
            policy: ZeroMinPolicy::Literal,
            norm_tolerance: 1e-5,
            mask_seed: 11,
            round: 1,
        }
    }

    fn submit_unit(
        he: &mut HeSim,
        agg: &mut AggregatorState,
        t: &mut RoundTranscript,
        client: usize,
        class: usize,
        v: &[f64],
    ) {
        let u = normalize(v).unwrap();
        let c = he.encrypt(&agg.verifier_pk.clone(), &u).unwrap();
        submit_to_aggregator(agg, client, BTreeMap::from([(class, c)]), t);
    }

    #[test]
    fn round6_micro_rounds_half_away_from_zero() {
        assert_eq!(round6_micro(1.2345675), 1_234_568);
        assert_eq!(round6_micro(1.2345674), 1_234_567);
        assert_eq!(round6_micro(-0.0000005), -1);
        assert_eq!(round6_micro(-0.0000004), 0);
        assert_eq!(round6_micro(0.75), 750_000);
        assert_eq!(round6_micro(2.0), 2_000_000);
    }

    #[test]
    fn all_unit_prototypes_survive_verification() {
        let (mut he, mut agg, ver, _) = setup();
        let mut t = RoundTranscript::new(1);
        let mut dlog = DecryptLog::default();
        submit_unit(&mut he, &mut agg, &mut t, 0, 0, &[1.0, 0.0]);
        submit_unit(&mut he, &mut agg, &mut t, 1, 0, &[0.0, 1.0]);
        let s = verify_normalization(&mut he, &mut agg, &ver, &params(0.0), &mut t, &mut dlog)
            .unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn amplified_prototype_is_rejected() {
        let (mut he, mut agg, ver, _) = setup();
        let mut t = RoundTranscript::new(1);
        let mut dlog = DecryptLog::default();
        submit_unit(&mut he, &mut agg, &mut t, 0, 0, &[1.0, 0.0]);
        // Client 1 submits a x5-amplified prototype: squared norm 25.
        let amplified = [0.0, 5.0];
        let c = he.encrypt(&agg.verifier_pk.clone(), &amplified).unwrap();
        submit_to_aggregator(&mut agg, 1, BTreeMap::from([(0, c)]), &mut t);
        let s = verify_normalization(&mut he, &mut agg, &ver, &params(0.0), &mut t, &mut dlog)
            .unwrap();
        assert!(s.contains(&0) && !s.contains(&1));
    }

    #[test]
    fn empty_survivor_set_aborts() {
        let (mut he, mut agg, ver, _) = setup();
        let mut t = RoundTranscript::new(1);
        let mut dlog = DecryptLog::default();
        let c = he.encrypt(&agg.verifier_pk.clone(), &[3.0, 4.0]).unwrap();
        submit_to_aggregator(&mut agg, 0, BTreeMap::from([(0, c)]), &mut t);
        assert!(matches!(
            verify_normalization(&mut he, &mut agg, &ver, &params(0.0), &mut t, &mut dlog),
            Err(Error::ProtocolAbort(_))
        ));
    }

    #[test]
    fn trusted_prototype_of_single_client_is_that_prototype() {
        let (mut he, mut agg, ver, _) = setup();
        let mut t = RoundTranscript::new(1);
        let mut dlog = DecryptLog::default();
        submit_unit(&mut he, &mut agg, &mut t, 3, 7, &[0.6, 0.8]);
        agg.active = BTreeSet::from([3]);
        let (c, norm) = trusted_prototype(&mut he, &agg, &ver, 7, &params(0.0), &mut t, &mut dlog)
            .unwrap()
            .unwrap();
        assert!((norm - 1.0).abs() < 1e-5);
        // Decryptable only by the verifier; compare through its state.
        let dec = ver.decrypt_vector(&he, &c, 1, &mut dlog).unwrap();
        assert!((dec[0] - 0.6).abs() < 1e-5 && (dec[1] - 0.8).abs() < 1e-5);
    }

    #[test]
    fn trusted_prototype_of_two_orthogonal_clients() {
        let (mut he, mut agg, ver, _) = setup();
        let mut t = RoundTranscript::new(1);
        let mut dlog = DecryptLog::default();
        submit_unit(&mut he, &mut agg, &mut t, 0, 0, &[1.0, 0.0]);
        submit_unit(&mut he, &mut agg, &mut t, 1, 0, &[0.0, 1.0]);
        agg.active = BTreeSet::from([0, 1]);
        let (c, norm) = trusted_prototype(&mut he, &agg, &ver, 0, &params(0.0), &mut t, &mut dlog)
            .unwrap()
            .unwrap();
        let dec = ver.decrypt_vector(&he, &c, 1, &mut dlog).unwrap();
        assert!((dec[0] - 0.5).abs() < 1e-5 && (dec[1] - 0.5).abs() < 1e-5);
        assert!((norm - fmath::sqrt(0.5)).abs() < 1e-5);
    }

    #[test]
    fn missing_class_yields_none() {
        let (mut he, mut agg, ver, _) = setup();
        let mut t = RoundTranscript::new(1);
        let mut dlog = DecryptLog::default();
        submit_unit(&mut he, &mut agg, &mut t, 0, 0, &[1.0, 0.0]);
        agg.active = BTreeSet::from([0]);
        assert!(trusted_prototype(&mut he, &agg, &ver, 5, &params(0.0), &mut t, &mut dlog)
            .unwrap()
            .is_none());
    }

    #[test]
    fn credibility_of_parallel_and_orthogonal_vectors() {
        let (mut he, mut agg, ver, _) = setup();
        let mut t = RoundTranscript::new(1);
        let mut dlog = DecryptLog::default();
        submit_unit(&mut he, &mut agg, &mut t, 0, 0, &[1.0, 0.0]);
        agg.active = BTreeSet::from([0]);
        let (trusted, norm) =
            trusted_prototype(&mut he, &agg, &ver, 0, &params(0.0), &mut t, &mut dlog)
                .unwrap()
                .unwrap();
        let parallel = he.encrypt(&agg.verifier_pk.clone(), &[1.0, 0.0]).unwrap();
        let orthogonal = he.encrypt(&agg.verifier_pk.clone(), &[0.0, 1.0]).unwrap();
        let sim_p = credibility(&mut he, &parallel, &trusted, norm).unwrap();
        let sim_o = credibility(&mut he, &orthogonal, &trusted, norm).unwrap();
        assert!((ver.decrypt_scalar(&he, &sim_p, 1, &mut dlog).unwrap() - 1.0).abs() < 1e-4);
        assert!(ver.decrypt_scalar(&he, &sim_o, 1, &mut dlog).unwrap().abs() < 1e-4);
    }

    #[test]
    fn credibility_rejects_degenerate_trusted_norm() {
        let (mut he, _, _, _) = setup();
        let pk = he.keygen(KeyRole::Verifier).public();
        let a = he.encrypt(&pk, &[1.0, 0.0]).unwrap();
        let b = he.encrypt(&pk, &[0.0, 0.0]).unwrap();
        assert!(matches!(
            credibility(&mut he, &a, &b, 1e-13),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn random_credibility_matches_plaintext_cosine() {
        let (mut he, mut agg, ver, _) = setup();
        let mut t = RoundTranscript::new(1);
        let mut dlog = DecryptLog::default();
        let mut rng = stream(21, Domain::Mask, 0, 0);
        submit_unit(&mut he, &mut agg, &mut t, 0, 0, &[0.3, -0.8, 0.5, 0.1]);
        submit_unit(&mut he, &mut agg, &mut t, 1, 0, &[-0.2, 0.9, 0.4, -0.6]);
        agg.active = BTreeSet::from([0, 1]);
        let (trusted, norm) =
            trusted_prototype(&mut he, &agg, &ver, 0, &params(0.0), &mut t, &mut dlog)
                .unwrap()
                .unwrap();
        let trusted_plain = ver.decrypt_vector(&he, &trusted, 1, &mut dlog).unwrap();
        for _ in 0..20 {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let unit = normalize(&raw).unwrap();
            let c = he.encrypt(&agg.verifier_pk.clone(), &unit).unwrap();
            let sim = credibility(&mut he, &c, &trusted, norm).unwrap();
            let got = ver.decrypt_scalar(&he, &sim, 1, &mut dlog).unwrap();
            let want = fmath::cosine(&unit, &trusted_plain).unwrap();
            assert!((got - want).abs() < 1e-5, "got {got}, want {want}");
        }
    }

    fn exchange_for_sims(
        sims_plain: &[f64],
        chi: f64,
        policy: ZeroMinPolicy,
    ) -> (ClassExchange, f64) {
        let (mut he, mut agg, ver, _) = setup();
        let mut t = RoundTranscript::new(1);
        let mut dlog = DecryptLog::default();
        for (i, _) in sims_plain.iter().enumerate() {
            submit_unit(&mut he, &mut agg, &mut t, i, 0, &[1.0, 0.0]);
        }
        agg.active = (0..sims_plain.len()).collect();
        let mut sims = BTreeMap::new();
        for (i, &s) in sims_plain.iter().enumerate() {
            sims.insert(i, he.encrypt_scalar(&agg.verifier_pk.clone(), s).unwrap());
        }
        let mut pr = params(chi);
        pr.policy = policy;
        let ex = masked_weight_exchange(&mut he, &mut agg, &ver, 0, &sims, &pr, &mut t, &mut dlog)
            .unwrap();
        let p = agg.round_p[&0];
        (ex, p)
    }

    #[test]
    fn below_threshold_client_is_zeroed_others_keep_blinded_weight() {
        // sims {0.9, 0.8, -0.5} with chi = 0: the below-threshold client's
        // comparison pins to the shifted threshold 0.5 and is the rounded
        // minimum; the others keep p * (sim + 1)/2.
        let (ex, p) = exchange_for_sims(&[0.9, 0.8, -0.5], 0.0, ZeroMinPolicy::Literal);
        let w: BTreeMap<usize, &AggregationWeight> =
            ex.weights.iter().map(|w| (w.client, w)).collect();
        assert!((w[&0].value - p * 0.95).abs() < 1e-4);
        assert!((w[&1].value - p * 0.90).abs() < 1e-4);
        assert_eq!(w[&2].value, 0.0);
        assert!(w[&2].filtered && !w[&0].filtered && !w[&1].filtered);
        assert!((ex.sum - p * 1.85).abs() < 1e-3);
    }

    #[test]
    fn all_equal_sims_zero_everyone_under_literal_policy() {
        let (ex, _) = exchange_for_sims(&[0.7, 0.7, 0.7], 0.0, ZeroMinPolicy::Literal);
        assert!(ex.weights.iter().all(|w| w.filtered && w.value == 0.0));
        assert_eq!(ex.sum, 0.0);
    }

    #[test]
    fn distinct_above_threshold_sims_zero_exactly_the_lowest_under_literal() {
        let (ex, _) = exchange_for_sims(&[0.9, 0.6, 0.75], 0.0, ZeroMinPolicy::Literal);
        let filtered: Vec<usize> = ex
            .weights
            .iter()
            .filter(|w| w.filtered)
            .map(|w| w.client)
            .collect();
        assert_eq!(filtered, vec![1]);
    }

    #[test]
    fn below_threshold_policy_keeps_all_honest_clients() {
        let (ex, _) =
            exchange_for_sims(&[0.9, 0.6, 0.75], 0.0, ZeroMinPolicy::OnlyIfBelowThreshold);
        assert!(ex.weights.iter().all(|w| !w.filtered));
        let (ex2, _) =
            exchange_for_sims(&[0.9, -0.3, -0.7], 0.0, ZeroMinPolicy::OnlyIfBelowThreshold);
        let filtered: Vec<usize> = ex2
            .weights
            .iter()
            .filter(|w| w.filtered)
            .map(|w| w.client)
            .collect();
        assert_eq!(filtered, vec![1, 2]);
    }

    #[test]
    fn chi_outside_range_is_rejected() {
        let (mut he, mut agg, ver, _) = setup();
        let mut t = RoundTranscript::new(1);
        let mut dlog = DecryptLog::default();
        submit_unit(&mut he, &mut agg, &mut t, 0, 0, &[1.0, 0.0]);
        agg.active = BTreeSet::from([0]);
        let sims = BTreeMap::from([(0, he.encrypt_scalar(&agg.verifier_pk.clone(), 0.5).unwrap())]);
        let mut pr = params(1.0);
        pr.chi = 1.0;
        assert!(matches!(
            masked_weight_exchange(&mut he, &mut agg, &ver, 0, &sims, &pr, &mut t, &mut dlog),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn aggregate_single_client_recovers_unit_prototype() {
        let (mut he, mut agg, ver, cli_kp) = setup();
        let mut t = RoundTranscript::new(1);
        let mut dlog = DecryptLog::default();
        submit_unit(&mut he, &mut agg, &mut t, 0, 0, &[0.6, 0.8]);
        agg.active = BTreeSet::from([0]);
        let sims = BTreeMap::from([(0, he.encrypt_scalar(&agg.verifier_pk.clone(), 0.9).unwrap())]);
        let mut pr = params(0.0);
        pr.policy = ZeroMinPolicy::OnlyIfBelowThreshold;
        let ex = masked_weight_exchange(&mut he, &mut agg, &ver, 0, &sims, &pr, &mut t, &mut dlog)
            .unwrap();
        assert!(ex.sum > 0.0);
        let global = aggregate_class(&mut he, &agg, 0, &ex, ex.sum).unwrap();
        let dec = he.decrypt(&cli_kp, &global).unwrap();
        assert!((dec[0] - 0.6).abs() < 1e-4 && (dec[1] - 0.8).abs() < 1e-4);
    }

    #[test]
    fn aggregate_weighted_mean_of_two_prototypes() {
        // Weights {0.6, 0.2} on (1,0) and (0,1) -> (0.75, 0.25).
        let (mut he, mut agg, ver, cli_kp) = setup();
        let mut t = RoundTranscript::new(1);
        let mut dlog = DecryptLog::default();
        submit_unit(&mut he, &mut agg, &mut t, 0, 0, &[1.0, 0.0]);
        submit_unit(&mut he, &mut agg, &mut t, 1, 0, &[0.0, 1.0]);
        agg.active = BTreeSet::from([0, 1]);
        // Build the exchange by hand: masks, weights and returns.
        let dim = 2;
        let (_, masks) = draw_masks(&params(0.0), 0, &[0, 1], dim);
        for (&c, v) in &masks {
            agg.round_masks.insert((c, 0), v.clone());
        }
        let mut returned = BTreeMap::new();
        for (client, j) in [(0usize, 0.6f64), (1, 0.2)] {
            let proto = agg.received[&client][&0].clone();
            let vc = he.hadamard_plain(&proto, &masks[&client]).unwrap();
            let plain = ver.decrypt_vector(&he, &vc, 1, &mut dlog).unwrap();
            let mx = he.encrypt(&ver.clients_pk, &plain).unwrap();
            let jx = he.encrypt_scalar(&ver.clients_pk, j).unwrap();
            returned.insert(client, (jx, mx));
        }
        let ex = ClassExchange {
            returned,
            sum: 0.8,
            weights: Vec::new(),
        };
        let global = aggregate_class(&mut he, &agg, 0, &ex, ex.sum).unwrap();
        let dec = he.decrypt(&cli_kp, &global).unwrap();
        assert!((dec[0] - 0.75).abs() < 1e-4 && (dec[1] - 0.25).abs() < 1e-4);
    }

    #[test]
    fn missing_weight_for_submitted_prototype_is_protocol_error() {
        let (mut he, mut agg, ver, _) = setup();
        let mut t = RoundTranscript::new(1);
        let mut dlog = DecryptLog::default();
        submit_unit(&mut he, &mut agg, &mut t, 0, 0, &[1.0, 0.0]);
        agg.active = BTreeSet::from([0]);
        // No masks recorded: aggregation must refuse.
        let proto = agg.received[&0][&0].clone();
        let plain = ver.decrypt_vector(&he, &proto, 1, &mut dlog).unwrap();
        let mx = he.encrypt(&ver.clients_pk, &plain).unwrap();
        let jx = he.encrypt_scalar(&ver.clients_pk, 1.0).unwrap();
        let ex = ClassExchange {
            returned: BTreeMap::from([(0, (jx, mx))]),
            sum: 1.0,
            weights: Vec::new(),
        };
        assert!(matches!(
            aggregate_class(&mut he, &agg, 0, &ex, 1.0),
            Err(Error::Protocol(_))
        ));
    }

    use crate::rng::{stream, Domain};
}
