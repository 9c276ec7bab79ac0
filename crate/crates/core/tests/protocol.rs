//! End-to-end protocol properties: oracle equivalence against the plaintext
//! reference, mask invariance, filtering correctness, transcript audits and
//! determinism.

use std::collections::BTreeMap;

use protofed_core::agg::{
    self, run_secure_aggregation, submit_to_aggregator, AggregatorState, DecryptLog,
    ProtocolParams, RoundTranscript, VerifierState, ZeroMinPolicy,
};
use protofed_core::data::BlobSpec;
use protofed_core::fed::{run_experiment, AggMode, DatasetSpec, ExperimentConfig};
use protofed_core::hesim::{HeSim, KeyRole};
use protofed_core::proto::normalize;
use protofed_core::threat::{AttackKind, AttackSpec};

fn base_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        n_clients: 20,
        rounds: 2,
        local_iters: 2,
        batch_size: 32,
        n_classes: 6,
        proto_dim: 8,
        hidden_dim: 24,
        avg_classes: 3.0,
        std_classes: 1.0,
        seed,
        he_seed: seed + 1,
        dataset: DatasetSpec::Blobs(BlobSpec {
            n_classes: 6,
            dim: 12,
            samples_per_class: 60,
            radius: 5.0,
            sigma: 1.0,
            seed,
        }),
        ..ExperimentConfig::default()
    }
}

#[test]
fn encrypted_pipeline_matches_plaintext_reference() {
    let mut cfg = base_config(17);
    cfg.agg_mode = AggMode::Ppfpl;
    let encrypted = run_experiment(&cfg).unwrap();
    cfg.agg_mode = AggMode::PlaintextReference;
    let reference = run_experiment(&cfg).unwrap();

    assert_eq!(encrypted.globals.len(), reference.globals.len());
    for (e, r) in encrypted.globals.iter().zip(&reference.globals) {
        assert_eq!((e.round, e.class), (r.round, r.class));
        for (a, b) in e.vector.iter().zip(&r.vector) {
            assert!(
                (a - b).abs() < 1e-4,
                "round {} class {}: {a} vs {b}",
                e.round,
                e.class
            );
        }
    }
}

#[test]
fn global_prototypes_are_invariant_under_fresh_masks() {
    let cfg = base_config(23);
    let a = run_experiment(&cfg).unwrap();
    let mut salted = cfg.clone();
    salted.mask_salt = 99;
    let b = run_experiment(&salted).unwrap();
    assert_eq!(a.globals.len(), b.globals.len());
    for (x, y) in a.globals.iter().zip(&b.globals) {
        assert_eq!((x.round, x.class), (y.round, y.class));
        for (u, v) in x.vector.iter().zip(&y.vector) {
            assert!((u - v).abs() < 1e-5, "mask draw changed the aggregate");
        }
    }
}

#[test]
fn below_threshold_prototypes_are_filtered_benign_kept() {
    let mut he = HeSim::new(7);
    let ver_kp = he.keygen(KeyRole::Verifier);
    let cli_kp = he.keygen(KeyRole::ClientsShared);
    let mut agg_state = AggregatorState::new(ver_kp.public(), cli_kp.public());
    let ver = VerifierState::new(ver_kp, cli_kp.public()).unwrap();
    let mut transcript = RoundTranscript::new(1);
    let mut dlog = DecryptLog::default();

    // Four benign clients around a base direction, two strongly opposed.
    let base = [1.0, 0.2, -0.3, 0.5];
    let tweaks = [[0.0, 0.05, 0.0, 0.0], [0.02, 0.0, 0.03, 0.0], [0.0, 0.0, 0.0, 0.04], [0.01, 0.02, 0.0, 0.0]];
    for (i, tw) in tweaks.iter().enumerate() {
        let v: Vec<f64> = base.iter().zip(tw).map(|(b, t)| b + t).collect();
        let c = he.encrypt(&agg_state.verifier_pk.clone(), &normalize(&v).unwrap()).unwrap();
        submit_to_aggregator(&mut agg_state, i, BTreeMap::from([(0usize, c)]), &mut transcript);
    }
    for i in 4..6 {
        let v: Vec<f64> = base.iter().map(|b| -b).collect();
        let c = he.encrypt(&agg_state.verifier_pk.clone(), &normalize(&v).unwrap()).unwrap();
        submit_to_aggregator(&mut agg_state, i, BTreeMap::from([(0usize, c)]), &mut transcript);
    }
    let params = ProtocolParams {
        chi: 0.0,
        cipher_max_iters: 29,
        policy: ZeroMinPolicy::Literal,
        norm_tolerance: 1e-5,
        mask_seed: 3,
        round: 1,
    };
    let outcome =
        run_secure_aggregation(&mut he, &mut agg_state, &ver, &params, &mut transcript, &mut dlog)
            .unwrap();
    let filtered: Vec<usize> = outcome
        .weights
        .iter()
        .filter(|w| w.filtered)
        .map(|w| w.client)
        .collect();
    assert_eq!(filtered, vec![4, 5]);
    for w in outcome.weights.iter().filter(|w| !w.filtered) {
        assert!(w.value > 0.0);
    }
}

#[test]
fn transcripts_satisfy_privacy_audit_and_key_hygiene() {
    let mut cfg = base_config(31);
    cfg.attack = AttackSpec {
        kind: AttackKind::Amplify,
        fraction: 0.2,
        amplify_factor: 5.0,
        seed: 4,
    };
    let log = run_experiment(&cfg).unwrap();
    assert!(log.decrypt_log.key_hygiene_holds());
    for transcript in &log.transcripts {
        assert!(transcript.verifier_received_allowed());
        assert!(transcript.aggregator_received_allowed());
    }
    // Every dumped prototype corresponds to exactly one submission message.
    for t in 1..=cfg.rounds {
        let submitted: Vec<(usize, usize)> = log.transcripts[t as usize]
            .messages
            .iter()
            .filter(|m| m.kind == agg::MessageKind::SubmitPrototype)
            .map(|m| (m.client.unwrap(), m.class.unwrap()))
            .collect();
        let mut dumped: Vec<(usize, usize)> = log
            .prototypes
            .iter()
            .filter(|p| p.round == t)
            .map(|p| (p.client, p.class))
            .collect();
        let mut submitted_sorted = submitted.clone();
        submitted_sorted.sort_unstable();
        dumped.sort_unstable();
        assert_eq!(submitted_sorted, dumped);
        assert_eq!(submitted.len(), {
            let mut dedup = submitted.clone();
            dedup.sort_unstable();
            dedup.dedup();
            dedup.len()
        });
    }
}

#[test]
fn amplify_attackers_are_excluded_every_round() {
    let mut cfg = base_config(41);
    cfg.attack = AttackSpec {
        kind: AttackKind::Amplify,
        fraction: 0.2,
        amplify_factor: 5.0,
        seed: 8,
    };
    let log = run_experiment(&cfg).unwrap();
    let malicious: Vec<usize> = log
        .round_client
        .iter()
        .filter(|r| r.round == 1 && r.malicious)
        .map(|r| r.client)
        .collect();
    assert_eq!(malicious.len(), 4);
    for rs in &log.round_survivors {
        for m in &malicious {
            assert!(!rs.survivors.contains(m), "round {}: {m} survived", rs.round);
        }
        assert_eq!(rs.survivors.len(), cfg.n_clients - malicious.len());
    }
}

#[test]
fn runs_are_bit_identical_for_fixed_seeds() {
    let mut cfg = base_config(53);
    cfg.n_clients = 8;
    cfg.attack = AttackSpec {
        kind: AttackKind::Feature,
        fraction: 0.25,
        amplify_factor: 5.0,
        seed: 2,
    };
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn plain_average_mode_matches_prototype_mean_oracle() {
    let mut cfg = base_config(61);
    cfg.rounds = 1;
    cfg.chi = -1.0;
    let log = run_experiment(&cfg).unwrap();
    // Oracle: per class, average the dumped (normalized) prototypes.
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for p in log.prototypes.iter().filter(|p| p.round == 1) {
        let e = sums
            .entry(p.class)
            .or_insert_with(|| (vec![0.0; p.vector.len()], 0));
        for (s, v) in e.0.iter_mut().zip(&p.vector) {
            *s += v;
        }
        e.1 += 1;
    }
    for g in log.globals.iter().filter(|g| g.round == 1) {
        let (sum, n) = &sums[&g.class];
        for (got, s) in g.vector.iter().zip(sum) {
            assert!((got - s / *n as f64).abs() < 1e-4);
        }
    }
}

#[test]
fn marginal_amplification_documents_tolerance_boundary() {
    let mut he = HeSim::new(77);
    let ver_kp = he.keygen(KeyRole::Verifier);
    let cli_kp = he.keygen(KeyRole::ClientsShared);
    let mut agg_state = AggregatorState::new(ver_kp.public(), cli_kp.public());
    let ver = VerifierState::new(ver_kp, cli_kp.public()).unwrap();
    let params = ProtocolParams {
        chi: 0.0,
        cipher_max_iters: 29,
        policy: ZeroMinPolicy::Literal,
        norm_tolerance: 1e-5,
        mask_seed: 3,
        round: 1,
    };
    let unit = normalize(&[0.3, -0.4, 0.5, 0.1]).unwrap();
    for (factor, survives) in [(1.0 + 1e-9, true), (1.001, false)] {
        let mut transcript = RoundTranscript::new(1);
        let mut dlog = DecryptLog::default();
        let honest = he.encrypt(&agg_state.verifier_pk.clone(), &unit).unwrap();
        submit_to_aggregator(&mut agg_state, 0, BTreeMap::from([(0usize, honest)]), &mut transcript);
        let scaled: Vec<f64> = unit.iter().map(|v| v * factor).collect();
        let c = he.encrypt(&agg_state.verifier_pk.clone(), &scaled).unwrap();
        submit_to_aggregator(&mut agg_state, 1, BTreeMap::from([(0usize, c)]), &mut transcript);
        let survivors = protofed_core::agg::verify_normalization(
            &mut he,
            &mut agg_state,
            &ver,
            &params,
            &mut transcript,
            &mut dlog,
        )
        .unwrap();
        assert_eq!(survivors.contains(&1), survives, "factor {factor}");
        agg_state.received.clear();
    }
}
