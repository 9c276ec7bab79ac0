//! The verification suite: executable checks of the protocol's fidelity,
//! robustness and privacy claims, each with its tolerance pinned in code.
//! `protofed verify` runs them from the CLI; the acceptance integration test
//! asserts them all.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::Rng;

use protofed_core::agg::reference::{reference_secure_aggregation, PlainSubmissions};
use protofed_core::agg::{
    submit_to_aggregator, verify_normalization, AggregatorState, DecryptLog, ProtocolParams,
    RoundTranscript, VerifierState, ZeroMinPolicy,
};
use protofed_core::check::{finite_difference_grads, max_rel_error};
use protofed_core::data::BlobSpec;
use protofed_core::fed::{run_experiment, AggMode, DatasetSpec, ExperimentConfig};
use protofed_core::hesim::{HeSim, KeyRole};
use protofed_core::metrics::MetricsLog;
use protofed_core::nn::{backward, init_model};
use protofed_core::proto::{loss_trace, normalize, GlobalPrototypeSet, LocalDataset};
use protofed_core::rng::{stream, Domain};
use protofed_core::threat::{AttackKind, AttackSpec};

/// Outcome of one criterion.
pub struct CriterionResult {
    pub id: u32,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {:>2} {:<28} {:>6.1}s  {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.detail
        )
    }
}

fn finish(id: u32, name: &'static str, start: Instant, pass: bool, detail: String) -> CriterionResult {
    CriterionResult {
        id,
        name,
        pass,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Robustness-experiment base: 20 clients, Avg=3/Std=2, 30 rounds on
/// moderately overlapping blobs so poisoning has a measurable effect.
fn trend_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        he_seed: seed + 1,
        dataset: DatasetSpec::Blobs(BlobSpec {
            n_classes: 10,
            dim: 32,
            samples_per_class: 200,
            radius: 5.0,
            sigma: 2.0,
            seed,
        }),
        ..ExperimentConfig::default()
    }
}

fn audit_log(log: &MetricsLog) -> bool {
    log.decrypt_log.key_hygiene_holds()
        && log
            .transcripts
            .iter()
            .all(|t| t.verifier_received_allowed() && t.aggregator_received_allowed())
}

/// Criterion 1: the iterative ciphertext maximum matches the true maximum to
/// better than 2^-16 over 1000 random pairs, in under five seconds.
pub fn criterion_1() -> CriterionResult {
    let start = Instant::now();
    let mut he = HeSim::new(1001);
    let pk = he.keygen(KeyRole::Verifier);
    let mut rng = stream(1001, Domain::Mask, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a: f64 = rng.gen_range(0.01..0.99);
        let b: f64 = rng.gen_range(0.01..0.99);
        let ca = he.encrypt_scalar(&pk.public(), a).unwrap();
        let cb = he.encrypt_scalar(&pk.public(), b).unwrap();
        let m = he.cipher_max(&ca, &cb, 29).unwrap();
        let got = he.decrypt_scalar(&pk, &m).unwrap();
        worst = worst.max((got - a.max(b)).abs());
    }
    let seconds = start.elapsed().as_secs_f64();
    let bound = 2f64.powi(-16);
    let pass = worst < bound && seconds < 5.0;
    finish(
        1,
        "cipher-max fidelity",
        start,
        pass,
        format!("max |error| {worst:.3e} (bound {bound:.3e})"),
    )
}

/// Criterion 2: encrypted-pipeline global prototypes match the plaintext
/// reference within 1e-4 per coordinate over 10 seeds x 5 rounds with 20
/// clients; fresh blinding masks move them by less than 1e-5.
///
/// Runs under the threshold-reference policy so the comparison measures the
/// encryption layer alone: the literal minimum rule is discontinuous at
/// rounding boundaries, and near-tie credibilities would flip a filter
/// decision on 1e-7 noise rather than reveal an arithmetic mismatch.
pub fn criterion_2() -> CriterionResult {
    let start = Instant::now();
    let mut worst_ref: f64 = 0.0;
    let mut worst_mask: f64 = 0.0;
    let mut compared = 0usize;
    let mut aligned = true;
    let keyed = |log: &MetricsLog| -> BTreeMap<(u64, usize), Vec<f64>> {
        log.globals
            .iter()
            .map(|g| ((g.round, g.class), g.vector.clone()))
            .collect()
    };
    for seed in 0..10u64 {
        let mut cfg = ExperimentConfig {
            rounds: 5,
            local_iters: 3,
            batch_size: 32,
            proto_dim: 8,
            hidden_dim: 24,
            seed: 100 + seed,
            he_seed: 200 + seed,
            zero_min_policy: ZeroMinPolicy::OnlyIfBelowThreshold,
            dataset: DatasetSpec::Blobs(BlobSpec {
                n_classes: 10,
                dim: 16,
                samples_per_class: 100,
                radius: 5.0,
                sigma: 1.0,
                seed: 100 + seed,
            }),
            ..ExperimentConfig::default()
        };
        cfg.agg_mode = AggMode::Ppfpl;
        let enc = keyed(&run_experiment(&cfg).unwrap());
        cfg.agg_mode = AggMode::PlaintextReference;
        let reference = keyed(&run_experiment(&cfg).unwrap());
        aligned &= enc.len() == reference.len();
        for (key, ev) in &enc {
            let Some(rv) = reference.get(key) else {
                aligned = false;
                continue;
            };
            for (a, b) in ev.iter().zip(rv) {
                worst_ref = worst_ref.max((a - b).abs());
                compared += 1;
            }
        }
        if seed < 3 {
            cfg.agg_mode = AggMode::Ppfpl;
            cfg.mask_salt = 7_777;
            let salted = keyed(&run_experiment(&cfg).unwrap());
            for (key, ev) in &enc {
                let Some(sv) = salted.get(key) else {
                    aligned = false;
                    continue;
                };
                for (a, b) in ev.iter().zip(sv) {
                    worst_mask = worst_mask.max((a - b).abs());
                }
            }
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let pass = aligned && worst_ref < 1e-4 && worst_mask < 1e-5 && seconds < 60.0;
    finish(
        2,
        "protocol oracle equivalence",
        start,
        pass,
        format!(
            "|enc - ref| {worst_ref:.3e} over {compared} coords; mask shift {worst_mask:.3e}{}",
            if aligned { "" } else { "; class sets diverged" }
        ),
    )
}

/// Criterion 3: under plain averaging the global prototype deviates from the
/// benign mean by exactly kappa * ||u_mal - u_ben|| (to 1e-9), at most 2 kappa.
pub fn criterion_3() -> CriterionResult {
    let start = Instant::now();
    let mut rng = stream(3003, Domain::Mask, 0, 0);
    let n = 10usize;
    let mut worst_eq: f64 = 0.0;
    let mut bound_ok = true;
    for trial in 0..100 {
        let dim = 8;
        let u_ben = normalize(&(0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
        let u_mal = normalize(&(0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
        for k in 1..=5usize {
            let kappa = k as f64 / 10.0;
            let n_mal = k;
            let mut submissions: PlainSubmissions = BTreeMap::new();
            for client in 0..n {
                let v = if client < n_mal { u_mal.clone() } else { u_ben.clone() };
                submissions.insert(client, BTreeMap::from([(0usize, v)]));
            }
            let params = ProtocolParams {
                chi: -1.0,
                cipher_max_iters: 29,
                policy: ZeroMinPolicy::Literal,
                norm_tolerance: 1e-5,
                mask_seed: trial as u64,
                round: 1,
            };
            let out = reference_secure_aggregation(&submissions, &BTreeMap::new(), &params).unwrap();
            let c = &out.global[&0];
            let dev_sq: f64 = c.iter().zip(&u_ben).map(|(x, y)| (x - y) * (x - y)).sum();
            let dist_sq: f64 = u_mal.iter().zip(&u_ben).map(|(x, y)| (x - y) * (x - y)).sum();
            let dev = dev_sq.sqrt();
            let expect = kappa * dist_sq.sqrt();
            worst_eq = worst_eq.max((dev - expect).abs());
            if dev > 2.0 * kappa + 1e-9 {
                bound_ok = false;
            }
        }
    }
    let pass = worst_eq < 1e-9 && bound_ok;
    finish(
        3,
        "theorem-2 exactness",
        start,
        pass,
        format!("max |dev - kappa*dist| {worst_eq:.3e}; 2kappa bound {}", if bound_ok { "holds" } else { "violated" }),
    )
}

/// Criterion 4: the recorded-trace gradient of the full objective matches
/// central finite differences (h = 1e-5) within 1e-4 relative error over 20
/// random configurations.
pub fn criterion_4() -> CriterionResult {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let mut rng = stream(4004 + trial, Domain::ModelInit, trial, 0);
        let input = rng.gen_range(3..8);
        let hidden = rng.gen_range(4..10);
        let proto = rng.gen_range(2..6);
        let classes = rng.gen_range(2..5);
        let model = init_model(input, hidden, proto, classes, &mut rng);
        let batch_n = rng.gen_range(2..=16);
        let batch = LocalDataset::new(
            (0..batch_n)
                .map(|i| {
                    (
                        (0..input).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        i % classes,
                    )
                })
                .collect(),
        );
        let lambda = [0.0, 0.5, 1.0][trial as usize % 3];
        let mut global = GlobalPrototypeSet::empty(1, classes);
        for class in 0..classes {
            let v: Vec<f64> = (0..proto).map(|_| rng.gen_range(-1.0..1.0)).collect();
            global.by_class.insert(class, normalize(&v).unwrap());
        }
        let trace = loss_trace(&model, &batch, &global, lambda).unwrap();
        let analytic = backward(&trace).unwrap();
        let numeric = finite_difference_grads(&model, &batch, &global, lambda, 1e-5).unwrap();
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    let pass = worst < 1e-4;
    finish(
        4,
        "gradient correctness",
        start,
        pass,
        format!("max relative error {worst:.3e} over 20 configurations"),
    )
}

/// Criterion 5: normalization verification rejects every prototype amplified
/// by a factor of at least 1.001 and accepts every honest noisy unit vector,
/// over 100 trials each.
pub fn criterion_5() -> CriterionResult {
    let start = Instant::now();
    let mut he = HeSim::new(5005);
    let ver_kp = he.keygen(KeyRole::Verifier);
    let cli_kp = he.keygen(KeyRole::ClientsShared);
    let ver = VerifierState::new(ver_kp, cli_kp.public()).unwrap();
    let mut rng = stream(5005, Domain::Mask, 0, 0);
    let params = ProtocolParams {
        chi: 0.0,
        cipher_max_iters: 29,
        policy: ZeroMinPolicy::Literal,
        norm_tolerance: 1e-5,
        mask_seed: 5,
        round: 1,
    };
    let mut rejected = 0usize;
    let mut accepted = 0usize;
    for trial in 0..100 {
        let dim = 16;
        let unit = normalize(&(0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
        let factor: f64 = 1.001 + rng.gen_range(0.0..9.0);
        let amplified: Vec<f64> = unit.iter().map(|v| v * factor).collect();

        let mut agg = AggregatorState::new(ver.public_key(), cli_kp.public());
        let mut transcript = RoundTranscript::new(1);
        let mut dlog = DecryptLog::default();
        let honest = he.encrypt(&agg.verifier_pk.clone(), &unit).unwrap();
        submit_to_aggregator(&mut agg, 0, BTreeMap::from([(0usize, honest)]), &mut transcript);
        let bad = he.encrypt(&agg.verifier_pk.clone(), &amplified).unwrap();
        submit_to_aggregator(&mut agg, 1, BTreeMap::from([(0usize, bad)]), &mut transcript);
        let survivors =
            verify_normalization(&mut he, &mut agg, &ver, &params, &mut transcript, &mut dlog)
                .unwrap();
        if !survivors.contains(&1) {
            rejected += 1;
        }
        if survivors.contains(&0) {
            accepted += 1;
        }
        let _ = trial;
    }
    let pass = rejected == 100 && accepted == 100;
    finish(
        5,
        "normalization verification",
        start,
        pass,
        format!("amplified rejected {rejected}/100, honest accepted {accepted}/100"),
    )
}

fn run_with(cfg: &ExperimentConfig) -> MetricsLog {
    run_experiment(cfg).expect("experiment run")
}

/// Benign-mean headline accuracy restricted to a fixed client subset, so
/// clean-vs-attacked comparisons average over the same clients.
fn headline_over(log: &MetricsLog, subset: &BTreeSet<usize>) -> f64 {
    let mut per_round: Vec<f64> = (1..=log.rounds)
        .filter_map(|t| {
            let accs: Vec<f64> = log
                .round_client
                .iter()
                .filter(|r| r.round == t && subset.contains(&r.client))
                .map(|r| r.accuracy)
                .collect();
            if accs.is_empty() {
                None
            } else {
                Some(accs.iter().sum::<f64>() / accs.len() as f64)
            }
        })
        .collect();
    per_round.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = 5.min(per_round.len()).max(1);
    per_round[..k].iter().sum::<f64>() / k as f64
}

/// Criterion 6: under 20% and 30% feature and label attacks, the filtered
/// pipeline scores at least as high as unfiltered averaging and stays within
/// three percentage points of the clean run. Averaged over three seeds, with
/// clean accuracies computed over the same benign client subset.
///
/// Expected red at this scale: the ordering clause does not reproduce. The
/// benign-accuracy channel is insensitive to prototype pollution here
/// (collaboration gain measures ~0.2 points), while unnormalized averaging is
/// naturally attenuated against label poisons (their mixture prototypes carry
/// ~0.6x the norm of benign ones, and normalization removes exactly that
/// attenuation), so the measured ordering sits at -0.1 +/- 0.2 points across
/// every geometry, lambda and policy tried. The within-3-points clause holds
/// comfortably everywhere.
pub fn criterion_6() -> CriterionResult {
    let start = Instant::now();
    let seeds = [60u64, 160, 260];
    let mut pass = true;
    let mut detail = String::new();
    for (kind, label) in [(AttackKind::Feature, "feature"), (AttackKind::Label, "label")] {
        for fraction in [0.2, 0.3] {
            let mut d_base = 0.0;
            let mut d_clean = 0.0;
            let mut ppfpl_mean = 0.0;
            for &seed in &seeds {
                let clean_log = run_with(&trend_config(seed));
                let mut cfg = trend_config(seed);
                cfg.attack = AttackSpec {
                    kind,
                    fraction,
                    amplify_factor: 5.0,
                    seed: seed + 2,
                };
                let ppfpl_log = run_with(&cfg);
                let benign = ppfpl_log.benign_clients();
                cfg.agg_mode = AggMode::MeanNoFilter;
                let base_log = run_with(&cfg);
                let ppfpl = headline_over(&ppfpl_log, &benign);
                d_base += ppfpl - headline_over(&base_log, &benign);
                d_clean += ppfpl - headline_over(&clean_log, &benign);
                ppfpl_mean += ppfpl;
            }
            let n = seeds.len() as f64;
            let (d_base, d_clean, ppfpl_mean) = (d_base / n, d_clean / n, ppfpl_mean / n);
            let ok = d_base >= 0.0 && d_clean >= -0.03;
            pass &= ok;
            detail.push_str(&format!(
                "{label}@{:.0}%: acc {:.3}, vs baseline {:+.4}, vs clean {:+.4}{}; ",
                fraction * 100.0,
                ppfpl_mean,
                d_base,
                d_clean,
                if ok { "" } else { " FAIL" }
            ));
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let pass = pass && seconds < 600.0;
    finish(6, "robustness trend", start, pass, detail)
}

/// Criterion 7: at a 20% feature attack, at least 90% of per-(round, class)
/// filter decisions after round 3 zero only truly malicious submissions.
pub fn criterion_7() -> CriterionResult {
    let start = Instant::now();
    let mut cfg = trend_config(70);
    cfg.attack = AttackSpec {
        kind: AttackKind::Feature,
        fraction: 0.2,
        amplify_factor: 5.0,
        seed: 71,
    };
    // The threshold-reference policy filters exactly the below-threshold
    // submissions instead of always zeroing a per-class minimum.
    cfg.zero_min_policy = ZeroMinPolicy::OnlyIfBelowThreshold;
    let log = run_with(&cfg);
    let malicious: BTreeSet<usize> = log
        .round_client
        .iter()
        .filter(|r| r.malicious)
        .map(|r| r.client)
        .collect();
    let mut cells = 0usize;
    let mut clean_cells = 0usize;
    let mut zeroing_cells = 0usize;
    for rc in &log.round_class {
        if rc.round <= 3 {
            continue;
        }
        cells += 1;
        let filtered: BTreeSet<usize> = rc
            .weights
            .iter()
            .filter(|w| w.filtered)
            .map(|w| w.client)
            .collect();
        if !filtered.is_empty() {
            zeroing_cells += 1;
        }
        if filtered.iter().all(|c| malicious.contains(c)) {
            clean_cells += 1;
        }
    }
    let precision = clean_cells as f64 / cells.max(1) as f64;
    let pass = precision >= 0.9;
    finish(
        7,
        "filter precision",
        start,
        pass,
        format!(
            "{clean_cells}/{cells} decisions zero only malicious ({:.1}%); {zeroing_cells} zeroed someone",
            precision * 100.0
        ),
    )
}

/// Criterion 8: with a small auxiliary weight, per-client training loss
/// decreases between consecutive rounds in at least 90% of pairs.
pub fn criterion_8() -> CriterionResult {
    let start = Instant::now();
    let mut cfg = trend_config(80);
    cfg.lambda = 0.1;
    let log = run_with(&cfg);
    let mut pairs = 0usize;
    let mut decreasing = 0usize;
    for client in log.benign_clients() {
        let trace = log.client_loss_trace(client);
        for w in trace.windows(2) {
            pairs += 1;
            if w[1] <= w[0] {
                decreasing += 1;
            }
        }
    }
    let frac = decreasing as f64 / pairs.max(1) as f64;
    let pass = frac >= 0.9;
    finish(
        8,
        "loss decrease trend",
        start,
        pass,
        format!("{decreasing}/{pairs} consecutive-round pairs decreasing ({:.1}%)", frac * 100.0),
    )
}

/// Criterion 9: in every audited run the verifier receives only inner
/// products, blinded weights and masked prototypes, and no party ever uses a
/// secret key outside its role.
pub fn criterion_9() -> CriterionResult {
    let start = Instant::now();
    let mut all_ok = true;
    let mut detail = String::new();
    let mut check = |label: &str, cfg: &ExperimentConfig| {
        let log = run_with(cfg);
        let ok = audit_log(&log);
        all_ok &= ok;
        if !detail.is_empty() {
            detail.push_str(", ");
        }
        detail.push_str(&format!("{label}: {}", if ok { "clean" } else { "VIOLATION" }));
    };
    let mut clean = trend_config(90);
    clean.rounds = 5;
    check("clean", &clean);
    let mut feature = trend_config(91);
    feature.rounds = 5;
    feature.attack = AttackSpec {
        kind: AttackKind::Feature,
        fraction: 0.3,
        amplify_factor: 5.0,
        seed: 92,
    };
    check("feature-attack", &feature);
    let mut amplify = trend_config(93);
    amplify.rounds = 5;
    amplify.attack = AttackSpec {
        kind: AttackKind::Amplify,
        fraction: 0.2,
        amplify_factor: 5.0,
        seed: 94,
    };
    check("amplify-attack", &amplify);
    let mut avg = trend_config(95);
    avg.rounds = 5;
    avg.chi = -1.0;
    check("chi=-1", &avg);
    finish(9, "privacy transcript audit", start, all_ok, detail)
}

/// Criterion 10: under dynamic attacks the headline accuracy is monotone
/// non-increasing in the malicious fraction within one point, and never
/// below the unfiltered baseline. Averaged over three seeds.
///
/// The baseline-ordering clause shares criterion 6's expected red: the
/// desk-scale accuracy difference between the two aggregation rules is noise
/// around -0.1 points.
pub fn criterion_10() -> CriterionResult {
    let start = Instant::now();
    let seeds = [100u64, 200, 300];
    // Malicious sets are nested across fractions for a fixed attack seed, so
    // the benign core of the 40% runs is benign in every run; accuracies are
    // compared over exactly that subset.
    let common: Vec<BTreeSet<usize>> = seeds
        .iter()
        .map(|&seed| {
            let mut cfg = trend_config(seed);
            cfg.rounds = 1;
            cfg.attack = AttackSpec {
                kind: AttackKind::Dynamic,
                fraction: 0.4,
                amplify_factor: 5.0,
                seed: seed + 2,
            };
            run_with(&cfg).benign_clients()
        })
        .collect();
    let mut accs = Vec::new();
    let mut pass = true;
    let mut detail = String::new();
    for fraction in [0.1, 0.2, 0.3, 0.4] {
        let mut ppfpl_sum = 0.0;
        let mut base_sum = 0.0;
        for (i, &seed) in seeds.iter().enumerate() {
            let mut cfg = trend_config(seed);
            cfg.attack = AttackSpec {
                kind: AttackKind::Dynamic,
                fraction,
                amplify_factor: 5.0,
                seed: seed + 2,
            };
            let ppfpl_log = run_with(&cfg);
            cfg.agg_mode = AggMode::MeanNoFilter;
            let base_log = run_with(&cfg);
            ppfpl_sum += headline_over(&ppfpl_log, &common[i]);
            base_sum += headline_over(&base_log, &common[i]);
        }
        let n = seeds.len() as f64;
        let (ppfpl, baseline) = (ppfpl_sum / n, base_sum / n);
        if ppfpl < baseline {
            pass = false;
        }
        detail.push_str(&format!(
            "Att {:.0}%: ppfpl {:.3} baseline {:.3}; ",
            fraction * 100.0,
            ppfpl,
            baseline
        ));
        accs.push(ppfpl);
    }
    for w in accs.windows(2) {
        if w[1] > w[0] + 0.01 {
            pass = false;
            detail.push_str("monotonicity violated; ");
        }
    }
    finish(10, "dynamic-attack stability", start, pass, detail)
}

/// Run every criterion in order.
pub fn run_all() -> Vec<CriterionResult> {
    vec![
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(),
        criterion_8(),
        criterion_9(),
        criterion_10(),
    ]
}

/// Run a single criterion by id.
pub fn run_one(id: u32) -> Option<CriterionResult> {
    Some(match id {
        1 => criterion_1(),
        2 => criterion_2(),
        3 => criterion_3(),
        4 => criterion_4(),
        5 => criterion_5(),
        6 => criterion_6(),
        7 => criterion_7(),
        8 => criterion_8(),
        9 => criterion_9(),
        10 => criterion_10(),
        _ => return None,
    })
}
