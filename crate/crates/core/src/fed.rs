//! Experiment orchestration: configuration, the class-space Non-IID
//! partitioner, federation setup (keys, initial model, malicious selection)
//! and the per-round loop of local computation followed by secure
//! aggregation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::Normal;

use crate::agg::{
    self, log_distribution, reference, run_secure_aggregation, submit_to_aggregator,
    AggregatorState, MessageKind, Party, PayloadKind, ProtocolParams, RoundTranscript,
    VerifierState, ZeroMinPolicy,
};
use crate::data::{gen_blobs, BlobSpec, LabeledPool};
use crate::hesim::{HeSim, KeyPair, KeyRole};
use crate::metrics::{
    GlobalRecord, MetricsLog, ProtoRecord, RoundClassRecord, RoundClientRecord, RoundSurvivors,
    WeightEntry,
};
use crate::nn::{init_model, ModelParams};
use crate::proto::{
    self, compute_prototypes, evaluate_accuracy, submit_prototypes, GlobalPrototypeSet,
    LocalDataset, TrainOpts,
};
use crate::rng::{stream, Domain};
use crate::threat::{self, AttackKind, AttackSpec};
use crate::{Error, Result};

/// Which aggregation pipeline a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum AggMode {
    /// The encrypted two-server protocol.
    #[default]
    Ppfpl,
    /// Unnormalized prototypes, simple averaging, no verification.
    MeanNoFilter,
    /// The identical protocol math on plaintext vectors.
    PlaintextReference,
}

/// Ciphertext backend selector; only the simulated backend is available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum HeBackend {
    #[default]
    Simulated,
}

/// Where the sample pool comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Blobs(BlobSpec),
    /// Pool supplied by the caller (e.g. loaded from IDX files).
    External,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs(BlobSpec::default())
    }
}

/// All hyperparameters of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_clients: usize,
    pub rounds: u64,
    pub local_iters: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub lambda: f64,
    pub chi: f64,
    pub cipher_max_iters: u32,
    /// Mean number of classes per client.
    pub avg_classes: f64,
    /// Standard deviation of the per-client class count.
    pub std_classes: f64,
    pub n_classes: usize,
    pub proto_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub he_seed: u64,
    /// Perturbs only the aggregator's blinding masks; everything else fixed.
    pub mask_salt: u64,
    pub zero_min_policy: ZeroMinPolicy,
    pub he_backend: HeBackend,
    pub agg_mode: AggMode,
    pub attack: AttackSpec,
    pub dataset: DatasetSpec,
    pub norm_tolerance: f64,
    pub test_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_clients: 20,
            rounds: 30,
            local_iters: 5,
            batch_size: 64,
            eta: 0.01,
            lambda: 1.0,
            chi: 0.0,
            cipher_max_iters: 29,
            avg_classes: 3.0,
            std_classes: 2.0,
            n_classes: 10,
            proto_dim: 16,
            hidden_dim: 64,
            seed: 1,
            he_seed: 2,
            mask_salt: 0,
            zero_min_policy: ZeroMinPolicy::default(),
            he_backend: HeBackend::Simulated,
            agg_mode: AggMode::Ppfpl,
            attack: AttackSpec::default(),
            dataset: DatasetSpec::default(),
            norm_tolerance: 1e-5,
            test_fraction: 0.2,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::Config("n_clients must be >= 1".into()));
        }
        if self.rounds == 0 || self.local_iters == 0 || self.batch_size == 0 {
            return Err(Error::Config("rounds, local_iters, batch_size must be >= 1".into()));
        }
        if self.eta <= 0.0 {
            return Err(Error::Config("eta must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(-1.0..1.0).contains(&self.chi) {
            return Err(Error::Config("chi must lie in [-1, 1)".into()));
        }
        if self.cipher_max_iters == 0 {
            return Err(Error::Config("cipher_max_iters must be >= 1".into()));
        }
        if !(1.0..=self.n_classes as f64).contains(&self.avg_classes) {
            return Err(Error::Config("avg_classes must lie in [1, n_classes]".into()));
        }
        if self.std_classes < 0.0 {
            return Err(Error::Config("std_classes must be non-negative".into()));
        }
        if self.n_classes < 2 || self.proto_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("model dimensions out of range".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
        }
        self.attack.validate()?;
        if let DatasetSpec::Blobs(spec) = &self.dataset {
            spec.validate()?;
            if spec.n_classes != self.n_classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes, config says {}",
                    spec.n_classes, self.n_classes
                )));
            }
        }
        Ok(())
    }

    fn mask_seed(&self) -> u64 {
        self.seed ^ self.mask_salt.rotate_left(32)
    }

    fn protocol_params(&self, round: u64) -> ProtocolParams {
        ProtocolParams {
            chi: self.chi,
            cipher_max_iters: self.cipher_max_iters,
            policy: self.zero_min_policy,
            norm_tolerance: self.norm_tolerance,
            mask_seed: self.mask_seed(),
            round,
        }
    }
}

/// Who owns which classes and which sample ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub client_classes: Vec<BTreeSet<usize>>,
    /// Sample indices of the pool per (client, class).
    pub shards: BTreeMap<(usize, usize), Vec<usize>>,
    /// Classes no client ended up owning after bounded retries.
    pub unowned: BTreeSet<usize>,
}

/// Class-space Non-IID partitioner: each client owns
/// `clamp(round(N(avg, std)), 1, |I|)` classes sampled uniformly, and each
/// class pool is split into near-equal contiguous shards among its owners.
pub fn partition_noniid(
    pool: &LabeledPool,
    n_clients: usize,
    avg: f64,
    std: f64,
    rng: &mut impl Rng,
) -> Result<PartitionPlan> {
    let n_classes = pool.n_classes;
    if avg > n_classes as f64 {
        return Err(Error::Config("avg exceeds class count".into()));
    }
    let normal = Normal::new(avg, std)
        .map_err(|_| Error::Config("invalid class-count distribution".into()))?;

    let mut client_classes: Vec<BTreeSet<usize>> = Vec::new();
    let mut unowned: BTreeSet<usize> = BTreeSet::new();
    for attempt in 0..64 {
        client_classes.clear();
        for _ in 0..n_clients {
            let draw: f64 = rng.sample(normal);
            let count = (crate::fmath::round(draw) as i64).clamp(1, n_classes as i64) as usize;
            let classes: BTreeSet<usize> = rand::seq::index::sample(rng, n_classes, count)
                .into_iter()
                .collect();
            client_classes.push(classes);
        }
        let covered: BTreeSet<usize> =
            client_classes.iter().flatten().copied().collect();
        unowned = (0..n_classes).filter(|c| !covered.contains(c)).collect();
        if unowned.is_empty() || attempt == 63 {
            break;
        }
    }

    // Pool indices per class, in pool order.
    let mut class_pools: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &label) in pool.labels.iter().enumerate() {
        class_pools.entry(label).or_default().push(i);
    }

    let mut shards: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for class in 0..n_classes {
        let owners: Vec<usize> = (0..n_clients)
            .filter(|&c| client_classes[c].contains(&class))
            .collect();
        if owners.is_empty() {
            continue;
        }
        let indices = class_pools.get(&class).cloned().unwrap_or_default();
        let base = indices.len() / owners.len();
        let extra = indices.len() % owners.len();
        let mut cursor = 0usize;
        for (rank, &client) in owners.iter().enumerate() {
            let take = base + usize::from(rank < extra);
            shards.insert((client, class), indices[cursor..cursor + take].to_vec());
            cursor += take;
        }
    }
    Ok(PartitionPlan {
        client_classes,
        shards,
        unowned,
    })
}

/// One participating organization.
#[derive(Debug, Clone)]
pub struct ClientHandle {
    pub id: usize,
    /// Clean training split; attacks derive poisoned views from it.
    pub train: LocalDataset,
    pub test: LocalDataset,
    pub params: ModelParams,
    pub malicious: bool,
}

/// Live state of a running federation.
pub struct Federation {
    pub config: ExperimentConfig,
    pub he: HeSim,
    pub clients: Vec<ClientHandle>,
    pub agg: AggregatorState,
    pub ver: VerifierState,
    clients_kp: KeyPair,
    /// The clients' decrypted view of the latest global prototypes.
    pub global_plain: GlobalPrototypeSet,
    pub metrics: MetricsLog,
}

impl Federation {
    pub fn malicious_set(&self) -> BTreeSet<usize> {
        self.clients
            .iter()
            .filter(|c| c.malicious)
            .map(|c| c.id)
            .collect()
    }
}

/// Build the federation: partition data, distribute identical initial
/// parameters, generate both keypairs, select the malicious set.
pub fn setup(config: &ExperimentConfig, pool: &LabeledPool) -> Result<Federation> {
    config.validate()?;
    if pool.is_empty() {
        return Err(Error::Config("sample pool is empty".into()));
    }
    if pool.n_classes != config.n_classes {
        return Err(Error::Config(format!(
            "pool has {} classes, config says {}",
            pool.n_classes, config.n_classes
        )));
    }
    let mut warnings: Vec<String> = Vec::new();
    if let Some(w) = config.attack.validate()? {
        warnings.push(w.into());
    }

    let mut part_rng = stream(config.seed, Domain::Partition, 0, 0);
    let plan = partition_noniid(
        pool,
        config.n_clients,
        config.avg_classes,
        config.std_classes,
        &mut part_rng,
    )?;
    if !plan.unowned.is_empty() {
        warnings.push(format!(
            "classes without any owner after retries: {:?}",
            plan.unowned
        ));
    }

    let mut init_rng = stream(config.seed, Domain::ModelInit, 0, 0);
    let w_init = init_model(
        pool.feature_dim(),
        config.hidden_dim,
        config.proto_dim,
        config.n_classes,
        &mut init_rng,
    );

    let mut mal_rng = stream(config.attack.seed, Domain::MaliciousSelect, 0, 0);
    let malicious = if config.attack.kind == AttackKind::None {
        BTreeSet::new()
    } else {
        threat::select_malicious(config.n_clients, config.attack.fraction, &mut mal_rng)
    };

    let mut clients = Vec::with_capacity(config.n_clients);
    for id in 0..config.n_clients {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &class in &plan.client_classes[id] {
            let Some(shard) = plan.shards.get(&(id, class)) else {
                continue;
            };
            let n = shard.len();
            let n_test = if n >= 2 {
                ((config.test_fraction * n as f64) as usize).max(1)
            } else {
                0
            };
            for (pos, &i) in shard.iter().enumerate() {
                let sample = (pool.features[i].clone(), pool.labels[i]);
                if pos < n - n_test {
                    train.push(sample);
                } else {
                    test.push(sample);
                }
            }
        }
        clients.push(ClientHandle {
            id,
            train: LocalDataset::new(train),
            test: LocalDataset::new(test),
            params: w_init.clone(),
            malicious: malicious.contains(&id),
        });
    }

    let mut he = HeSim::new(config.he_seed);
    let ver_kp = he.keygen(KeyRole::Verifier);
    let clients_kp = he.keygen(KeyRole::ClientsShared);
    let agg = AggregatorState::new(ver_kp.public(), clients_kp.public());
    let ver = VerifierState::new(ver_kp, clients_kp.public())?;

    let mut setup_transcript = RoundTranscript::new(0);
    for id in 0..config.n_clients {
        setup_transcript.log(
            Party::Aggregator,
            Party::Client(id),
            MessageKind::InitParams,
            None,
            Some(id),
            PayloadKind::PlainParams,
        );
    }

    let mut metrics = MetricsLog {
        n_clients: config.n_clients,
        rounds: config.rounds,
        proto_dim: config.proto_dim,
        warnings,
        ..MetricsLog::default()
    };
    metrics.transcripts.push(setup_transcript);

    Ok(Federation {
        config: config.clone(),
        he,
        clients,
        agg,
        ver,
        clients_kp,
        global_plain: GlobalPrototypeSet::empty(0, config.n_classes),
        metrics,
    })
}

/// The dataset a client trains on this round: its clean shard, or the
/// poisoned view its attack produces.
fn effective_train(fed: &Federation, client: usize, round: u64) -> Result<LocalDataset> {
    let handle = &fed.clients[client];
    if !handle.malicious {
        return Ok(handle.train.clone());
    }
    let spec = &fed.config.attack;
    let kind = match spec.kind {
        AttackKind::Dynamic => threat::dynamic_behavior(round),
        other => other,
    };
    match kind {
        AttackKind::Feature => {
            // Static attacks reuse the same stream every round, so the
            // poisoned data stays fixed across training.
            let idx = if spec.kind == AttackKind::Dynamic { round } else { 0 };
            let mut rng = stream(spec.seed, Domain::Poison, client as u64, idx);
            Ok(threat::poison_features(&handle.train, &mut rng))
        }
        AttackKind::Label => {
            let idx = if spec.kind == AttackKind::Dynamic { round } else { 1 };
            let mut rng = stream(spec.seed, Domain::Poison, client as u64, idx);
            threat::poison_labels(&handle.train, fed.config.n_classes, &mut rng)
        }
        AttackKind::None | AttackKind::Amplify => Ok(handle.train.clone()),
        AttackKind::Dynamic => unreachable!("resolved above"),
    }
}

/// Execute round `t`: local computation on every client, then the secure
/// aggregation pipeline of the configured mode, then distribution.
pub fn run_round(fed: &mut Federation, t: u64) -> Result<()> {
    let config = fed.config.clone();
    let mut transcript = RoundTranscript::new(t);
    let global_for_training = fed.global_plain.clone();
    let lambda_eff = if global_for_training.is_empty() {
        0.0
    } else {
        config.lambda
    };
    let opts = TrainOpts {
        eta: config.eta,
        lambda: config.lambda,
        local_iters: config.local_iters,
        batch_size: config.batch_size,
    };

    let mut plain_submissions: reference::PlainSubmissions = BTreeMap::new();

    // Step I: local computation.
    for id in 0..config.n_clients {
        let data = effective_train(fed, id, t)?;
        let mut train_rng = stream(config.seed, Domain::ClientTrain, id as u64, t);
        let params = proto::local_train(
            &fed.clients[id].params,
            &data,
            &global_for_training,
            &opts,
            &mut train_rng,
        )?;
        let loss = proto::total_loss(&params, &data, &global_for_training, lambda_eff)?;
        let accuracy = evaluate_accuracy(&params, &fed.clients[id].test)?;
        fed.metrics.round_client.push(RoundClientRecord {
            round: t,
            client: id,
            malicious: fed.clients[id].malicious,
            accuracy,
            loss,
        });

        let amplify = fed.clients[id].malicious && config.attack.kind == AttackKind::Amplify;
        let mut protos = match config.agg_mode {
            AggMode::MeanNoFilter => {
                // The unnormalized baseline submits raw prototype means.
                let classes: BTreeSet<usize> = data.classes().collect();
                let mut raw = compute_prototypes(&params, &data, &classes)?;
                for p in &mut raw {
                    p.round = t;
                    p.owner = id;
                }
                raw
            }
            _ => submit_prototypes(&params, &data, t, id)?,
        };
        if amplify {
            protos = threat::amplify_prototypes(&protos, config.attack.amplify_factor);
        }
        for p in &protos {
            fed.metrics.prototypes.push(ProtoRecord {
                round: t,
                client: id,
                class: p.class_id,
                malicious: fed.clients[id].malicious,
                vector: p.vector.clone(),
            });
        }
        match config.agg_mode {
            AggMode::Ppfpl => {
                let mut encrypted = BTreeMap::new();
                for p in &protos {
                    let c = fed.he.encrypt(&fed.agg.verifier_pk.clone(), &p.vector)?;
                    encrypted.insert(p.class_id, c);
                }
                submit_to_aggregator(&mut fed.agg, id, encrypted, &mut transcript);
            }
            AggMode::MeanNoFilter | AggMode::PlaintextReference => {
                plain_submissions.insert(
                    id,
                    protos.iter().map(|p| (p.class_id, p.vector.clone())).collect(),
                );
            }
        }
        fed.clients[id].params = params;
    }

    // Step II: aggregation.
    let mut by_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    match config.agg_mode {
        AggMode::Ppfpl => {
            let pp = config.protocol_params(t);
            let outcome = run_secure_aggregation(
                &mut fed.he,
                &mut fed.agg,
                &fed.ver,
                &pp,
                &mut transcript,
                &mut fed.metrics.decrypt_log,
            )
            .map_err(|e| match e {
                Error::ProtocolAbort(m) => Error::ProtocolAbort(format!("round {t}: {m}")),
                other => other,
            })?;
            let ids: Vec<usize> = (0..config.n_clients).collect();
            log_distribution(&fed.agg, &ids, &mut transcript);
            for (&class, cipher) in &outcome.global {
                let plain = fed.he.decrypt(&fed.clients_kp, cipher)?;
                by_class.insert(class, plain);
            }
            for &id in &ids {
                for _ in outcome.global.keys() {
                    fed.metrics
                        .decrypt_log
                        .record(t, Party::Client(id), KeyRole::ClientsShared);
                }
            }
            record_class_outcomes(
                &mut fed.metrics,
                t,
                &outcome.sums,
                &outcome.trusted_norms,
                &outcome.weights,
            );
            fed.metrics.round_survivors.push(RoundSurvivors {
                round: t,
                survivors: outcome.survivors,
            });
            fed.metrics.warnings.extend(outcome.warnings);
        }
        AggMode::MeanNoFilter => {
            by_class = reference::plain_mean(&plain_submissions);
            let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
            let mut weights: Vec<agg::AggregationWeight> = Vec::new();
            for (&client, protos) in &plain_submissions {
                for &class in protos.keys() {
                    *sums.entry(class).or_insert(0.0) += 1.0;
                    weights.push(agg::AggregationWeight {
                        client,
                        class,
                        value: 1.0,
                        filtered: false,
                    });
                }
            }
            record_class_outcomes(&mut fed.metrics, t, &sums, &BTreeMap::new(), &weights);
            fed.metrics.round_survivors.push(RoundSurvivors {
                round: t,
                survivors: (0..config.n_clients).collect(),
            });
        }
        AggMode::PlaintextReference => {
            let pp = config.protocol_params(t);
            let out = reference::reference_secure_aggregation(
                &plain_submissions,
                &fed.global_plain.by_class,
                &pp,
            )?;
            by_class = out.global;
            record_class_outcomes(&mut fed.metrics, t, &out.sums, &out.trusted_norms, &out.weights);
            fed.metrics.round_survivors.push(RoundSurvivors {
                round: t,
                survivors: out.survivors,
            });
            fed.metrics.warnings.extend(out.warnings);
        }
    }

    for (&class, vector) in &by_class {
        fed.metrics.globals.push(GlobalRecord {
            round: t,
            class,
            vector: vector.clone(),
        });
    }
    fed.global_plain = GlobalPrototypeSet {
        round: t,
        n_classes: config.n_classes,
        by_class,
    };
    fed.metrics.transcripts.push(transcript);
    Ok(())
}

fn record_class_outcomes(
    metrics: &mut MetricsLog,
    round: u64,
    sums: &BTreeMap<usize, f64>,
    trusted_norms: &BTreeMap<usize, f64>,
    weights: &[agg::AggregationWeight],
) {
    let classes: BTreeSet<usize> = sums.keys().copied().collect();
    for class in classes {
        let entries: Vec<WeightEntry> = weights
            .iter()
            .filter(|w| w.class == class)
            .map(|w| WeightEntry {
                client: w.client,
                weight: w.value,
                filtered: w.filtered,
            })
            .collect();
        metrics.round_class.push(RoundClassRecord {
            round,
            class,
            sum: sums[&class],
            trusted_norm: trusted_norms.get(&class).copied(),
            weights: entries,
        });
    }
}

/// Run all configured rounds on an externally supplied pool.
pub fn run_experiment_on(config: &ExperimentConfig, pool: &LabeledPool) -> Result<MetricsLog> {
    let mut fed = setup(config, pool)?;
    for t in 1..=config.rounds {
        run_round(&mut fed, t)?;
    }
    Ok(fed.metrics)
}

/// Run all configured rounds, generating the pool from the dataset spec.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsLog> {
    match &config.dataset {
        DatasetSpec::Blobs(spec) => run_experiment_on(config, &gen_blobs(spec)),
        DatasetSpec::External => Err(Error::Config(
            "external dataset must be resolved by the caller".into(),
        )),
    }
}
