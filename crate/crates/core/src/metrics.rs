//! The experiment log: everything a run produces, in memory. IO layers turn
//! this into CSV and JSON-lines files.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::agg::{DecryptLog, RoundTranscript};

/// Per-round, per-client result.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundClientRecord {
    pub round: u64,
    pub client: usize,
    pub malicious: bool,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WeightEntry {
    pub client: usize,
    pub weight: f64,
    pub filtered: bool,
}

/// Per-round, per-class aggregation summary.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundClassRecord {
    pub round: u64,
    pub class: usize,
    pub sum: f64,
    pub trusted_norm: Option<f64>,
    pub weights: Vec<WeightEntry>,
}

/// A client-submitted prototype as the client saw it before encryption.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProtoRecord {
    pub round: u64,
    pub client: usize,
    pub class: usize,
    pub malicious: bool,
    pub vector: Vec<f64>,
}

/// The decrypted global prototype distributed at the end of a round.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GlobalRecord {
    pub round: u64,
    pub class: usize,
    pub vector: Vec<f64>,
}

/// Clients that passed normalization verification in one round.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundSurvivors {
    pub round: u64,
    pub survivors: BTreeSet<usize>,
}

/// Full log of one experiment run.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsLog {
    pub n_clients: usize,
    pub rounds: u64,
    pub proto_dim: usize,
    pub round_client: Vec<RoundClientRecord>,
    pub round_class: Vec<RoundClassRecord>,
    pub prototypes: Vec<ProtoRecord>,
    pub globals: Vec<GlobalRecord>,
    pub round_survivors: Vec<RoundSurvivors>,
    pub transcripts: Vec<RoundTranscript>,
    pub decrypt_log: DecryptLog,
    pub warnings: Vec<String>,
}

impl MetricsLog {
    /// Mean accuracy over benign clients in one round.
    pub fn benign_mean_accuracy(&self, round: u64) -> Option<f64> {
        let accs: Vec<f64> = self
            .round_client
            .iter()
            .filter(|r| r.round == round && !r.malicious)
            .map(|r| r.accuracy)
            .collect();
        if accs.is_empty() {
            None
        } else {
            Some(accs.iter().sum::<f64>() / accs.len() as f64)
        }
    }

    /// Per-round benign mean accuracies, in round order.
    pub fn benign_accuracy_trace(&self) -> Vec<f64> {
        (1..=self.rounds)
            .filter_map(|t| self.benign_mean_accuracy(t))
            .collect()
    }

    /// Mean of the `k` highest per-round benign accuracies, the headline
    /// test-accuracy measure (robust to round-to-round fluctuation).
    pub fn top_k_benign_accuracy(&self, k: usize) -> f64 {
        let mut trace = self.benign_accuracy_trace();
        trace.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = k.min(trace.len()).max(1);
        trace[..k].iter().sum::<f64>() / k as f64
    }

    /// Training-loss sequence of one client over rounds.
    pub fn client_loss_trace(&self, client: usize) -> Vec<f64> {
        let mut rows: Vec<(u64, f64)> = self
            .round_client
            .iter()
            .filter(|r| r.client == client)
            .map(|r| (r.round, r.loss))
            .collect();
        rows.sort_by_key(|(t, _)| *t);
        rows.into_iter().map(|(_, l)| l).collect()
    }

    pub fn benign_clients(&self) -> BTreeSet<usize> {
        self.round_client
            .iter()
            .filter(|r| !r.malicious)
            .map(|r| r.client)
            .collect()
    }

    /// Clients whose weight was zeroed for (round, class).
    pub fn filtered_set(&self, round: u64, class: usize) -> BTreeSet<usize> {
        self.round_class
            .iter()
            .filter(|r| r.round == round && r.class == class)
            .flat_map(|r| r.weights.iter().filter(|w| w.filtered).map(|w| w.client))
            .collect()
    }
}
