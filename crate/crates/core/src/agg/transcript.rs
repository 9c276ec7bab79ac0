//! Round transcripts: an append-only log of every inter-party transfer,
//! carrying payload descriptors rather than payloads. This is the audit
//! surface for the protocol's privacy claims.

use alloc::vec::Vec;
use core::fmt;

use crate::hesim::KeyRole;

/// A protocol participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Party {
    Client(usize),
    Aggregator,
    Verifier,
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Client(id) => write!(f, "client:{id}"),
            Party::Aggregator => write!(f, "aggregator"),
            Party::Verifier => write!(f, "verifier"),
        }
    }
}

/// Shape of a transferred payload, without its contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum PayloadKind {
    CipherVector { key: KeyRole, dim: usize },
    CipherScalar { key: KeyRole },
    PlainScalar,
    PlainVector { dim: usize },
    ClientSet { n: usize },
    PlainParams,
}

/// Protocol step a message belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MessageKind {
    /// Aggregator hands out the initial model parameters.
    InitParams,
    /// Client submits an encrypted normalized prototype.
    SubmitPrototype,
    /// Aggregator sends a squared-norm inner product for verification.
    NormCheckInner,
    /// Verifier returns the surviving client set.
    SurvivorSet,
    /// Aggregator sends the trusted prototype's squared-norm inner product.
    TrustedNormInner,
    /// Verifier returns the trusted prototype norm in plaintext.
    TrustedNormValue,
    /// Aggregator sends a blinded comparison result (`p * h`).
    MaskedWeight,
    /// Aggregator sends a masked prototype (`V ⊙ c̃`).
    MaskedPrototype,
    /// Verifier returns a re-encrypted aggregation weight.
    WeightReturn,
    /// Verifier returns a re-encrypted masked prototype.
    MaskedPrototypeReturn,
    /// Verifier returns the per-class weight sum in plaintext.
    SumValue,
    /// Aggregator distributes an encrypted global prototype.
    GlobalPrototype,
}

/// One inter-party transfer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TranscriptMessage {
    pub seq: usize,
    pub round: u64,
    pub sender: Party,
    pub receiver: Party,
    pub kind: MessageKind,
    pub class: Option<usize>,
    pub client: Option<usize>,
    pub payload: PayloadKind,
}

/// Ordered log of every message sent in one round.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundTranscript {
    pub round: u64,
    pub messages: Vec<TranscriptMessage>,
}

impl RoundTranscript {
    pub fn new(round: u64) -> Self {
        RoundTranscript {
            round,
            messages: Vec::new(),
        }
    }

    pub fn log(
        &mut self,
        sender: Party,
        receiver: Party,
        kind: MessageKind,
        class: Option<usize>,
        client: Option<usize>,
        payload: PayloadKind,
    ) {
        let seq = self.messages.len();
        self.messages.push(TranscriptMessage {
            seq,
            round: self.round,
            sender,
            receiver,
            kind,
            class,
            client,
            payload,
        });
    }

    /// The verifier must only ever receive squared-norm inner products,
    /// blinded `p * h` scalars and masked `V ⊙ c̃` vectors.
    pub fn verifier_received_allowed(&self) -> bool {
        self.messages
            .iter()
            .filter(|m| m.receiver == Party::Verifier)
            .all(|m| {
                matches!(
                    m.kind,
                    MessageKind::NormCheckInner
                        | MessageKind::TrustedNormInner
                        | MessageKind::MaskedWeight
                        | MessageKind::MaskedPrototype
                )
            })
    }

    /// Plaintext reaching the aggregator is limited to the trusted-prototype
    /// norm, per-class weight sums and the surviving client set.
    pub fn aggregator_received_allowed(&self) -> bool {
        self.messages
            .iter()
            .filter(|m| m.receiver == Party::Aggregator)
            .all(|m| match m.payload {
                PayloadKind::PlainScalar | PayloadKind::PlainVector { .. } => matches!(
                    m.kind,
                    MessageKind::TrustedNormValue | MessageKind::SumValue
                ),
                PayloadKind::ClientSet { .. } => m.kind == MessageKind::SurvivorSet,
                PayloadKind::CipherVector { key, .. } => key == KeyRole::ClientsShared || key == KeyRole::Verifier,
                PayloadKind::CipherScalar { .. } | PayloadKind::PlainParams => true,
            })
    }
}

/// Which key a party used to decrypt, recorded at every decryption site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DecryptEvent {
    pub round: u64,
    pub party: Party,
    pub key: KeyRole,
}

/// Append-only log of decryption invocations across a run.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DecryptLog {
    pub events: Vec<DecryptEvent>,
}

impl DecryptLog {
    pub fn record(&mut self, round: u64, party: Party, key: KeyRole) {
        self.events.push(DecryptEvent { round, party, key });
    }

    /// Key hygiene: the verifier key is used only by the verifier, the
    /// clients' shared key only by clients. The aggregator never decrypts.
    pub fn key_hygiene_holds(&self) -> bool {
        self.events.iter().all(|e| match e.key {
            KeyRole::Verifier => e.party == Party::Verifier,
            KeyRole::ClientsShared => matches!(e.party, Party::Client(_)),
        }) && !self.events.iter().any(|e| e.party == Party::Aggregator)
    }
}
