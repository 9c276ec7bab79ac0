//! The two-server Byzantine-robust secure aggregation protocol, its message
//! transcript, and a plaintext reference pipeline implementing the same math.

mod protocol;
pub mod reference;
mod transcript;

pub use protocol::{
    aggregate_class, credibility, log_distribution, masked_weight_exchange, round6_micro,
    run_secure_aggregation, submit_to_aggregator, trusted_prototype, verify_normalization,
    AggregationWeight, AggregatorState, ClassExchange, ProtocolParams, RoundOutcome,
    VerifierState, ZeroMinPolicy,
};
pub use transcript::{
    DecryptEvent, DecryptLog, MessageKind, Party, PayloadKind, RoundTranscript, TranscriptMessage,
};
