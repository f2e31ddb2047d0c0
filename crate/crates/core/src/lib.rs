//! Federated averaging with selective encryption: a fraction of the weights
//! travels as Paillier ciphertexts, the rest as Laplace-noised, bit-scrambled
//! fixed-point blocks of the same width.

pub mod attack_metrics;
pub mod crypto_he;
pub mod error;
pub mod model;
pub mod obfuscation;
pub mod protocol;
pub mod rng;
pub mod transport;

pub use crypto_he::{Ciphertext, FixedPointCodec, PrivateKey, PublicKey};
pub use error::{Error, Result};
pub use model::{Architecture, ModelParams, SyntheticDataset};
pub use obfuscation::{NoiseConfig, ObfuscatedBlock, ScrambleKey};
pub use protocol::session::{run_session, Channel, SessionConfig, SessionReport};
pub use protocol::{AggregateResult, ClientKeys, RoundUpdate, SelectionMode, SelectionPolicy, ServerKeys};
