//! Fixtures shared by the benchmarks.

use fas_core::crypto_he::DEFAULT_SCALE;
use fas_core::protocol::ClientState;
use fas_core::rng::SplitMix64;
use fas_core::{ClientKeys, ModelParams, NoiseConfig, SelectionMode, SelectionPolicy};

/// `n` weights uniform on `[-clip, clip]`.
pub fn random_params(n: usize, clip: f64, seed: u64) -> ModelParams {
    let mut rng = SplitMix64::new(seed);
    ModelParams {
        values: (0..n).map(|_| (rng.next_f64() * 2.0 - 1.0) * clip).collect(),
        shape: vec![("w".into(), vec![n])],
    }
}

pub fn client_state(client_id: u32, keys: &ClientKeys, enc_pct: f64, epsilon: f64) -> ClientState {
    let policy = SelectionPolicy::new(enc_pct, SelectionMode::SeededUniform, 7).expect("valid enc_pct");
    let noise = if epsilon.is_finite() { NoiseConfig::new(epsilon, 1.0).expect("valid noise") } else { NoiseConfig::disabled() };
    ClientState::new(client_id, keys.clone(), policy, noise, 1.0, DEFAULT_SCALE, 100 + client_id as u64)
        .expect("valid client state")
}
