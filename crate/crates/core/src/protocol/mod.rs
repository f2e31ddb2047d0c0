//! One FAS round: the client splits its weights into an encrypted set `S`
//! and a noised, scrambled remainder; the server aggregates both without the
//! private key; clients decrypt, unscramble and divide by the sample total.

pub mod session;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::crypto_he::{
    decrypt_small, he_add, he_scalar_mul, keygen, Ciphertext, ClientEncryptor, FixedPointCodec, PrivateKey,
    PublicKey,
};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::obfuscation::{
    add_laplace_noise, format_as_encrypted, scramble, unscramble, NoiseConfig, ObfuscatedBlock, ScrambleKey,
};
use crate::rng::{derive_seed, fisher_yates, SplitMix64};

const LABEL_HE_KEY: u64 = 0x4845;
const LABEL_SCRAMBLE_KEY: u64 = 0x5343;
const LABEL_ENCRYPTOR: u64 = 0x444a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// The first `num_enc` indices every round.
    Prefix,
    /// A seeded uniform draw of `num_enc` indices, fresh each round.
    SeededUniform,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix" => Ok(SelectionMode::Prefix),
            "seeded_uniform" | "uniform" => Ok(SelectionMode::SeededUniform),
            other => Err(Error::Parameter(format!("unknown selection mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub enc_pct: f64,
    pub mode: SelectionMode,
    pub selection_seed: u64,
}

impl SelectionPolicy {
    pub fn new(enc_pct: f64, mode: SelectionMode, selection_seed: u64) -> Result<Self> {
        if !(0.0..=100.0).contains(&enc_pct) {
            return Err(Error::Parameter(format!("enc_pct must be in [0, 100], got {enc_pct}")));
        }
        Ok(SelectionPolicy { enc_pct, mode, selection_seed })
    }

    /// `floor(enc_pct / 100 * n)`.
    pub fn num_enc(&self, n: usize) -> usize {
        ((self.enc_pct * n as f64) / 100.0).floor() as usize
    }

    /// The encrypted index set `S` for a round, ascending.
    pub fn select(&self, round: u32, n: usize) -> Vec<usize> {
        let k = self.num_enc(n);
        match self.mode {
            SelectionMode::Prefix => (0..k).collect(),
            SelectionMode::SeededUniform => {
                let mut idx: Vec<usize> = (0..n).collect();
                let mut rng = SplitMix64::new(derive_seed(self.selection_seed, &[u64::from(round), n as u64]));
                fisher_yates(&mut idx, &mut rng);
                let mut s = idx[..k].to_vec();
                s.sort_unstable();
                s
            }
        }
    }

    /// `mask[i]` is true when index `i` is in `S`.
    pub fn mask(&self, round: u32, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for i in self.select(round, n) {
            m[i] = true;
        }
        m
    }
}

/// Client-to-server message of one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundUpdate {
    pub round: u32,
    pub client_id: u32,
    pub sample_count: u64,
    pub num_enc: u32,
    /// Ciphertexts for the indices of `S`, ascending.
    pub enc_part: Vec<Ciphertext>,
    /// Scrambled blocks for the remaining indices, ascending.
    pub obf_part: Vec<ObfuscatedBlock>,
}

/// Server-to-client message of one round: weighted sums, not yet divided.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregateResult {
    pub round: u32,
    pub total_samples: u64,
    pub enc_part: Vec<Ciphertext>,
    pub obf_part: Vec<ObfuscatedBlock>,
}

/// Serialized blocks in global index order, as they travel on the wire.
pub fn interleave(enc: &[Ciphertext], obf: &[ObfuscatedBlock], mask: &[bool]) -> Result<Vec<Vec<u8>>> {
    let num_enc = mask.iter().filter(|&&m| m).count();
    if enc.len() != num_enc || obf.len() != mask.len() - num_enc {
        return Err(Error::Protocol(format!(
            "partition sizes {}+{} do not match selection {}+{}",
            enc.len(),
            obf.len(),
            num_enc,
            mask.len() - num_enc
        )));
    }
    let (mut e, mut o) = (enc.iter(), obf.iter());
    Ok(mask
        .iter()
        .map(|&m| if m { e.next().expect("counted").to_bytes() } else { o.next().expect("counted").payload.clone() })
        .collect())
}

/// Inverse of [`interleave`]; every block must be exactly one ciphertext wide.
pub fn split_blocks(
    pk: &PublicKey,
    blocks: Vec<Vec<u8>>,
    mask: &[bool],
) -> Result<(Vec<Ciphertext>, Vec<ObfuscatedBlock>)> {
    if blocks.len() != mask.len() {
        return Err(Error::Protocol(format!("{} blocks for {} weights", blocks.len(), mask.len())));
    }
    let mut enc = Vec::new();
    let mut obf = Vec::new();
    for (i, (b, &m)) in blocks.into_iter().zip(mask).enumerate() {
        if b.len() != pk.byte_width() {
            return Err(Error::Protocol(format!(
                "block {i} is {} bytes, expected {}",
                b.len(),
                pk.byte_width()
            )));
        }
        if m {
            enc.push(Ciphertext::from_bytes(pk, &b).map_err(|e| Error::Protocol(format!("block {i}: {e}")))?);
        } else {
            obf.push(ObfuscatedBlock { payload: b, block_index: i as u64 });
        }
    }
    Ok((enc, obf))
}

/// Key material every client holds. All clients of a session share it.
#[derive(Clone)]
pub struct ClientKeys {
    pub pk: PublicKey,
    pub sk: PrivateKey,
    pub scramble: ScrambleKey,
    pub encryptor: Arc<ClientEncryptor>,
}

impl ClientKeys {
    /// Deterministic from the session seed.
    pub fn derive(key_bits: usize, seed: u64) -> Result<Self> {
        let (pk, sk) = keygen(key_bits, derive_seed(seed, &[LABEL_HE_KEY]))?;
        let scramble = ScrambleKey::from_seed(derive_seed(seed, &[LABEL_SCRAMBLE_KEY]));
        let mut rng = StdRng::seed_from_u64(derive_seed(seed, &[LABEL_ENCRYPTOR]));
        let encryptor = Arc::new(ClientEncryptor::new(&pk, &sk, &mut rng)?);
        Ok(ClientKeys { pk, sk, scramble, encryptor })
    }

    /// The part of the key material the server may see.
    pub fn server_view(&self) -> ServerKeys {
        ServerKeys { pk: self.pk.clone(), scramble: self.scramble.clone() }
    }
}

/// Server key material: the public key and the scramble key, nothing else.
#[derive(Debug, Clone)]
pub struct ServerKeys {
    pub pk: PublicKey,
    pub scramble: ScrambleKey,
}

impl ServerKeys {
    /// Runs the same derivation as [`ClientKeys::derive`] and discards the
    /// private half.
    pub fn derive(key_bits: usize, seed: u64) -> Result<Self> {
        let (pk, _) = keygen(key_bits, derive_seed(seed, &[LABEL_HE_KEY]))?;
        let scramble = ScrambleKey::from_seed(derive_seed(seed, &[LABEL_SCRAMBLE_KEY]));
        Ok(ServerKeys { pk, scramble })
    }
}

/// Wall-clock split of the last `client_prepare_update` call.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PrepareTimings {
    pub encrypt: Duration,
    pub obfuscate: Duration,
}

pub struct ClientState {
    pub client_id: u32,
    keys: ClientKeys,
    codec: FixedPointCodec,
    pub policy: SelectionPolicy,
    pub noise: NoiseConfig,
    pub clip: f64,
    /// Off only for diagnostics: blocks then go out as plain padded values
    /// and the server cannot read them back correctly.
    pub scramble: bool,
    rng: StdRng,
    pub last_timings: PrepareTimings,
}

impl ClientState {
    pub fn new(
        client_id: u32,
        keys: ClientKeys,
        policy: SelectionPolicy,
        noise: NoiseConfig,
        clip: f64,
        scale: u64,
        rng_seed: u64,
    ) -> Result<Self> {
        noise.validate()?;
        if !(clip.is_finite() && clip > 0.0) {
            return Err(Error::Parameter(format!("clip bound must be positive, got {clip}")));
        }
        let codec = FixedPointCodec::new(keys.pk.n().clone(), scale)?;
        Ok(ClientState {
            client_id,
            keys,
            codec,
            policy,
            noise,
            clip,
            scramble: true,
            rng: StdRng::seed_from_u64(rng_seed),
            last_timings: PrepareTimings::default(),
        })
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.pk
    }

    pub fn keys(&self) -> &ClientKeys {
        &self.keys
    }

    pub fn codec(&self) -> &FixedPointCodec {
        &self.codec
    }
}

/// Aggregator state. Holds no private key, so it cannot decrypt.
pub struct ServerState {
    keys: ServerKeys,
    codec: FixedPointCodec,
    pub policy: SelectionPolicy,
    pub n_params: usize,
    pub round: u32,
    pending: BTreeMap<u32, RoundUpdate>,
}

impl ServerState {
    pub fn new(keys: ServerKeys, policy: SelectionPolicy, n_params: usize, scale: u64) -> Result<Self> {
        let codec = FixedPointCodec::new(keys.pk.n().clone(), scale)?;
        Ok(ServerState { keys, codec, policy, n_params, round: 0, pending: BTreeMap::new() })
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.pk
    }

    pub fn scramble_key(&self) -> &ScrambleKey {
        &self.keys.scramble
    }

    pub fn codec(&self) -> &FixedPointCodec {
        &self.codec
    }

    /// Queues an update for the current round.
    pub fn submit(&mut self, update: RoundUpdate) -> Result<()> {
        if update.round != self.round {
            return Err(Error::Protocol(format!(
                "update for round {} while collecting round {}",
                update.round, self.round
            )));
        }
        if self.pending.contains_key(&update.client_id) {
            return Err(Error::Protocol(format!("duplicate update from client {}", update.client_id)));
        }
        self.pending.insert(update.client_id, update);
        Ok(())
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn pending_clients(&self) -> Vec<u32> {
        self.pending.keys().copied().collect()
    }

    /// Aggregates the queued updates (in client-id order) and advances the round.
    pub fn close_round(&mut self) -> Result<AggregateResult> {
        let updates: Vec<RoundUpdate> = std::mem::take(&mut self.pending).into_values().collect();
        let agg = server_aggregate(self, &updates)?;
        self.round += 1;
        Ok(agg)
    }
}

fn check_clip(params: &ModelParams, clip: f64) -> Result<()> {
    if let Some((i, v)) = params.values.iter().enumerate().find(|(_, v)| !(v.abs() <= clip)) {
        return Err(Error::Precondition(format!("weight {i} = {v} outside [-{clip}, {clip}]")));
    }
    Ok(())
}

/// Client side of a round: encode and encrypt the weights in `S`; noise,
/// encode, pad and scramble the rest.
pub fn client_prepare_update(
    state: &mut ClientState,
    round: u32,
    params: &ModelParams,
    sample_count: u64,
) -> Result<RoundUpdate> {
    check_clip(params, state.clip)?;
    let n = params.values.len();
    let mask = state.policy.mask(round, n);
    let width = state.keys.pk.byte_width();

    let start = Instant::now();
    let mut enc_part = Vec::with_capacity(state.policy.num_enc(n));
    for (w, _) in params.values.iter().zip(&mask).filter(|(_, &m)| m) {
        let m = state.codec.encode(*w)?;
        enc_part.push(state.keys.encryptor.encrypt(&m, &mut state.rng)?);
    }
    let encrypt = start.elapsed();

    let start = Instant::now();
    let mut obf_part = Vec::with_capacity(n - enc_part.len());
    for (i, (w, _)) in params.values.iter().zip(&mask).enumerate().filter(|(_, (_, &m))| !m) {
        let noisy = add_laplace_noise(*w, &state.noise, &mut state.rng)?;
        let m = state.codec.encode(noisy)?;
        let block = format_as_encrypted(&m, width, i as u64)?;
        obf_part.push(if state.scramble { scramble(&block, &state.keys.scramble) } else { block });
    }
    let obfuscate = start.elapsed();

    state.last_timings = PrepareTimings { encrypt, obfuscate };
    Ok(RoundUpdate {
        round,
        client_id: state.client_id,
        sample_count,
        num_enc: enc_part.len() as u32,
        enc_part,
        obf_part,
    })
}

/// Server side of a round. Ciphertexts are combined homomorphically; the
/// obfuscated blocks are unscrambled, summed with sample-count weights as
/// reals, re-encoded and re-scrambled.
pub fn server_aggregate(state: &ServerState, updates: &[RoundUpdate]) -> Result<AggregateResult> {
    let first = updates.first().ok_or_else(|| Error::Protocol("no updates to aggregate".into()))?;
    let n = state.n_params;
    let num_enc = state.policy.num_enc(n);
    for u in updates {
        if u.round != state.round {
            return Err(Error::Protocol(format!("update for unknown round {} (expected {})", u.round, state.round)));
        }
        if u.num_enc != first.num_enc
            || u.num_enc as usize != num_enc
            || u.enc_part.len() != num_enc
            || u.obf_part.len() != n - num_enc
        {
            return Err(Error::Protocol(format!("client {} sent a mismatched partition", u.client_id)));
        }
        if u.sample_count == 0 {
            return Err(Error::Protocol(format!("client {} reported zero samples", u.client_id)));
        }
    }
    let total_samples: u64 = updates.iter().map(|u| u.sample_count).sum();
    let pk = &state.keys.pk;
    let counts: Vec<BigUint> = updates.iter().map(|u| BigUint::from(u.sample_count)).collect();

    let enc_part = parallel_map(num_enc, |j| {
        let mut acc: Option<Ciphertext> = None;
        for (u, k) in updates.iter().zip(&counts) {
            let term = he_scalar_mul(pk, &u.enc_part[j], k)?;
            acc = Some(match acc {
                None => term,
                Some(a) => he_add(pk, &a, &term)?,
            });
        }
        Ok(acc.expect("at least one update"))
    })?;

    let key = &state.keys.scramble;
    let codec = &state.codec;
    let obf_part = parallel_map(n - num_enc, |j| {
        let index = first.obf_part[j].block_index;
        let mut sum = 0.0;
        for u in updates {
            let block = &u.obf_part[j];
            if block.block_index != index {
                return Err(Error::Protocol(format!("client {} block order differs", u.client_id)));
            }
            sum += u.sample_count as f64 * codec.decode(&unscramble(block, key).parse());
        }
        let block = format_as_encrypted(&codec.encode(sum)?, pk.byte_width(), index)?;
        Ok(scramble(&block, key))
    })?;

    Ok(AggregateResult { round: state.round, total_samples, enc_part, obf_part })
}

/// Order-preserving map over `0..len`, split across the available cores.
fn parallel_map<T: Send, F>(len: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync,
{
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(len.max(1));
    if threads <= 1 {
        return (0..len).map(&f).collect();
    }
    let chunk = len.div_ceil(threads);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let f = &f;
                s.spawn(move || (t * chunk..((t + 1) * chunk).min(len)).map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("aggregation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(len);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Client side after aggregation: recover each weighted sum and divide by
/// the sample total, restoring the original index order.
pub fn client_apply_aggregate(
    state: &ClientState,
    agg: &AggregateResult,
    shape: &[(String, Vec<usize>)],
) -> Result<ModelParams> {
    let n = agg.enc_part.len() + agg.obf_part.len();
    let mask = state.policy.mask(agg.round, n);
    let num_enc = mask.iter().filter(|&&m| m).count();
    if agg.enc_part.len() != num_enc {
        return Err(Error::Protocol(format!(
            "aggregate has {} ciphertexts, selection has {num_enc}",
            agg.enc_part.len()
        )));
    }
    if agg.total_samples == 0 {
        return Err(Error::Protocol("aggregate reports zero samples".into()));
    }
    let total = agg.total_samples as f64;
    let (pk, sk, key) = (&state.keys.pk, &state.keys.sk, &state.keys.scramble);
    let mut enc = agg.enc_part.iter();
    let mut obf = agg.obf_part.iter();
    let mut values = Vec::with_capacity(n);
    for &m in &mask {
        let sum = if m {
            let c = enc.next().expect("counted");
            state.codec.decode(&decrypt_small(sk, pk, c)?)
        } else {
            let b = obf.next().expect("counted");
            state.codec.decode(&unscramble(b, key).parse())
        };
        values.push(sum / total);
    }
    Ok(ModelParams { values, shape: shape.to_vec() })
}

/// Plaintext FedAvg: coordinate-wise `Σ n_k w_k / Σ n_k`.
pub fn fedavg_plain(weights: &[Vec<f64>], sample_counts: &[u64]) -> Result<Vec<f64>> {
    let first = weights.first().ok_or_else(|| Error::Parameter("no weight vectors".into()))?;
    if weights.len() != sample_counts.len() {
        return Err(Error::Parameter("one sample count per weight vector required".into()));
    }
    if weights.iter().any(|w| w.len() != first.len()) {
        return Err(Error::Parameter("weight vectors differ in length".into()));
    }
    if sample_counts.contains(&0) {
        return Err(Error::Parameter("sample counts must be at least 1".into()));
    }
    let total: f64 = sample_counts.iter().map(|&c| c as f64).sum();
    Ok((0..first.len())
        .map(|j| weights.iter().zip(sample_counts).map(|(w, &c)| c as f64 * w[j]).sum::<f64>() / total)
        .collect())
}
