//! Protection for the plaintext partition of a weight vector.
//!
//! Weights outside the encrypted index set are perturbed with Laplace noise,
//! encoded, padded to ciphertext width and bit-scrambled under a shared key.
//! Scrambling is obfuscation only: a keyed permutation of bit positions,
//! derived without looking at the payload.

use num_bigint::BigUint;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{fisher_yates, fnv1a64, SplitMix64};

pub const SCRAMBLE_KEY_LEN: usize = 32;

#[derive(Clone, PartialEq, Eq)]
pub struct ScrambleKey([u8; SCRAMBLE_KEY_LEN]);

impl ScrambleKey {
    pub fn new(bytes: [u8; SCRAMBLE_KEY_LEN]) -> Self {
        ScrambleKey(bytes)
    }

    /// Key bytes drawn from SplitMix64 (little-endian words).
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut bytes = [0u8; SCRAMBLE_KEY_LEN];
        for chunk in bytes.chunks_mut(8) {
            chunk.copy_from_slice(&rng.next().to_le_bytes());
        }
        ScrambleKey(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let raw = hex::decode(s).map_err(|e| Error::Parameter(format!("scramble key hex: {e}")))?;
        let bytes: [u8; SCRAMBLE_KEY_LEN] = raw
            .try_into()
            .map_err(|_| Error::Parameter(format!("scramble key must be {SCRAMBLE_KEY_LEN} bytes")))?;
        Ok(ScrambleKey(bytes))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn as_bytes(&self) -> &[u8; SCRAMBLE_KEY_LEN] {
        &self.0
    }
}

impl std::fmt::Debug for ScrambleKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ScrambleKey(..)")
    }
}

/// Laplace noise settings for one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Per-coordinate privacy budget; `f64::INFINITY` means no noise.
    pub epsilon_per_coord: f64,
    /// Weights are clipped to `[-clip_bound_c, clip_bound_c]` before noising.
    pub clip_bound_c: f64,
    pub enabled: bool,
}

impl NoiseConfig {
    pub fn new(epsilon_per_coord: f64, clip_bound_c: f64) -> Result<Self> {
        let cfg = NoiseConfig { epsilon_per_coord, clip_bound_c, enabled: true };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn disabled() -> Self {
        NoiseConfig { epsilon_per_coord: f64::INFINITY, clip_bound_c: 1.0, enabled: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.epsilon_per_coord.is_nan() || self.epsilon_per_coord <= 0.0 {
            return Err(Error::Parameter(format!(
                "epsilon must be positive, got {}",
                self.epsilon_per_coord
            )));
        }
        if !(self.clip_bound_c.is_finite() && self.clip_bound_c > 0.0) {
            return Err(Error::Parameter(format!(
                "clip bound must be positive and finite, got {}",
                self.clip_bound_c
            )));
        }
        Ok(())
    }

    /// `b = 2C / ε` (sensitivity of a coordinate clipped to `[-C, C]`).
    pub fn laplace_scale(&self) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        2.0 * self.clip_bound_c / self.epsilon_per_coord
    }
}

/// One Laplace(0, b) draw by inverse CDF.
pub fn sample_laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    // u in (-1/2, 1/2); reject the endpoint that would give ln(0).
    let u = loop {
        let u: f64 = rng.gen::<f64>() - 0.5;
        if u != -0.5 {
            break u;
        }
    };
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

pub fn add_laplace_noise<R: Rng + ?Sized>(x: f64, cfg: &NoiseConfig, rng: &mut R) -> Result<f64> {
    cfg.validate()?;
    if !cfg.enabled {
        return Ok(x);
    }
    Ok(x + sample_laplace(cfg.laplace_scale(), rng))
}

/// Outcome of an empirical likelihood-ratio check of the noise mechanism.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyCheck {
    /// Largest ratio of bin frequencies, taken in both directions.
    pub max_ratio: f64,
    /// Bins where both inputs had at least the minimum count.
    pub bins_used: usize,
}

/// Releases `x0` and `x1` `samples` times each through the noise mechanism,
/// bins the outputs on a grid of `bin_width`, and compares bin frequencies.
/// Bins with fewer than `min_count` hits for either input are skipped so
/// sampling error stays small next to the bound being checked.
pub fn empirical_privacy_ratio<R: Rng + ?Sized>(
    x0: f64,
    x1: f64,
    cfg: &NoiseConfig,
    samples: usize,
    bin_width: f64,
    min_count: u64,
    rng: &mut R,
) -> Result<PrivacyCheck> {
    cfg.validate()?;
    if !(bin_width > 0.0) || samples == 0 {
        return Err(Error::Parameter("need a positive bin width and at least one sample".into()));
    }
    let mut counts: std::collections::BTreeMap<i64, [u64; 2]> = std::collections::BTreeMap::new();
    for (k, x) in [x0, x1].into_iter().enumerate() {
        for _ in 0..samples {
            let y = add_laplace_noise(x, cfg, rng)?;
            counts.entry((y / bin_width).floor() as i64).or_default()[k] += 1;
        }
    }
    let mut check = PrivacyCheck { max_ratio: 0.0, bins_used: 0 };
    for [a, b] in counts.into_values() {
        if a < min_count || b < min_count {
            continue;
        }
        check.bins_used += 1;
        let r = a as f64 / b as f64;
        check.max_ratio = check.max_ratio.max(r).max(1.0 / r);
    }
    Ok(check)
}

/// A plaintext block padded to ciphertext width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObfuscatedBlock {
    pub payload: Vec<u8>,
    pub block_index: u64,
}

impl ObfuscatedBlock {
    /// Big-endian integer value of the payload.
    pub fn parse(&self) -> BigUint {
        BigUint::from_bytes_be(&self.payload)
    }
}

/// Big-endian, left-zero-padded encoding of `m` in exactly `width` bytes.
pub fn format_as_encrypted(m: &BigUint, width: usize, block_index: u64) -> Result<ObfuscatedBlock> {
    let raw = m.to_bytes_be();
    let raw: &[u8] = if raw == [0] { &[] } else { &raw };
    if raw.len() > width {
        return Err(Error::Overflow(format!(
            "value needs {} bytes, block width is {width}",
            raw.len()
        )));
    }
    let mut payload = vec![0u8; width];
    payload[width - raw.len()..].copy_from_slice(raw);
    Ok(ObfuscatedBlock { payload, block_index })
}

/// Keyed permutation of `[0, nbits)`.
///
/// Seed chain: FNV-1a-64(key ‖ block_index as 8 big-endian bytes) seeds
/// SplitMix64, which drives [`fisher_yates`] over the identity.
pub fn derive_permutation(key: &ScrambleKey, block_index: u64, nbits: usize) -> Vec<u32> {
    let mut seed_material = [0u8; SCRAMBLE_KEY_LEN + 8];
    seed_material[..SCRAMBLE_KEY_LEN].copy_from_slice(key.as_bytes());
    seed_material[SCRAMBLE_KEY_LEN..].copy_from_slice(&block_index.to_be_bytes());
    let mut rng = SplitMix64::new(fnv1a64(&seed_material));
    let mut perm: Vec<u32> = (0..nbits as u32).collect();
    fisher_yates(&mut perm, &mut rng);
    perm
}

// Bit i of a payload is bit (7 - i % 8) of byte i / 8 (MSB first).
#[inline]
fn get_bit(buf: &[u8], i: usize) -> bool {
    (buf[i >> 3] >> (7 - (i & 7))) & 1 == 1
}

#[inline]
fn set_bit(buf: &mut [u8], i: usize) {
    buf[i >> 3] |= 0x80 >> (i & 7);
}

/// Output bit `i` is input bit `perm[i]`.
pub fn scramble(block: &ObfuscatedBlock, key: &ScrambleKey) -> ObfuscatedBlock {
    let perm = derive_permutation(key, block.block_index, 8 * block.payload.len());
    ObfuscatedBlock { payload: apply_forward(&block.payload, &perm), block_index: block.block_index }
}

/// Inverse of [`scramble`]: output bit `perm[i]` is input bit `i`.
pub fn unscramble(block: &ObfuscatedBlock, key: &ScrambleKey) -> ObfuscatedBlock {
    let perm = derive_permutation(key, block.block_index, 8 * block.payload.len());
    ObfuscatedBlock { payload: apply_inverse(&block.payload, &perm), block_index: block.block_index }
}

fn apply_forward(input: &[u8], perm: &[u32]) -> Vec<u8> {
    let mut out = vec![0u8; input.len()];
    for (i, &src) in perm.iter().enumerate() {
        if get_bit(input, src as usize) {
            set_bit(&mut out, i);
        }
    }
    out
}

fn apply_inverse(input: &[u8], perm: &[u32]) -> Vec<u8> {
    let mut out = vec![0u8; input.len()];
    for (i, &dst) in perm.iter().enumerate() {
        if get_bit(input, i) {
            set_bit(&mut out, dst as usize);
        }
    }
    out
}

/// Fraction of differing bits between two equal-length byte strings.
pub fn bit_distance(a: &[u8], b: &[u8]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: u32 = a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum();
    diff as f64 / (8 * a.len()) as f64
}
