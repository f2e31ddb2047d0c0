use std::cell::Cell;
use std::fmt;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;

use super::prime::gen_prime;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Smallest modulus size `keygen` accepts.
pub const MIN_KEY_BITS: usize = 16;

pub const DEFAULT_KEY_BITS: usize = 2048;

thread_local! {
    static DECRYPTIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of `decrypt`/`decrypt_small` calls made on the current thread.
/// Lets tests assert that a code path never decrypts.
pub fn decryptions_on_this_thread() -> u64 {
    DECRYPTIONS.with(Cell::get)
}

fn count_decryption() {
    DECRYPTIONS.with(|d| d.set(d.get() + 1));
}

#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    g: BigUint,
    n_sq: BigUint,
    byte_width: usize,
}

impl PublicKey {
    pub fn new(n: BigUint) -> Result<Self> {
        if n < BigUint::from(6u32) {
            return Err(Error::Parameter(format!("modulus {n} too small")));
        }
        let n_sq = &n * &n;
        let byte_width = (n_sq.bits() as usize).div_ceil(8);
        Ok(PublicKey { g: &n + 1u32, n, n_sq, byte_width })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn n_sq(&self) -> &BigUint {
        &self.n_sq
    }

    /// Serialized ciphertext width in bytes.
    pub fn byte_width(&self) -> usize {
        self.byte_width
    }

    pub fn bits(&self) -> usize {
        self.n.bits() as usize
    }

    pub fn to_hex(&self) -> String {
        self.n.to_str_radix(16)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let n = BigUint::parse_bytes(s.as_bytes(), 16)
            .ok_or_else(|| Error::Parameter("public key is not hex".into()))?;
        PublicKey::new(n)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({} bits)", self.n.bits())
    }
}

/// Paillier secret key. Keeps the factors so decryption can run per prime.
#[derive(Clone)]
pub struct PrivateKey {
    lambda: BigUint,
    mu: BigUint,
    n: BigUint,
    p: BigUint,
    q: BigUint,
    p_sq: BigUint,
    q_sq: BigUint,
    p_minus_1: BigUint,
    q_minus_1: BigUint,
    hp: BigUint,
    hq: BigUint,
    q_inv_p: BigUint,
}

impl PrivateKey {
    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    fn residues_nonzero(&self, c: &BigUint) -> Result<()> {
        if (c % &self.p).is_zero() || (c % &self.q).is_zero() {
            return Err(Error::Corruption("ciphertext shares a factor with n".into()));
        }
        Ok(())
    }

    /// `L_p(c^(p-1) mod p^2) * hp mod p`, i.e. the plaintext mod p.
    fn half_decrypt(c: &BigUint, prime: &BigUint, prime_sq: &BigUint, exp: &BigUint, h: &BigUint) -> BigUint {
        let u = (c % prime_sq).modpow(exp, prime_sq);
        let l = (u - 1u32) / prime;
        (l * h) % prime
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrivateKey({} bits, redacted)", self.n.bits())
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Ciphertext {
    value: BigUint,
    byte_width: usize,
}

impl Ciphertext {
    /// Wraps a raw value, checking it against the key's range.
    pub fn new(pk: &PublicKey, value: BigUint) -> Result<Self> {
        if value >= pk.n_sq {
            return Err(Error::Range("ciphertext value not below n^2".into()));
        }
        Ok(Ciphertext { value, byte_width: pk.byte_width })
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn byte_width(&self) -> usize {
        self.byte_width
    }

    /// Big-endian, left-zero-padded to `byte_width`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let raw = self.value.to_bytes_be();
        let mut out = vec![0u8; self.byte_width];
        out[self.byte_width - raw.len()..].copy_from_slice(&raw);
        out
    }

    pub fn from_bytes(pk: &PublicKey, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != pk.byte_width {
            return Err(Error::KeyMismatch(format!(
                "ciphertext is {} bytes, key expects {}",
                bytes.len(),
                pk.byte_width
            )));
        }
        Ciphertext::new(pk, BigUint::from_bytes_be(bytes))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(pk: &PublicKey, s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Parameter(format!("ciphertext hex: {e}")))?;
        Ciphertext::from_bytes(pk, &bytes)
    }
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hex = self.to_hex();
        write!(f, "Ciphertext({}..)", &hex[..hex.len().min(16)])
    }
}

/// Builds a key pair from two distinct primes. Used directly for toy keys.
pub fn keypair_from_primes(p: &BigUint, q: &BigUint) -> Result<(PublicKey, PrivateKey)> {
    if p == q {
        return Err(Error::Parameter("p and q must be distinct".into()));
    }
    let n = p * q;
    let p1 = p - 1u32;
    let q1 = q - 1u32;
    if !n.gcd(&(&p1 * &q1)).is_one() {
        return Err(Error::Parameter("gcd(pq, (p-1)(q-1)) != 1".into()));
    }
    let pk = PublicKey::new(n.clone())?;
    let lambda = p1.lcm(&q1);
    // With g = n + 1, L(g^lambda mod n^2) = lambda mod n.
    let mu = (&lambda % &n)
        .modinv(&n)
        .ok_or_else(|| Error::Parameter("lambda not invertible mod n".into()))?;
    // hp = L_p(g^(p-1) mod p^2)^-1 mod p = (-q)^-1 mod p, since g^(p-1) = 1 + (p-1)n mod p^2.
    let hp = (p - (q % p)).modinv(p).ok_or_else(|| Error::Parameter("q not invertible mod p".into()))?;
    let hq = (q - (p % q)).modinv(q).ok_or_else(|| Error::Parameter("p not invertible mod q".into()))?;
    let q_inv_p = q.modinv(p).ok_or_else(|| Error::Parameter("q not invertible mod p".into()))?;
    let sk = PrivateKey {
        lambda,
        mu,
        n,
        p: p.clone(),
        q: q.clone(),
        p_sq: p * p,
        q_sq: q * q,
        p_minus_1: p1,
        q_minus_1: q1,
        hp,
        hq,
        q_inv_p,
    };
    Ok((pk, sk))
}

/// Deterministic key generation: SplitMix64 seeded with `seed` drives the
/// prime search for `p` and then `q`.
pub fn keygen(bit_length: usize, seed: u64) -> Result<(PublicKey, PrivateKey)> {
    if bit_length < MIN_KEY_BITS || bit_length % 2 != 0 {
        return Err(Error::Parameter(format!(
            "key size {bit_length} must be even and at least {MIN_KEY_BITS}"
        )));
    }
    let half = bit_length / 2;
    let mut rng = SplitMix64::new(seed);
    let p = gen_prime(half, &mut rng);
    // Bounded so a degenerate size fails rather than spins.
    for _ in 0..1000 {
        let q = gen_prime(half, &mut rng);
        if q == p {
            continue;
        }
        if let Ok(pair) = keypair_from_primes(&p, &q) {
            return Ok(pair);
        }
    }
    Err(Error::Parameter(format!("no valid prime pair found for {bit_length} bits")))
}

fn check_plaintext(pk: &PublicKey, m: &BigUint) -> Result<()> {
    if m >= &pk.n {
        return Err(Error::Range("plaintext not below n".into()));
    }
    Ok(())
}

/// `g^m mod n^2` for g = n + 1, which is `1 + m*n`.
fn g_pow(pk: &PublicKey, m: &BigUint) -> BigUint {
    (m * &pk.n + 1u32) % &pk.n_sq
}

/// `c = g^m * r^n mod n^2` with caller-supplied `r`.
pub fn encrypt_with_randomness(pk: &PublicKey, m: &BigUint, r: &BigUint) -> Result<Ciphertext> {
    check_plaintext(pk, m)?;
    if r.is_zero() || r >= &pk.n || !r.gcd(&pk.n).is_one() {
        return Err(Error::Parameter("randomness must be a unit in [1, n)".into()));
    }
    let rn = r.modpow(&pk.n, &pk.n_sq);
    Ciphertext::new(pk, (g_pow(pk, m) * rn) % &pk.n_sq)
}

pub fn encrypt<R: RngCore + ?Sized>(pk: &PublicKey, m: &BigUint, rng: &mut R) -> Result<Ciphertext> {
    check_plaintext(pk, m)?;
    let one = BigUint::one();
    loop {
        let r = rng.gen_biguint_range(&one, &pk.n);
        if r.gcd(&pk.n).is_one() {
            return encrypt_with_randomness(pk, m, &r);
        }
    }
}

fn check_width(pk: &PublicKey, c: &Ciphertext) -> Result<()> {
    if c.byte_width != pk.byte_width {
        return Err(Error::KeyMismatch(format!(
            "ciphertext width {} does not match key width {}",
            c.byte_width, pk.byte_width
        )));
    }
    if c.value >= pk.n_sq {
        return Err(Error::Range("ciphertext value not below n^2".into()));
    }
    Ok(())
}

/// Full decryption, computed per prime and recombined.
pub fn decrypt(sk: &PrivateKey, pk: &PublicKey, c: &Ciphertext) -> Result<BigUint> {
    check_width(pk, c)?;
    if sk.n != pk.n {
        return Err(Error::KeyMismatch("private key does not belong to public key".into()));
    }
    count_decryption();
    sk.residues_nonzero(&c.value)?;
    let mp = PrivateKey::half_decrypt(&c.value, &sk.p, &sk.p_sq, &sk.p_minus_1, &sk.hp);
    let mq = PrivateKey::half_decrypt(&c.value, &sk.q, &sk.q_sq, &sk.q_minus_1, &sk.hq);
    // m = mq + q * ((mp - mq) * q^-1 mod p)
    let diff = (&mp + &sk.p - (&mq % &sk.p)) % &sk.p;
    Ok(&mq + &sk.q * ((diff * &sk.q_inv_p) % &sk.p))
}

/// Decryption for plaintexts known to be small in the signed sense,
/// `|m| < p/2` where negatives wrap as `n - |m|`. Only the `p` half is
/// exponentiated, so this costs about half of [`decrypt`]. Outside that
/// bound the result is wrong, not an error.
pub fn decrypt_small(sk: &PrivateKey, pk: &PublicKey, c: &Ciphertext) -> Result<BigUint> {
    check_width(pk, c)?;
    if sk.n != pk.n {
        return Err(Error::KeyMismatch("private key does not belong to public key".into()));
    }
    count_decryption();
    sk.residues_nonzero(&c.value)?;
    let mp = PrivateKey::half_decrypt(&c.value, &sk.p, &sk.p_sq, &sk.p_minus_1, &sk.hp);
    if (&mp << 1u32) < sk.p {
        Ok(mp)
    } else {
        Ok(&sk.n - (&sk.p - mp))
    }
}

/// `c1 * c2 mod n^2`; decrypts to `m1 + m2 mod n`.
pub fn he_add(pk: &PublicKey, c1: &Ciphertext, c2: &Ciphertext) -> Result<Ciphertext> {
    if c1.byte_width != c2.byte_width {
        return Err(Error::KeyMismatch(format!(
            "ciphertext widths differ: {} vs {}",
            c1.byte_width, c2.byte_width
        )));
    }
    check_width(pk, c1)?;
    check_width(pk, c2)?;
    Ok(Ciphertext { value: (&c1.value * &c2.value) % &pk.n_sq, byte_width: pk.byte_width })
}

/// `c^k mod n^2`; decrypts to `k * m mod n`.
pub fn he_scalar_mul(pk: &PublicKey, c: &Ciphertext, k: &BigUint) -> Result<Ciphertext> {
    check_width(pk, c)?;
    if k >= &pk.n {
        return Err(Error::Range("scalar not below n".into()));
    }
    Ok(Ciphertext { value: c.value.modpow(k, &pk.n_sq), byte_width: pk.byte_width })
}

/// Precomputed powers `base^(d * 256^i) mod modulus` for every byte digit `d`.
struct FixedBaseTable {
    modulus: BigUint,
    rows: Vec<Vec<BigUint>>,
}

impl FixedBaseTable {
    fn new(base: &BigUint, modulus: &BigUint, exp_bits: usize) -> Self {
        let windows = exp_bits.div_ceil(8);
        let mut rows = Vec::with_capacity(windows);
        let mut b = base % modulus;
        for _ in 0..windows {
            // row[d - 1] = b^d for d in 1..=255
            let mut row = Vec::with_capacity(255);
            let mut acc = b.clone();
            for _ in 1..=255 {
                row.push(acc.clone());
                acc = (&acc * &b) % modulus;
            }
            b = acc; // b^256
            rows.push(row);
        }
        FixedBaseTable { modulus: modulus.clone(), rows }
    }

    fn pow(&self, exp: &BigUint) -> BigUint {
        let mut acc = BigUint::one();
        for (i, &d) in exp.to_bytes_le().iter().enumerate() {
            if d != 0 {
                acc = (acc * &self.rows[i][d as usize - 1]) % &self.modulus;
            }
        }
        acc
    }
}

/// Key-holder encryption with short-exponent randomness.
///
/// Uses `r^n = (h^n)^a` for a fixed `h = -x^2 mod n` and a fresh exponent `a`
/// of `ceil(bits(n)/2)` bits (Damgård–Jurik–Nielsen). Both halves of the
/// exponentiation run mod `p^2` and `q^2` against fixed-base tables, so this
/// needs the private key. Ciphertexts are indistinguishable in form from
/// [`encrypt`] output and decrypt the same way.
pub struct ClientEncryptor {
    pk: PublicKey,
    exp_bits: usize,
    table_p: FixedBaseTable,
    table_q: FixedBaseTable,
    p_sq: BigUint,
    q_sq: BigUint,
    q_sq_inv_p_sq: BigUint,
}

impl ClientEncryptor {
    pub fn new<R: RngCore + ?Sized>(pk: &PublicKey, sk: &PrivateKey, rng: &mut R) -> Result<Self> {
        if sk.n != pk.n {
            return Err(Error::KeyMismatch("private key does not belong to public key".into()));
        }
        let one = BigUint::one();
        let x = loop {
            let x = rng.gen_biguint_range(&one, &pk.n);
            if x.gcd(&pk.n).is_one() {
                break x;
            }
        };
        let h = &pk.n - (&x * &x) % &pk.n;
        let h_n = h.modpow(&pk.n, &pk.n_sq);
        let exp_bits = (pk.n.bits() as usize).div_ceil(2);
        let q_sq_inv_p_sq = sk
            .q_sq
            .modinv(&sk.p_sq)
            .ok_or_else(|| Error::Parameter("q^2 not invertible mod p^2".into()))?;
        Ok(ClientEncryptor {
            pk: pk.clone(),
            exp_bits,
            table_p: FixedBaseTable::new(&h_n, &sk.p_sq, exp_bits),
            table_q: FixedBaseTable::new(&h_n, &sk.q_sq, exp_bits),
            p_sq: sk.p_sq.clone(),
            q_sq: sk.q_sq.clone(),
            q_sq_inv_p_sq,
        })
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.pk
    }

    pub fn encrypt<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext> {
        check_plaintext(&self.pk, m)?;
        let a = rng.gen_biguint(self.exp_bits as u64);
        let gm = g_pow(&self.pk, m);
        let cp = (&gm % &self.p_sq) * self.table_p.pow(&a) % &self.p_sq;
        let cq = (&gm % &self.q_sq) * self.table_q.pow(&a) % &self.q_sq;
        // CRT over p^2, q^2.
        let diff = (&cp + &self.p_sq - (&cq % &self.p_sq)) % &self.p_sq;
        let c = &cq + &self.q_sq * ((diff * &self.q_sq_inv_p_sq) % &self.p_sq);
        Ciphertext::new(&self.pk, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn toy() -> (PublicKey, PrivateKey) {
        keypair_from_primes(&BigUint::from(5u32), &BigUint::from(7u32)).unwrap()
    }

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    /// Textbook `L(c^lambda mod n^2) * mu mod n`, kept separate from the
    /// per-prime route used by `decrypt`.
    fn decrypt_textbook(sk: &PrivateKey, pk: &PublicKey, c: &Ciphertext) -> BigUint {
        let u = c.value().modpow(sk.lambda(), pk.n_sq());
        let l = (u - 1u32) / pk.n();
        (l * sk.mu()) % pk.n()
    }

    // Expected values below come from tests/oracles/paillier_toy.py.

    #[test]
    fn toy_key_fields() {
        let (pk, sk) = toy();
        assert_eq!(pk.n(), &big(35));
        assert_eq!(pk.g(), &big(36));
        assert_eq!(pk.n_sq(), &big(1225));
        assert_eq!(sk.lambda(), &big(12));
        assert_eq!(sk.mu(), &big(3));
        assert_eq!(pk.byte_width(), 2);
    }

    #[test]
    fn toy_encryptions_match_oracle() {
        let (pk, sk) = toy();
        let c = encrypt_with_randomness(&pk, &big(3), &big(2)).unwrap();
        assert_eq!(c.value(), &big(683));
        let c = encrypt_with_randomness(&pk, &big(0), &big(1)).unwrap();
        assert_eq!(c.value(), &big(1));
        assert_eq!(decrypt(&sk, &pk, &c).unwrap(), big(0));
        let c = encrypt_with_randomness(&pk, &big(17), &big(4)).unwrap();
        assert_eq!(c.value(), &big(779));
        assert_eq!(decrypt(&sk, &pk, &c).unwrap(), big(17));
    }

    #[test]
    fn toy_homomorphic_ops_match_oracle() {
        let (pk, sk) = toy();
        let a = encrypt_with_randomness(&pk, &big(2), &big(3)).unwrap();
        let b = encrypt_with_randomness(&pk, &big(3), &big(8)).unwrap();
        let s = he_add(&pk, &a, &b).unwrap();
        assert_eq!(s.value(), &big(649));
        assert_eq!(decrypt(&sk, &pk, &s).unwrap(), big(5));

        let c = encrypt_with_randomness(&pk, &big(2), &big(11)).unwrap();
        let t = he_scalar_mul(&pk, &c, &big(3)).unwrap();
        assert_eq!(t.value(), &big(211));
        assert_eq!(decrypt(&sk, &pk, &t).unwrap(), big(6));

        let mut acc = Ciphertext::new(&pk, BigUint::one()).unwrap();
        for r in [2u64, 3, 4, 6, 8, 9, 11, 12, 13, 16] {
            acc = he_add(&pk, &acc, &encrypt_with_randomness(&pk, &big(1), &big(r)).unwrap()).unwrap();
        }
        assert_eq!(acc.value(), &big(732));
        assert_eq!(decrypt(&sk, &pk, &acc).unwrap(), big(10));
    }

    #[test]
    fn toy_exhaustive_roundtrip_both_routes() {
        let (pk, sk) = toy();
        for m in 0..35u64 {
            for r in 1..35u64 {
                if r % 5 == 0 || r % 7 == 0 {
                    continue;
                }
                let c = encrypt_with_randomness(&pk, &big(m), &big(r)).unwrap();
                assert_eq!(decrypt(&sk, &pk, &c).unwrap(), big(m));
                assert_eq!(decrypt_textbook(&sk, &pk, &c), big(m));
            }
        }
    }

    #[test]
    fn scalar_identity_and_annihilation() {
        let (pk, sk) = keygen(64, 11).unwrap();
        let mut rng = StdRng::seed_from_u64(1);
        let c = encrypt(&pk, &big(12345), &mut rng).unwrap();
        let one = he_scalar_mul(&pk, &c, &BigUint::one()).unwrap();
        assert_eq!(decrypt(&sk, &pk, &one).unwrap(), big(12345));
        let zero = he_scalar_mul(&pk, &c, &BigUint::zero()).unwrap();
        assert_eq!(decrypt(&sk, &pk, &zero).unwrap(), big(0));
        let z = encrypt(&pk, &big(0), &mut rng).unwrap();
        assert_eq!(decrypt(&sk, &pk, &he_add(&pk, &c, &z).unwrap()).unwrap(), big(12345));
    }

    #[test]
    fn keygen_is_deterministic_and_sized() {
        let (a, _) = keygen(32, 1).unwrap();
        let (b, _) = keygen(32, 1).unwrap();
        assert_eq!(a, b);
        let (c, _) = keygen(32, 2).unwrap();
        assert_ne!(a, c);
        for bits in [16usize, 32, 128, 256] {
            let (pk, sk) = keygen(bits, 3).unwrap();
            assert_eq!(pk.bits(), bits);
            assert_ne!(sk.p(), sk.q());
            assert_eq!(sk.p().bits() as usize, bits / 2);
        }
    }

    #[test]
    fn keygen_rejects_bad_sizes() {
        assert!(matches!(keygen(14, 1), Err(Error::Parameter(_))));
        assert!(matches!(keygen(33, 1), Err(Error::Parameter(_))));
        assert!(keypair_from_primes(&big(7), &big(7)).is_err());
    }

    #[test]
    fn range_and_width_errors() {
        let (pk, sk) = toy();
        assert!(matches!(encrypt_with_randomness(&pk, &big(35), &big(2)), Err(Error::Range(_))));
        let (pk2, _) = keygen(32, 1).unwrap();
        let c = encrypt_with_randomness(&pk, &big(1), &big(2)).unwrap();
        let c2 = encrypt(&pk2, &big(1), &mut StdRng::seed_from_u64(0)).unwrap();
        assert!(matches!(he_add(&pk, &c, &c2), Err(Error::KeyMismatch(_))));
        assert!(matches!(he_scalar_mul(&pk, &c, &big(35)), Err(Error::Range(_))));
        // A value sharing a factor with n fails the consistency check.
        let bad = Ciphertext::new(&pk, big(10)).unwrap();
        assert!(matches!(decrypt(&sk, &pk, &bad), Err(Error::Corruption(_))));
    }

    #[test]
    fn encryption_is_probabilistic() {
        let (pk, _) = keygen(128, 4).unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        let a = encrypt(&pk, &big(5), &mut rng).unwrap();
        let b = encrypt(&pk, &big(5), &mut rng).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn serialization_is_fixed_width() {
        let (pk, _) = keygen(64, 5).unwrap();
        let c = Ciphertext::new(&pk, big(1)).unwrap();
        let bytes = c.to_bytes();
        assert_eq!(bytes.len(), pk.byte_width());
        assert_eq!(bytes[bytes.len() - 1], 1);
        assert!(bytes[..bytes.len() - 1].iter().all(|&b| b == 0));
        assert_eq!(Ciphertext::from_hex(&pk, &c.to_hex()).unwrap(), c);
        assert!(Ciphertext::from_bytes(&pk, &bytes[1..]).is_err());
    }

    #[test]
    fn client_encryptor_agrees_with_decrypt() {
        let (pk, sk) = keygen(256, 6).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let enc = ClientEncryptor::new(&pk, &sk, &mut rng).unwrap();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..50 {
            let m = rng.gen_biguint_below(pk.n());
            let c = enc.encrypt(&m, &mut rng).unwrap();
            assert_eq!(decrypt(&sk, &pk, &c).unwrap(), m);
            assert_eq!(decrypt_textbook(&sk, &pk, &c), m);
            assert!(seen.insert(c.to_hex()));
        }
    }

    #[test]
    fn small_decrypt_handles_signed_values() {
        let (pk, sk) = keygen(128, 8).unwrap();
        let mut rng = StdRng::seed_from_u64(4);
        for v in [0u64, 1, 2, 1 << 40, u64::MAX >> 8] {
            let pos = big(v);
            let neg = (pk.n() - &pos) % pk.n();
            for m in [pos, neg] {
                let c = encrypt(&pk, &m, &mut rng).unwrap();
                assert_eq!(decrypt_small(&sk, &pk, &c).unwrap(), m);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn homomorphism_holds(m1 in any::<u64>(), m2 in any::<u64>(), k in 0u64..1 << 20, seed in any::<u64>()) {
            let (pk, sk) = keygen(160, 9).unwrap();
            let mut rng = StdRng::seed_from_u64(seed);
            let (a, b) = (big(m1), big(m2));
            let ca = encrypt(&pk, &a, &mut rng).unwrap();
            let cb = encrypt(&pk, &b, &mut rng).unwrap();
            let sum = he_add(&pk, &ca, &cb).unwrap();
            prop_assert_eq!(decrypt(&sk, &pk, &sum).unwrap(), (&a + &b) % pk.n());
            let prod = he_scalar_mul(&pk, &ca, &big(k)).unwrap();
            prop_assert_eq!(decrypt(&sk, &pk, &prod).unwrap(), (&a * big(k)) % pk.n());
        }
    }
}
