use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};

use crate::rng::SplitMix64;

/// Miller–Rabin rounds used for key generation.
pub const MR_ROUNDS: usize = 40;

const SMALL_PRIMES: [u32; 53] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101,
    103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199,
    211, 223, 227, 229, 233, 239, 241, 251,
];

/// Uniform big natural with exactly `bits` random bits (little-endian words
/// from the stream).
pub fn random_bits(bits: usize, rng: &mut SplitMix64) -> BigUint {
    let words = bits.div_ceil(64);
    let mut digits: Vec<u64> = (0..words).map(|_| rng.next()).collect();
    let excess = words * 64 - bits;
    if excess > 0 {
        if let Some(top) = digits.last_mut() {
            *top >>= excess;
        }
    }
    BigUint::from_slice(
        &digits.iter().flat_map(|d| [*d as u32, (*d >> 32) as u32]).collect::<Vec<_>>(),
    )
}

/// Uniform in `[low, high)`; `high > low`.
pub fn random_range(low: &BigUint, high: &BigUint, rng: &mut SplitMix64) -> BigUint {
    let span = high - low;
    let bits = span.bits() as usize;
    loop {
        let r = random_bits(bits, rng);
        if r < span {
            return low + r;
        }
    }
}

/// Probabilistic primality with `rounds` random bases from `rng`.
pub fn is_probable_prime(n: &BigUint, rounds: usize, rng: &mut SplitMix64) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &p in SMALL_PRIMES.iter() {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    if n == &two {
        return true;
    }
    if n.is_even() {
        return false;
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    'witness: for _ in 0..rounds {
        let a = random_range(&two, &n_minus_1, rng);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = (&x * &x) % n;
            if x == n_minus_1 {
                continue 'witness;
            }
            if x.is_one() {
                return false;
            }
        }
        return false;
    }
    true
}

/// Random prime of exactly `bits` bits with the two top bits set, so the
/// product of two such primes has exactly `2 * bits` bits.
pub fn gen_prime(bits: usize, rng: &mut SplitMix64) -> BigUint {
    assert!(bits >= 3, "prime size too small");
    loop {
        let mut c = random_bits(bits, rng);
        c.set_bit(bits as u64 - 1, true);
        c.set_bit(bits as u64 - 2, true);
        c.set_bit(0, true);
        if is_probable_prime(&c, MR_ROUNDS, rng) {
            return c;
        }
    }
}
