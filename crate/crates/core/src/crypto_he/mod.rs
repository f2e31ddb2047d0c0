//! Additively homomorphic Paillier encryption with `g = n + 1`, plus the
//! fixed-point codec that carries real weights as plaintexts.

mod codec;
mod paillier;
pub mod prime;

pub use codec::{FixedPointCodec, DEFAULT_SCALE};
pub use paillier::{
    decrypt, decrypt_small, decryptions_on_this_thread, encrypt, encrypt_with_randomness, he_add, he_scalar_mul, keygen,
    keypair_from_primes, Ciphertext, ClientEncryptor, PrivateKey, PublicKey, DEFAULT_KEY_BITS,
    MIN_KEY_BITS,
};

/// Names used by the protocol description.
pub type HEPublicKey = PublicKey;
pub type HEPrivateKey = PrivateKey;
