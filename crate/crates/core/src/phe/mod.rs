//! Paillier partially homomorphic encryption.
//!
//! Ciphertexts support addition of plaintexts and multiplication by a
//! plaintext scalar. [`FixedPointCodec`] carries real-valued weights into
//! Z_n so weighted averages can be formed without decrypting.

mod codec;
mod paillier;
pub mod prime;

pub use codec::{
    decrypt_vector, encrypt_deterministic, encrypt_vector, FixedPointCodec, DEFAULT_SCALE_BITS,
};
pub use paillier::{Ciphertext, KeyId, Keypair, PublicKey, Randomness, SessionSeed, MIN_KEY_BITS};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PheError {
    #[error("key size must be even and at least {MIN_KEY_BITS} bits, got {0}")]
    InvalidKeyBits(u64),
    #[error("invalid primes: {0}")]
    InvalidPrimes(String),
    #[error("plaintext outside [0, n)")]
    PlaintextOutOfRange,
    #[error("scalar outside [0, n)")]
    ScalarOutOfRange,
    #[error("no usable nonce coprime to n")]
    InvalidNonce,
    #[error("ciphertexts belong to different keys")]
    KeyMismatch,
    #[error("malformed ciphertext")]
    MalformedCiphertext,
    #[error("value {0} does not fit the fixed-point range")]
    CodecOverflow(f64),
    #[error("non-finite value cannot be encoded")]
    NonFinite,
    #[error("parse error: {0}")]
    Parse(String),
}
