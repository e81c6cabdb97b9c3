//! Fixed-point encoding of signed reals into Z_n.

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{FromPrimitive, ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use super::paillier::{Ciphertext, Keypair, PublicKey, Randomness, SessionSeed};
use super::PheError;

pub const DEFAULT_SCALE_BITS: u32 = 16;

/// Maps reals to `round(x · 2^scale_bits) mod n`. Negatives wrap into the
/// upper half of Z_n.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedPointCodec {
    scale_bits: u32,
    modulus: BigUint,
}

impl FixedPointCodec {
    pub fn new(scale_bits: u32, modulus: BigUint) -> Self {
        FixedPointCodec { scale_bits, modulus }
    }

    pub fn for_key(key: &PublicKey) -> Self {
        FixedPointCodec::new(DEFAULT_SCALE_BITS, key.n().clone())
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    pub fn encode(&self, x: f64) -> Result<BigUint, PheError> {
        if !x.is_finite() {
            return Err(PheError::NonFinite);
        }
        let scaled = (x * (self.scale_bits as f64).exp2()).round();
        let signed = BigInt::from_f64(scaled).ok_or(PheError::CodecOverflow(x))?;
        self.wrap_signed(&signed).ok_or(PheError::CodecOverflow(x))
    }

    /// Embeds a signed integer with `2|v| < n` into Z_n.
    pub(crate) fn wrap_signed(&self, v: &BigInt) -> Option<BigUint> {
        let magnitude = v.magnitude();
        if magnitude * 2u32 >= self.modulus {
            return None;
        }
        Some(match v.sign() {
            Sign::Minus => &self.modulus - magnitude,
            _ => magnitude.clone(),
        })
    }

    /// Values above n/2 read as negatives.
    pub(crate) fn unwrap_signed(&self, m: &BigUint) -> BigInt {
        let m = m % &self.modulus;
        if &m * 2u32 > self.modulus {
            -BigInt::from(&self.modulus - &m)
        } else {
            BigInt::from(m)
        }
    }

    pub fn decode(&self, m: &BigUint) -> f64 {
        self.decode_with_scale(m, self.scale_bits)
    }

    /// Decodes a value carrying `scale_bits` fractional bits, e.g.
    /// `2 · scale_bits` after a plaintext-scalar product.
    pub fn decode_with_scale(&self, m: &BigUint, scale_bits: u32) -> f64 {
        let v = self.unwrap_signed(m);
        if v.is_zero() {
            return 0.0;
        }
        // Split off low bits so huge integers do not overflow f64.
        let shift = v.magnitude().bits().saturating_sub(1000);
        let head = (&v >> shift).to_f64().unwrap_or(f64::NAN);
        head * ((shift as f64) - (scale_bits as f64)).exp2()
    }
}

/// Encodes then encrypts every element. Any out-of-range element fails the
/// whole call before anything is encrypted.
pub fn encrypt_vector(
    key: &PublicKey,
    codec: &FixedPointCodec,
    values: &[f64],
    randomness: Randomness<'_>,
) -> Result<Vec<Ciphertext>, PheError> {
    let encoded = values
        .iter()
        .map(|&x| codec.encode(x))
        .collect::<Result<Vec<_>, _>>()?;
    match randomness {
        Randomness::Fresh(rng) => {
            // One child seed per element keeps the output independent of
            // rayon's scheduling.
            let seeds: Vec<[u8; 32]> = encoded
                .iter()
                .map(|_| {
                    let mut s = [0u8; 32];
                    rng.fill_bytes(&mut s);
                    s
                })
                .collect();
            encoded
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(m, seed)| {
                    let mut child = ChaCha20Rng::from_seed(*seed);
                    key.encrypt(m, Randomness::Fresh(&mut child))
                })
                .collect()
        }
        Randomness::Deterministic(seed) => encoded
            .par_iter()
            .map(|m| key.encrypt(m, Randomness::Deterministic(seed)))
            .collect(),
    }
}

pub fn decrypt_vector(
    key: &Keypair,
    codec: &FixedPointCodec,
    ciphertexts: &[Ciphertext],
) -> Result<Vec<f64>, PheError> {
    ciphertexts
        .par_iter()
        .map(|c| key.decrypt(c).map(|m| codec.decode(&m)))
        .collect()
}

/// Deterministic-mode convenience used by feature encryption.
pub fn encrypt_deterministic(
    key: &PublicKey,
    codec: &FixedPointCodec,
    x: f64,
    seed: &SessionSeed,
) -> Result<Ciphertext, PheError> {
    key.encrypt(&codec.encode(x)?, Randomness::Deterministic(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn toy_key() -> Keypair {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        Keypair::generate(128, &mut rng).unwrap()
    }

    #[test]
    fn encode_examples() {
        let kp = toy_key();
        let codec = FixedPointCodec::for_key(kp.public());
        let n = kp.public().n();
        assert_eq!(codec.encode(0.0).unwrap(), BigUint::zero());
        assert_eq!(codec.encode(1.5).unwrap(), BigUint::from(98304u32));
        let minus_one = codec.encode(-1.0).unwrap();
        assert_eq!(minus_one, n - 65536u32);
        assert_eq!(codec.decode(&minus_one), -1.0);
    }

    #[test]
    fn encode_rejects_overflow() {
        let codec = FixedPointCodec::new(16, BigUint::from(1u64 << 20));
        // 2^20 / 2 = 2^19; 8.0 · 2^16 = 2^19 is already out of range.
        assert!(codec.encode(7.99).is_ok());
        assert!(matches!(codec.encode(8.0), Err(PheError::CodecOverflow(_))));
        assert!(matches!(codec.encode(-8.0), Err(PheError::CodecOverflow(_))));
        assert!(matches!(codec.encode(f64::NAN), Err(PheError::NonFinite)));
    }

    #[test]
    fn vector_roundtrip_and_sum() {
        let kp = toy_key();
        let pk = kp.public();
        let codec = FixedPointCodec::for_key(pk);
        let mut rng = ChaCha8Rng::seed_from_u64(3);

        let empty = encrypt_vector(pk, &codec, &[], Randomness::Fresh(&mut rng)).unwrap();
        assert!(empty.is_empty());

        let v = [0.25, -0.5];
        let cv = encrypt_vector(pk, &codec, &v, Randomness::Fresh(&mut rng)).unwrap();
        assert_eq!(decrypt_vector(&kp, &codec, &cv).unwrap(), v.to_vec());

        let u = [1.1, -2.7, 3.25, 0.0];
        let w = [-0.3, 5.5, -3.25, 1e-3];
        let cu = encrypt_vector(pk, &codec, &u, Randomness::Fresh(&mut rng)).unwrap();
        let cw = encrypt_vector(pk, &codec, &w, Randomness::Fresh(&mut rng)).unwrap();
        let sum: Vec<_> = cu.iter().zip(&cw).map(|(a, b)| pk.add(a, b).unwrap()).collect();
        let tol = 2.0 * (-16f64).exp2();
        for (got, (a, b)) in decrypt_vector(&kp, &codec, &sum).unwrap().iter().zip(u.iter().zip(&w)) {
            assert!((got - (a + b)).abs() <= tol, "{got} vs {}", a + b);
        }
    }

    #[test]
    fn vector_overflow_aborts_whole_vector() {
        let kp = toy_key();
        let pk = kp.public();
        let codec = FixedPointCodec::new(100, pk.n().clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let res = encrypt_vector(pk, &codec, &[0.0, 1e9], Randomness::Fresh(&mut rng));
        assert!(matches!(res, Err(PheError::CodecOverflow(_))));
    }

    #[test]
    fn fresh_vector_is_reproducible_from_seeded_rng() {
        let kp = toy_key();
        let pk = kp.public();
        let codec = FixedPointCodec::for_key(pk);
        let v: Vec<f64> = (0..32).map(|i| i as f64 / 7.0).collect();
        let a = encrypt_vector(pk, &codec, &v, Randomness::Fresh(&mut ChaCha8Rng::seed_from_u64(5))).unwrap();
        let b = encrypt_vector(pk, &codec, &v, Randomness::Fresh(&mut ChaCha8Rng::seed_from_u64(5))).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn codec_roundtrip(x in -100.0f64..100.0) {
            let codec = FixedPointCodec::new(16, BigUint::from(u64::MAX));
            let back = codec.decode(&codec.encode(x).unwrap());
            prop_assert!((back - x).abs() <= (-16f64).exp2());
        }

        #[test]
        fn negatives_live_in_upper_half(x in 0.001f64..100.0) {
            let modulus = BigUint::from(u64::MAX);
            let codec = FixedPointCodec::new(16, modulus.clone());
            let m = codec.encode(-x).unwrap();
            prop_assert!(&m * 2u32 > modulus);
        }
    }
}
