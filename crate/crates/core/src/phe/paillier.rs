//! Paillier keys, ciphertexts and the additive homomorphism.

use std::fmt;

use hmac::{Hmac, KeyInit, Mac};
use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;
use sha2::{Digest, Sha256};

use super::prime::{is_probable_prime, lcm, random_below, random_prime, MILLER_RABIN_ROUNDS};
use super::PheError;

/// Smallest accepted modulus width.
pub const MIN_KEY_BITS: u64 = 16;

/// 16-byte digest binding a ciphertext to the public key that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub [u8; 16]);

impl KeyId {
    fn of(n: &BigUint, g: &BigUint) -> Self {
        let mut hasher = Sha256::new();
        for part in [n, g] {
            let bytes = part.to_bytes_be();
            hasher.update((bytes.len() as u32).to_be_bytes());
            hasher.update(&bytes);
        }
        let digest = hasher.finalize();
        let mut id = [0u8; 16];
        id.copy_from_slice(&digest[..16]);
        KeyId(id)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({})", self.to_hex())
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// The public half of a Paillier key, with `g = n + 1`.
#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    g: BigUint,
    key_bits: u64,
    key_id: KeyId,
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PublicKey")
            .field("key_bits", &self.key_bits)
            .field("key_id", &self.key_id)
            .finish()
    }
}

/// An opaque residue modulo n², tagged with its key.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Ciphertext {
    value: BigUint,
    key_id: KeyId,
}

/// Session key for deterministic encryption. Equal plaintexts encrypt to
/// equal ciphertexts under one session, which breaks semantic security:
/// evaluation use only.
#[derive(Clone)]
pub struct SessionSeed([u8; 32]);

impl SessionSeed {
    pub fn new(bytes: [u8; 32]) -> Self {
        SessionSeed(bytes)
    }

    pub fn from_u64(seed: u64) -> Self {
        let digest = Sha256::new()
            .chain_update(b"fabricfl/phe/session")
            .chain_update(seed.to_be_bytes())
            .finalize();
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&digest);
        SessionSeed(bytes)
    }
}

impl fmt::Debug for SessionSeed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionSeed(..)")
    }
}

/// How the encryption nonce `r` is chosen.
pub enum Randomness<'a> {
    Fresh(&'a mut dyn RngCore),
    Deterministic(&'a SessionSeed),
}

/// A Paillier keypair. The secret fields never leave this struct except
/// through the secret key file.
#[derive(Clone)]
pub struct Keypair {
    public: PublicKey,
    p: BigUint,
    q: BigUint,
    lambda: BigUint,
    mu: BigUint,
}

impl fmt::Debug for Keypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keypair").field("public", &self.public).finish_non_exhaustive()
    }
}

impl PublicKey {
    fn from_modulus(n: BigUint, key_bits: u64) -> Self {
        let g = &n + 1u32;
        let key_id = KeyId::of(&n, &g);
        PublicKey {
            n_squared: &n * &n,
            n,
            g,
            key_bits,
            key_id,
        }
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn key_bits(&self) -> u64 {
        self.key_bits
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    fn check_plaintext(&self, m: &BigUint) -> Result<(), PheError> {
        if m >= &self.n {
            return Err(PheError::PlaintextOutOfRange);
        }
        Ok(())
    }

    fn check_key(&self, c: &Ciphertext) -> Result<(), PheError> {
        if c.key_id != self.key_id {
            return Err(PheError::KeyMismatch);
        }
        Ok(())
    }

    /// `g^m · r^n mod n²` for a caller-supplied nonce.
    pub fn encrypt_with_nonce(&self, m: &BigUint, r: &BigUint) -> Result<Ciphertext, PheError> {
        self.check_plaintext(m)?;
        if r.is_zero() || r >= &self.n || !r.gcd(&self.n).is_one() {
            return Err(PheError::InvalidNonce);
        }
        // (n+1)^m = 1 + m·n (mod n²)
        let gm = (BigUint::one() + m * &self.n) % &self.n_squared;
        let rn = r.modpow(&self.n, &self.n_squared);
        Ok(Ciphertext {
            value: (gm * rn) % &self.n_squared,
            key_id: self.key_id,
        })
    }

    pub fn encrypt(&self, m: &BigUint, randomness: Randomness<'_>) -> Result<Ciphertext, PheError> {
        let r = match randomness {
            Randomness::Fresh(rng) => self.fresh_nonce(rng)?,
            Randomness::Deterministic(seed) => self.derived_nonce(m, seed)?,
        };
        self.encrypt_with_nonce(m, &r)
    }

    pub(crate) fn fresh_nonce(&self, rng: &mut dyn RngCore) -> Result<BigUint, PheError> {
        // A unit exists for every n > 1; the bound only guards degenerate keys.
        for _ in 0..1024 {
            let r = random_below(rng, &self.n);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return Ok(r);
            }
        }
        Err(PheError::InvalidNonce)
    }

    /// HMAC-SHA256 keyed by the session seed over (key id, m, counter),
    /// expanded past the modulus width and reduced mod n.
    pub(crate) fn derived_nonce(&self, m: &BigUint, seed: &SessionSeed) -> Result<BigUint, PheError> {
        self.check_plaintext(m)?;
        let m_bytes = m.to_bytes_be();
        let want = (self.n.bits().div_ceil(8) + 16) as usize;
        for counter in 0u32..1024 {
            let mut stream = Vec::with_capacity(want + 32);
            let mut block = 0u32;
            while stream.len() < want {
                let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(&seed.0)
                    .expect("hmac accepts any key length");
                mac.update(&self.key_id.0);
                mac.update(&(m_bytes.len() as u32).to_be_bytes());
                mac.update(&m_bytes);
                mac.update(&counter.to_be_bytes());
                mac.update(&block.to_be_bytes());
                stream.extend_from_slice(&mac.finalize().into_bytes());
                block += 1;
            }
            let r = BigUint::from_bytes_be(&stream[..want]) % &self.n;
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return Ok(r);
            }
        }
        Err(PheError::InvalidNonce)
    }

    /// Ciphertext of `m_a + m_b mod n`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, PheError> {
        self.check_key(a)?;
        self.check_key(b)?;
        Ok(Ciphertext {
            value: (&a.value * &b.value) % &self.n_squared,
            key_id: self.key_id,
        })
    }

    /// Ciphertext of `k · m mod n` for a plaintext scalar `0 <= k < n`.
    pub fn scalar_mul(&self, c: &Ciphertext, k: &BigUint) -> Result<Ciphertext, PheError> {
        self.check_key(c)?;
        if k >= &self.n {
            return Err(PheError::ScalarOutOfRange);
        }
        Ok(Ciphertext {
            value: c.value.modpow(k, &self.n_squared),
            key_id: self.key_id,
        })
    }

    /// Plain-text public key file: `n=`, `g=`, `key_bits=` lines.
    pub fn to_file_string(&self) -> String {
        format!("n={}\ng={}\nkey_bits={}\n", self.n, self.g, self.key_bits)
    }

    pub fn from_file_str(text: &str) -> Result<Self, PheError> {
        let fields = parse_fields(text, &["n", "g", "key_bits"])?;
        let n = parse_big(&fields[0], "n")?;
        let g = parse_big(&fields[1], "g")?;
        let key_bits: u64 = fields[2]
            .parse()
            .map_err(|_| PheError::Parse("key_bits is not an integer".into()))?;
        if n < BigUint::from(2u32) {
            return Err(PheError::Parse("modulus too small".into()));
        }
        if g != &n + 1u32 {
            return Err(PheError::Parse("generator must be n+1".into()));
        }
        Ok(PublicKey::from_modulus(n, key_bits))
    }
}

impl Ciphertext {
    /// Wraps a raw residue. No range check: `decrypt` validates.
    pub fn from_raw(value: BigUint, key_id: KeyId) -> Self {
        Ciphertext { value, key_id }
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    /// Wire form: 16-byte key id, 4-byte big-endian length, big-endian
    /// magnitude.
    pub fn to_bytes(&self) -> Vec<u8> {
        let magnitude = self.value.to_bytes_be();
        let mut out = Vec::with_capacity(20 + magnitude.len());
        out.extend_from_slice(&self.key_id.0);
        out.extend_from_slice(&(magnitude.len() as u32).to_be_bytes());
        out.extend_from_slice(&magnitude);
        out
    }

    /// Decodes one ciphertext from the front of `bytes`, returning it and
    /// the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize), PheError> {
        if bytes.len() < 20 {
            return Err(PheError::Parse("truncated ciphertext header".into()));
        }
        let mut id = [0u8; 16];
        id.copy_from_slice(&bytes[..16]);
        let len = u32::from_be_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let end = 20usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| PheError::Parse("truncated ciphertext magnitude".into()))?;
        let value = BigUint::from_bytes_be(&bytes[20..end]);
        Ok((Ciphertext { value, key_id: KeyId(id) }, end))
    }
}

impl Keypair {
    /// Generates a keypair whose modulus has exactly `key_bits` bits.
    pub fn generate<R: RngCore + ?Sized>(key_bits: u64, rng: &mut R) -> Result<Self, PheError> {
        if key_bits < MIN_KEY_BITS || !key_bits.is_multiple_of(2) {
            return Err(PheError::InvalidKeyBits(key_bits));
        }
        let half = key_bits / 2;
        loop {
            let p = random_prime(half, rng);
            let q = random_prime(half, rng);
            if p == q {
                continue;
            }
            match Keypair::build(p, q, key_bits) {
                Ok(kp) => return Ok(kp),
                Err(PheError::InvalidPrimes(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }

    /// Builds a keypair from explicit primes (test vectors, secret key files).
    pub fn from_primes(p: BigUint, q: BigUint) -> Result<Self, PheError> {
        let mut rng = rand::rng();
        for x in [&p, &q] {
            if !is_probable_prime(x, MILLER_RABIN_ROUNDS, &mut rng) {
                return Err(PheError::InvalidPrimes(format!("{x} is not prime")));
            }
        }
        let bits = (&p * &q).bits();
        Keypair::build(p, q, bits)
    }

    fn build(p: BigUint, q: BigUint, key_bits: u64) -> Result<Self, PheError> {
        if p == q {
            return Err(PheError::InvalidPrimes("p and q must differ".into()));
        }
        let one = BigUint::one();
        let n = &p * &q;
        let p1 = &p - &one;
        let q1 = &q - &one;
        if !n.gcd(&(&p1 * &q1)).is_one() {
            return Err(PheError::InvalidPrimes("gcd(n, (p-1)(q-1)) != 1".into()));
        }
        let lambda = lcm(&p1, &q1);
        let public = PublicKey::from_modulus(n, key_bits);
        let u = public.g.modpow(&lambda, &public.n_squared);
        let l = l_function(&u, &public.n);
        let mu = l
            .modinv(&public.n)
            .ok_or_else(|| PheError::InvalidPrimes("L(g^lambda) not invertible".into()))?;
        Ok(Keypair {
            public,
            p,
            q,
            lambda,
            mu,
        })
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    pub fn primes(&self) -> (&BigUint, &BigUint) {
        (&self.p, &self.q)
    }

    /// `L(c^λ mod n²) · μ mod n`.
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, PheError> {
        let pk = &self.public;
        pk.check_key(c)?;
        if c.value >= pk.n_squared || c.value.is_zero() || !c.value.gcd(&pk.n).is_one() {
            return Err(PheError::MalformedCiphertext);
        }
        let u = c.value.modpow(&self.lambda, &pk.n_squared);
        Ok((l_function(&u, &pk.n) * &self.mu) % &pk.n)
    }

    /// Secret key file: `p=`, `q=`, `key_bits=` lines.
    pub fn to_secret_file_string(&self) -> String {
        format!("p={}\nq={}\nkey_bits={}\n", self.p, self.q, self.public.key_bits)
    }

    pub fn from_secret_file_str(text: &str) -> Result<Self, PheError> {
        let fields = parse_fields(text, &["p", "q", "key_bits"])?;
        let p = parse_big(&fields[0], "p")?;
        let q = parse_big(&fields[1], "q")?;
        let key_bits: u64 = fields[2]
            .parse()
            .map_err(|_| PheError::Parse("key_bits is not an integer".into()))?;
        let kp = Keypair::from_primes(p, q)?;
        Keypair::build(kp.p, kp.q, key_bits)
    }
}

fn l_function(u: &BigUint, n: &BigUint) -> BigUint {
    (u - 1u32) / n
}

fn parse_fields(text: &str, keys: &[&str]) -> Result<Vec<String>, PheError> {
    let mut values = vec![None; keys.len()];
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| PheError::Parse(format!("expected key=value, got {line:?}")))?;
        if let Some(i) = keys.iter().position(|key| *key == k.trim()) {
            values[i] = Some(v.trim().to_string());
        }
    }
    keys.iter()
        .zip(values)
        .map(|(k, v)| v.ok_or_else(|| PheError::Parse(format!("missing field {k}"))))
        .collect()
}

fn parse_big(s: &str, what: &str) -> Result<BigUint, PheError> {
    s.parse::<BigUint>()
        .map_err(|_| PheError::Parse(format!("{what} is not a decimal integer")))
}
