use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use super::bytes::hex_bytes;
use super::CryptoError;

hex_bytes!(
    /// Ed25519 verification key.
    PublicKey,
    32
);

hex_bytes!(
    /// Ed25519 signature.
    Signature,
    64
);

hex_bytes!(
    /// 128-bit random value carried by every transmitted message and transaction.
    Nonce,
    16
);

hex_bytes!(
    /// SHA-256 output.
    Digest,
    32
);

impl Nonce {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        Nonce(b)
    }
}

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    /// Uniformly random 32 bytes, for keys that only need to be unguessable.
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut b = [0u8; 32];
        rng.fill_bytes(&mut b);
        Digest(b)
    }

    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    /// Digest over several byte strings, each length-prefixed so that
    /// boundaries are unambiguous.
    pub fn of_parts(parts: &[&[u8]]) -> Self {
        let mut h = Sha256::new();
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        Digest(h.finalize().into())
    }

    /// Digest of the canonical JSON serialization of `value`.
    pub fn of_canonical<T: Serialize + ?Sized>(value: &T) -> Self {
        Self::of(&super::to_canonical_bytes(value))
    }
}

/// Ed25519 secret seed. Never serialized outside of a [`super::WalletFile`].
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey([u8; 32]);

impl SecretKey {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 32] = bytes.try_into().map_err(|_| CryptoError::MalformedKey)?;
        Ok(SecretKey(arr))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl std::fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
    public: PublicKey,
}

impl KeyPair {
    pub fn from_secret(secret: &SecretKey) -> Self {
        let signing = SigningKey::from_bytes(&secret.0);
        let public = PublicKey(signing.verifying_key().to_bytes());
        KeyPair { signing, public }
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_secret(&SecretKey(seed))
    }

    pub fn public_key(&self) -> PublicKey {
        self.public
    }

    pub fn secret_key(&self) -> SecretKey {
        SecretKey(self.signing.to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.signing.sign(msg).to_bytes())
    }

    /// Clamped X25519 scalar derived from the signing seed.
    pub(crate) fn x25519_secret(&self) -> x25519_dalek::StaticSecret {
        x25519_dalek::StaticSecret::from(self.signing.to_scalar_bytes())
    }
}

impl PartialEq for KeyPair {
    fn eq(&self, other: &Self) -> bool {
        self.signing.to_bytes() == other.signing.to_bytes()
    }
}

impl Eq for KeyPair {}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

#[derive(Serialize, Deserialize)]
struct KeyPairRepr {
    public_key: PublicKey,
    secret_key: String,
}

impl Serialize for KeyPair {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        KeyPairRepr {
            public_key: self.public,
            secret_key: hex::encode(self.signing.to_bytes()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for KeyPair {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = KeyPairRepr::deserialize(d)?;
        let raw = hex::decode(&repr.secret_key).map_err(serde::de::Error::custom)?;
        let sk = SecretKey::from_slice(&raw).map_err(serde::de::Error::custom)?;
        let kp = KeyPair::from_secret(&sk);
        if kp.public != repr.public_key {
            return Err(serde::de::Error::custom(
                "public key does not match secret key",
            ));
        }
        Ok(kp)
    }
}

/// Generates a key pair. A 32-byte seed gives a deterministic pair; `None`
/// draws from the operating system RNG.
pub fn keygen(seed: Option<&[u8]>) -> Result<KeyPair, CryptoError> {
    match seed {
        Some(s) => {
            if s.len() != 32 {
                return Err(CryptoError::MalformedSeed(s.len()));
            }
            Ok(KeyPair::from_secret(&SecretKey::from_slice(s)?))
        }
        None => Ok(KeyPair::generate(&mut rand::rngs::OsRng)),
    }
}

pub fn sign(sk: &SecretKey, msg: &[u8]) -> Signature {
    KeyPair::from_secret(sk).sign(msg)
}

/// Strict Ed25519 verification. Malformed keys simply fail.
pub fn verify(pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&pk.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    vk.verify_strict(msg, &sig).is_ok()
}

/// Montgomery form of an Ed25519 public key, for key agreement.
pub(crate) fn x25519_public(pk: &PublicKey) -> Result<x25519_dalek::PublicKey, CryptoError> {
    let vk = VerifyingKey::from_bytes(&pk.0).map_err(|_| CryptoError::MalformedKey)?;
    Ok(x25519_dalek::PublicKey::from(vk.to_montgomery().to_bytes()))
}
