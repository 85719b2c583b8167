//! Signing, hashing, nonces, authenticated encryption and wallet storage.

pub(crate) mod bytes;
mod canonical;
mod keys;
mod seal;
mod wallet;

pub use bytes::hex_vec;
pub use canonical::{from_canonical_bytes, to_canonical_bytes, to_canonical_string};
pub use keys::{keygen, sign, verify, Digest, KeyPair, Nonce, PublicKey, SecretKey, Signature};
pub use seal::{open, seal};
pub use wallet::{wallet_load, wallet_store, KdfParams, WalletFile, WALLET_MAGIC, WALLET_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum CryptoError {
    #[error("seed must be 32 bytes, got {0}")]
    MalformedSeed(usize),
    #[error("malformed key")]
    MalformedKey,
    #[error("{what}: expected {expected} bytes, got {found}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("authentication failed")]
    Authentication,
    #[error("unsupported wallet version {0}")]
    WalletVersion(u8),
    #[error("malformed wallet file: {0}")]
    WalletFormat(String),
    #[error("passphrase must not be empty")]
    EmptyPassphrase,
    #[error("key derivation failed: {0}")]
    Kdf(String),
    #[error("encoding: {0}")]
    Encoding(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
