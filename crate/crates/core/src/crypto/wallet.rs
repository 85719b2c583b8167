//! Passphrase-encrypted wallet container.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! "VDKW" | version:u8 | m_cost_kib:u32 | t_cost:u32 | p_cost:u32
//!        | len:u32 salt | len:u32 aead_nonce | len:u32 ciphertext
//! ```
//!
//! The key is Argon2id(passphrase, salt) with the parameters stored in the
//! header; everything before the ciphertext is authenticated as AEAD
//! associated data.

use std::io::{Read, Write};
use std::path::Path;

use argon2::{Algorithm, Argon2, Params, Version};
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce as AeadNonce};
use rand::{CryptoRng, RngCore};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{from_canonical_bytes, to_canonical_bytes, CryptoError};

pub const WALLET_MAGIC: &[u8; 4] = b"VDKW";
pub const WALLET_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KdfParams {
    pub m_cost_kib: u32,
    pub t_cost: u32,
    pub p_cost: u32,
}

impl Default for KdfParams {
    fn default() -> Self {
        KdfParams {
            m_cost_kib: 19 * 1024,
            t_cost: 2,
            p_cost: 1,
        }
    }
}

impl KdfParams {
    /// Cheap parameters for simulations with many short-lived agents.
    pub fn light() -> Self {
        KdfParams {
            m_cost_kib: 64,
            t_cost: 1,
            p_cost: 1,
        }
    }

    fn derive(&self, passphrase: &str, salt: &[u8]) -> Result<Key, CryptoError> {
        let params = Params::new(self.m_cost_kib, self.t_cost, self.p_cost, Some(32))
            .map_err(|e| CryptoError::Kdf(e.to_string()))?;
        let mut out = [0u8; 32];
        Argon2::new(Algorithm::Argon2id, Version::V0x13, params)
            .hash_password_into(passphrase.as_bytes(), salt, &mut out)
            .map_err(|e| CryptoError::Kdf(e.to_string()))?;
        Ok(Key::from(out))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalletFile {
    pub version: u8,
    pub kdf: KdfParams,
    pub salt: [u8; 16],
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
}

impl WalletFile {
    pub fn store<T: Serialize + ?Sized, R: RngCore + CryptoRng>(
        rng: &mut R,
        passphrase: &str,
        records: &T,
        kdf: KdfParams,
    ) -> Result<Self, CryptoError> {
        if passphrase.is_empty() {
            return Err(CryptoError::EmptyPassphrase);
        }
        let mut salt = [0u8; 16];
        let mut nonce = [0u8; 12];
        rng.fill_bytes(&mut salt);
        rng.fill_bytes(&mut nonce);
        let mut wf = WalletFile {
            version: WALLET_VERSION,
            kdf,
            salt,
            nonce,
            ciphertext: Vec::new(),
        };
        let key = kdf.derive(passphrase, &salt)?;
        let plaintext = to_canonical_bytes(records);
        let aad = wf.header_bytes();
        wf.ciphertext = ChaCha20Poly1305::new(&key)
            .encrypt(
                AeadNonce::from_slice(&nonce),
                Payload {
                    msg: &plaintext,
                    aad: &aad,
                },
            )
            .map_err(|_| CryptoError::Authentication)?;
        Ok(wf)
    }

    pub fn load<T: DeserializeOwned>(&self, passphrase: &str) -> Result<T, CryptoError> {
        if self.version != WALLET_VERSION {
            return Err(CryptoError::WalletVersion(self.version));
        }
        let key = self.kdf.derive(passphrase, &self.salt)?;
        let plaintext = ChaCha20Poly1305::new(&key)
            .decrypt(
                AeadNonce::from_slice(&self.nonce),
                Payload {
                    msg: &self.ciphertext,
                    aad: &self.header_bytes(),
                },
            )
            .map_err(|_| CryptoError::Authentication)?;
        from_canonical_bytes(&plaintext)
    }

    fn header_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.extend_from_slice(WALLET_MAGIC);
        out.push(self.version);
        out.extend_from_slice(&self.kdf.m_cost_kib.to_le_bytes());
        out.extend_from_slice(&self.kdf.t_cost.to_le_bytes());
        out.extend_from_slice(&self.kdf.p_cost.to_le_bytes());
        put_field(&mut out, &self.salt);
        put_field(&mut out, &self.nonce);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header_bytes();
        put_field(&mut out, &self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| fmt_err("truncated magic"))?;
        if &magic != WALLET_MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = read_u8(&mut r)?;
        if version != WALLET_VERSION {
            return Err(CryptoError::WalletVersion(version));
        }
        let kdf = KdfParams {
            m_cost_kib: read_u32(&mut r)?,
            t_cost: read_u32(&mut r)?,
            p_cost: read_u32(&mut r)?,
        };
        let salt: [u8; 16] = get_field(&mut r)?
            .try_into()
            .map_err(|_| fmt_err("salt length"))?;
        let nonce: [u8; 12] = get_field(&mut r)?
            .try_into()
            .map_err(|_| fmt_err("nonce length"))?;
        let ciphertext = get_field(&mut r)?;
        if !r.is_empty() {
            return Err(fmt_err("trailing bytes"));
        }
        Ok(WalletFile {
            version,
            kdf,
            salt,
            nonce,
            ciphertext,
        })
    }

    pub fn write_to(&self, path: &Path) -> Result<(), CryptoError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, CryptoError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn wallet_store<T: Serialize + ?Sized>(
    passphrase: &str,
    records: &T,
) -> Result<WalletFile, CryptoError> {
    WalletFile::store(
        &mut rand::rngs::OsRng,
        passphrase,
        records,
        KdfParams::default(),
    )
}

pub fn wallet_load<T: DeserializeOwned>(
    passphrase: &str,
    file: &WalletFile,
) -> Result<T, CryptoError> {
    file.load(passphrase)
}

fn fmt_err(msg: &str) -> CryptoError {
    CryptoError::WalletFormat(msg.to_string())
}

fn put_field(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn read_u8(r: &mut &[u8]) -> Result<u8, CryptoError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)
        .map_err(|_| fmt_err("truncated header"))?;
    Ok(b[0])
}

fn read_u32(r: &mut &[u8]) -> Result<u32, CryptoError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| fmt_err("truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

fn get_field(r: &mut &[u8]) -> Result<Vec<u8>, CryptoError> {
    let len = read_u32(r)? as usize;
    if r.len() < len {
        return Err(fmt_err("truncated field"));
    }
    let (head, tail) = r.split_at(len);
    *r = tail;
    Ok(head.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use serde::Deserialize;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct KeyRecord {
        label: String,
        keypair: KeyPair,
    }

    fn records(rng: &mut ChaCha20Rng, n: usize) -> Vec<KeyRecord> {
        (0..n)
            .map(|i| KeyRecord {
                label: format!("key-{i}"),
                keypair: KeyPair::generate(rng),
            })
            .collect()
    }

    #[test]
    fn store_load_one_record() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let recs = records(&mut rng, 1);
        let wf = WalletFile::store(&mut rng, "hunter2", &recs, KdfParams::light()).unwrap();
        let back: Vec<KeyRecord> = wf.load("hunter2").unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn wrong_passphrase_fails_closed() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let recs = records(&mut rng, 1);
        let wf = WalletFile::store(&mut rng, "hunter2", &recs, KdfParams::light()).unwrap();
        let err = wf.load::<Vec<KeyRecord>>("hunter2x").unwrap_err();
        assert!(matches!(err, CryptoError::Authentication));
    }

    #[test]
    fn hundred_records_byte_identical() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let recs = records(&mut rng, 100);
        let wf = WalletFile::store(&mut rng, "pw", &recs, KdfParams::light()).unwrap();
        let parsed = WalletFile::from_bytes(&wf.to_bytes()).unwrap();
        let back: Vec<KeyRecord> = parsed.load("pw").unwrap();
        assert_eq!(to_canonical_bytes(&back), to_canonical_bytes(&recs));
    }

    #[test]
    fn empty_passphrase_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let err =
            WalletFile::store(&mut rng, "", &Vec::<u8>::new(), KdfParams::light()).unwrap_err();
        assert!(matches!(err, CryptoError::EmptyPassphrase));
    }

    #[test]
    fn version_mismatch_reported() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let wf = WalletFile::store(&mut rng, "pw", &1u32, KdfParams::light()).unwrap();
        let mut bytes = wf.to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            WalletFile::from_bytes(&bytes),
            Err(CryptoError::WalletVersion(9))
        ));
    }

    #[test]
    fn header_tamper_detected() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut wf = WalletFile::store(&mut rng, "pw", &1u32, KdfParams::light()).unwrap();
        wf.salt[0] ^= 1;
        assert!(wf.load::<u32>("pw").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.vdkw");
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let wf = WalletFile::store(&mut rng, "pw", &"hello", KdfParams::light()).unwrap();
        wf.write_to(&path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[..4], b"VDKW");
        let back = WalletFile::read_from(&path).unwrap();
        assert_eq!(back.load::<String>("pw").unwrap(), "hello");
    }
}
