//! Authenticated public-key encryption between two Ed25519 identities.
//!
//! Both sides convert their Ed25519 keys to X25519, run static-static
//! Diffie-Hellman, and expand the shared secret with HKDF-SHA256 bound to the
//! ordered pair of sender and recipient public keys. The body is sealed with
//! ChaCha20-Poly1305 under a random 96-bit nonce, which is prepended to the
//! ciphertext.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce as AeadNonce};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::Sha256;

use super::keys::{x25519_public, KeyPair, PublicKey};
use super::CryptoError;

const AEAD_NONCE_LEN: usize = 12;
const INFO: &[u8] = b"vdkms/seal/v1";

fn channel_key(
    own: &KeyPair,
    peer: &PublicKey,
    sender: &PublicKey,
    recipient: &PublicKey,
) -> Result<Key, CryptoError> {
    let shared = own.x25519_secret().diffie_hellman(&x25519_public(peer)?);
    if !shared.was_contributory() {
        return Err(CryptoError::MalformedKey);
    }
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(&sender.0);
    salt[32..].copy_from_slice(&recipient.0);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared.as_bytes());
    let mut okm = [0u8; 32];
    hk.expand(INFO, &mut okm)
        .expect("32 bytes is a valid HKDF output length");
    Ok(Key::from(okm))
}

pub fn seal<R: RngCore + CryptoRng>(
    rng: &mut R,
    sender: &KeyPair,
    recipient_pk: &PublicKey,
    plaintext: &[u8],
    aad: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let key = channel_key(sender, recipient_pk, &sender.public_key(), recipient_pk)?;
    let mut nonce = [0u8; AEAD_NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let ct = ChaCha20Poly1305::new(&key)
        .encrypt(
            AeadNonce::from_slice(&nonce),
            Payload {
                msg: plaintext,
                aad,
            },
        )
        .map_err(|_| CryptoError::Authentication)?;
    let mut out = Vec::with_capacity(AEAD_NONCE_LEN + ct.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    Ok(out)
}

pub fn open(
    recipient: &KeyPair,
    sender_pk: &PublicKey,
    ciphertext: &[u8],
    aad: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.len() < AEAD_NONCE_LEN + 16 {
        return Err(CryptoError::Authentication);
    }
    let key = channel_key(recipient, sender_pk, sender_pk, &recipient.public_key())?;
    let (nonce, body) = ciphertext.split_at(AEAD_NONCE_LEN);
    ChaCha20Poly1305::new(&key)
        .decrypt(AeadNonce::from_slice(nonce), Payload { msg: body, aad })
        .map_err(|_| CryptoError::Authentication)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn pairs(seed: u64) -> (ChaCha20Rng, KeyPair, KeyPair, KeyPair) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = KeyPair::generate(&mut rng);
        let b = KeyPair::generate(&mut rng);
        let c = KeyPair::generate(&mut rng);
        (rng, a, b, c)
    }

    #[test]
    fn round_trip() {
        let (mut rng, a, b, _) = pairs(1);
        let ct = seal(&mut rng, &a, &b.public_key(), b"payload", b"hdr").unwrap();
        assert_eq!(open(&b, &a.public_key(), &ct, b"hdr").unwrap(), b"payload");
    }

    #[test]
    fn third_party_cannot_open() {
        let (mut rng, a, b, c) = pairs(2);
        let ct = seal(&mut rng, &a, &b.public_key(), b"secret", b"hdr").unwrap();
        assert!(matches!(
            open(&c, &a.public_key(), &ct, b"hdr"),
            Err(CryptoError::Authentication)
        ));
        // even claiming to be the recipient's peer does not help
        assert!(matches!(
            open(&c, &b.public_key(), &ct, b"hdr"),
            Err(CryptoError::Authentication)
        ));
    }

    #[test]
    fn wrong_aad_fails() {
        let (mut rng, a, b, _) = pairs(3);
        let ct = seal(&mut rng, &a, &b.public_key(), b"x", b"hdr").unwrap();
        assert!(open(&b, &a.public_key(), &ct, b"hdr2").is_err());
    }

    #[test]
    fn single_byte_tamper_always_detected() {
        let (mut rng, a, b, _) = pairs(4);
        let ct = seal(
            &mut rng,
            &a,
            &b.public_key(),
            b"the quick brown fox",
            b"aad",
        )
        .unwrap();
        for _ in 0..10_000 {
            let mut bad = ct.clone();
            let idx = (rng.next_u32() as usize) % bad.len();
            let flip = 1 + (rng.next_u32() % 255) as u8;
            bad[idx] ^= flip;
            assert!(open(&b, &a.public_key(), &bad, b"aad").is_err());
        }
    }

    #[test]
    fn equal_plaintexts_encrypt_differently() {
        let (mut rng, a, b, _) = pairs(5);
        let x = seal(&mut rng, &a, &b.public_key(), b"same", b"").unwrap();
        let y = seal(&mut rng, &a, &b.public_key(), b"same", b"").unwrap();
        assert_ne!(x, y);
    }

    #[test]
    fn truncated_ciphertext_rejected() {
        let (_, a, b, _) = pairs(6);
        assert!(open(&b, &a.public_key(), &[0u8; 10], b"").is_err());
    }
}
