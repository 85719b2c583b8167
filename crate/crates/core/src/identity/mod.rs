//! DIDs, DID documents, ledger resolution, key rotation and revocation, and
//! pairwise peer DIDs.

mod did;

use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

pub use did::{did_from_key, Did, DidMethod};

use crate::crypto::{KeyPair, PublicKey};
use crate::ledger::{LedgerView, Transaction, TxnPayload, TxnStamp};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdentityError {
    #[error("malformed public key")]
    MalformedKey,
    #[error("cannot parse DID {0:?}")]
    Parse(String),
    #[error("{0} not found on ledger")]
    NotFound(Did),
    #[error("peer DIDs are never resolvable on the ledger: {0}")]
    PeerDid(Did),
    #[error("wallet has no key for {0}")]
    MissingKey(Did),
    #[error("{0} is revoked")]
    Revoked(Did),
    #[error("{0} is not a registrar")]
    NotRegistrar(Did),
    #[error("new key is already in use or was used before")]
    KeyReuse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetiredKey {
    pub public_key: PublicKey,
    pub retired_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DidDocument {
    pub id: Did,
    pub active_public_key: PublicKey,
    /// Oldest first.
    pub previous_keys: Vec<RetiredKey>,
    pub created_at: u64,
    pub updated_at: u64,
    pub revoked: bool,
}

impl DidDocument {
    pub fn new(id: Did, key: PublicKey, at: u64) -> Self {
        DidDocument {
            id,
            active_public_key: key,
            previous_keys: Vec::new(),
            created_at: at,
            updated_at: at,
            revoked: false,
        }
    }

    /// The key that was active at time `t`.
    ///
    /// A key retired at `r` is considered active for `t < r`; the active key
    /// covers everything from the last retirement on.
    pub fn key_at(&self, t: u64) -> Option<PublicKey> {
        if t < self.created_at {
            return None;
        }
        for retired in &self.previous_keys {
            if t < retired.retired_at {
                return Some(retired.public_key);
            }
        }
        Some(self.active_public_key)
    }

    pub fn has_used_key(&self, pk: &PublicKey) -> bool {
        self.active_public_key == *pk || self.previous_keys.iter().any(|k| k.public_key == *pk)
    }

    pub(crate) fn rotate(&mut self, new_key: PublicKey, at: u64) {
        let old = std::mem::replace(&mut self.active_public_key, new_key);
        self.previous_keys.push(RetiredKey {
            public_key: old,
            retired_at: at,
        });
        self.updated_at = at;
    }

    pub(crate) fn revoke(&mut self, at: u64) {
        self.revoked = true;
        self.updated_at = at;
    }
}

/// Pairwise identity for one counterparty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerDid {
    pub did: Did,
    pub pairwise_keypair: KeyPair,
    pub counterparty: Did,
}

impl PeerDid {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R, counterparty: Did) -> Self {
        let kp = KeyPair::generate(rng);
        PeerDid {
            did: Did::from_public_key(&kp.public_key(), DidMethod::Peer),
            pairwise_keypair: kp,
            counterparty,
        }
    }
}

/// Secret keys an agent holds, indexed by the public DID they control.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyStore {
    keys: BTreeMap<Did, KeyPair>,
}

impl KeyStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Generates a key pair and returns the DID it controls.
    pub fn create<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> Did {
        let kp = KeyPair::generate(rng);
        let did = Did::from_public_key(&kp.public_key(), DidMethod::Public);
        self.keys.insert(did.clone(), kp);
        did
    }

    pub fn insert(&mut self, did: Did, kp: KeyPair) {
        self.keys.insert(did, kp);
    }

    pub fn get(&self, did: &Did) -> Result<&KeyPair, IdentityError> {
        self.keys
            .get(did)
            .ok_or_else(|| IdentityError::MissingKey(did.clone()))
    }

    pub fn dids(&self) -> impl Iterator<Item = &Did> {
        self.keys.keys()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Looks up the document for `did` in a committed snapshot.
pub fn resolve(view: &LedgerView, did: &Did) -> Result<DidDocument, IdentityError> {
    if did.is_peer() {
        return Err(IdentityError::PeerDid(did.clone()));
    }
    view.did_document(did)
        .cloned()
        .ok_or_else(|| IdentityError::NotFound(did.clone()))
}

/// Builds a self-registration transaction for a freshly generated DID.
pub fn register_did(
    keys: &KeyStore,
    did: &Did,
    stamp: TxnStamp,
) -> Result<Transaction, IdentityError> {
    let kp = keys.get(did)?;
    let payload = TxnPayload::DidReg {
        did: did.clone(),
        public_key: kp.public_key(),
    };
    Ok(Transaction::sign(payload, did.clone(), kp, stamp))
}

/// Builds a ROTATE transaction signed by the currently active key, binding `new_pair`.
///
/// The wallet keeps the old key; callers install `new_pair` once the
/// transaction commits.
pub fn rotate_key(
    keys: &KeyStore,
    view: &LedgerView,
    did: &Did,
    new_pair: &KeyPair,
    stamp: TxnStamp,
) -> Result<Transaction, IdentityError> {
    let current = keys.get(did)?;
    let doc = resolve(view, did)?;
    if doc.revoked {
        return Err(IdentityError::Revoked(did.clone()));
    }
    if doc.active_public_key != current.public_key() {
        return Err(IdentityError::MissingKey(did.clone()));
    }
    if doc.has_used_key(&new_pair.public_key()) {
        return Err(IdentityError::KeyReuse);
    }
    let payload = TxnPayload::Rotate {
        did: did.clone(),
        new_public_key: new_pair.public_key(),
    };
    Ok(Transaction::sign(payload, did.clone(), current, stamp))
}

/// Builds a DID_REVOKE transaction. Only registrars may author one.
pub fn revoke_did(
    authority: &KeyStore,
    authority_did: &Did,
    view: &LedgerView,
    target: &Did,
    stamp: TxnStamp,
) -> Result<Transaction, IdentityError> {
    let kp = authority.get(authority_did)?;
    if !view.is_registrar(authority_did) {
        return Err(IdentityError::NotRegistrar(authority_did.clone()));
    }
    let doc = resolve(view, target)?;
    if doc.revoked {
        return Err(IdentityError::Revoked(target.clone()));
    }
    Ok(Transaction::sign(
        TxnPayload::DidRevoke {
            did: target.clone(),
        },
        authority_did.clone(),
        kp,
        stamp,
    ))
}
