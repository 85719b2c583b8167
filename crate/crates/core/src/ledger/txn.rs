use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::credentials::{CredentialDefinition, Schema};
use crate::crypto::{to_canonical_bytes, verify, Digest, KeyPair, Nonce, PublicKey, Signature};
use crate::identity::Did;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TxnKind {
    DidReg,
    Schema,
    CredDef,
    CredReg,
    CredRevoke,
    DidRevoke,
    Rotate,
}

impl TxnKind {
    pub const ALL: [TxnKind; 7] = [
        TxnKind::DidReg,
        TxnKind::Schema,
        TxnKind::CredDef,
        TxnKind::CredReg,
        TxnKind::CredRevoke,
        TxnKind::DidRevoke,
        TxnKind::Rotate,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TxnKind::DidReg => "DID_REG",
            TxnKind::Schema => "SCHEMA",
            TxnKind::CredDef => "CRED_DEF",
            TxnKind::CredReg => "CRED_REG",
            TxnKind::CredRevoke => "CRED_REVOKE",
            TxnKind::DidRevoke => "DID_REVOKE",
            TxnKind::Rotate => "ROTATE",
        }
    }
}

/// Ledger-side record of an issued credential. Carries commitments only;
/// attribute values never reach the ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialRegistration {
    pub cred_def_ref: Digest,
    pub commitment_root: Digest,
    pub commitments: BTreeMap<String, Digest>,
    pub subject: Did,
    pub subject_public_key: PublicKey,
    pub issued_at: u64,
    pub issuer_signature: Signature,
    /// Keyed digest of the VIN, present for VIN credentials.
    pub vin_tag: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TxnPayload {
    DidReg { did: Did, public_key: PublicKey },
    Schema(Schema),
    CredDef(CredentialDefinition),
    CredReg(CredentialRegistration),
    CredRevoke { commitment_root: Digest },
    DidRevoke { did: Did },
    Rotate { did: Did, new_public_key: PublicKey },
}

impl TxnPayload {
    pub fn kind(&self) -> TxnKind {
        match self {
            TxnPayload::DidReg { .. } => TxnKind::DidReg,
            TxnPayload::Schema(_) => TxnKind::Schema,
            TxnPayload::CredDef(_) => TxnKind::CredDef,
            TxnPayload::CredReg(_) => TxnKind::CredReg,
            TxnPayload::CredRevoke { .. } => TxnKind::CredRevoke,
            TxnPayload::DidRevoke { .. } => TxnKind::DidRevoke,
            TxnPayload::Rotate { .. } => TxnKind::Rotate,
        }
    }
}

/// Nonce and timestamp attached to every transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxnStamp {
    pub nonce: Nonce,
    pub timestamp: u64,
}

impl TxnStamp {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R, timestamp: u64) -> Self {
        TxnStamp {
            nonce: Nonce::random(rng),
            timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    #[serde(flatten)]
    pub body: TxnPayload,
    pub author: Did,
    pub author_signature: Signature,
    pub nonce: Nonce,
    pub timestamp: u64,
}

#[derive(Serialize)]
struct Signed<'a> {
    #[serde(flatten)]
    body: &'a TxnPayload,
    nonce: &'a Nonce,
    timestamp: u64,
}

impl Transaction {
    pub fn sign(body: TxnPayload, author: Did, key: &KeyPair, stamp: TxnStamp) -> Self {
        let msg = signing_bytes(&body, &stamp.nonce, stamp.timestamp);
        Transaction {
            author_signature: key.sign(&msg),
            body,
            author,
            nonce: stamp.nonce,
            timestamp: stamp.timestamp,
        }
    }

    pub fn kind(&self) -> TxnKind {
        self.body.kind()
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        signing_bytes(&self.body, &self.nonce, self.timestamp)
    }

    pub fn verify_signature(&self, pk: &PublicKey) -> bool {
        verify(pk, &self.signing_bytes(), &self.author_signature)
    }

    pub fn id(&self) -> Digest {
        Digest::of_canonical(self)
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        to_canonical_bytes(self)
    }

    /// Canonical bytes of the kind-specific payload alone.
    pub fn payload_bytes(&self) -> Vec<u8> {
        let v = serde_json::to_value(&self.body).expect("payload serializes");
        to_canonical_bytes(&v["payload"])
    }
}

fn signing_bytes(body: &TxnPayload, nonce: &Nonce, timestamp: u64) -> Vec<u8> {
    to_canonical_bytes(&Signed {
        body,
        nonce,
        timestamp,
    })
}
