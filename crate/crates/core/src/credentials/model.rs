use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::CredentialError;
use crate::crypto::bytes::hex_bytes;
use crate::crypto::{to_canonical_bytes, verify, Digest, KeyPair, Nonce, PublicKey, Signature};
use crate::identity::Did;

hex_bytes!(
    /// Per-attribute blinding salt.
    Salt,
    16
);

impl Salt {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        Salt(b)
    }
}

pub const VIN_ATTRIBUTE: &str = "VIN";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub name: String,
    pub version: String,
    pub attribute_names: Vec<String>,
    pub issuer: Did,
    pub signature: Signature,
}

#[derive(Serialize)]
struct SchemaBody<'a> {
    name: &'a str,
    version: &'a str,
    attribute_names: &'a [String],
    issuer: &'a Did,
}

impl Schema {
    pub fn new(
        name: &str,
        version: &str,
        attribute_names: Vec<String>,
        issuer: Did,
        key: &KeyPair,
    ) -> Result<Self, CredentialError> {
        check_attribute_names(&attribute_names)?;
        let mut s = Schema {
            name: name.to_string(),
            version: version.to_string(),
            attribute_names,
            issuer,
            signature: Signature([0; 64]),
        };
        s.signature = key.sign(&s.signing_bytes());
        Ok(s)
    }

    fn signing_bytes(&self) -> Vec<u8> {
        to_canonical_bytes(&SchemaBody {
            name: &self.name,
            version: &self.version,
            attribute_names: &self.attribute_names,
            issuer: &self.issuer,
        })
    }

    /// Content address of the unsigned body.
    pub fn id(&self) -> Digest {
        Digest::of(&self.signing_bytes())
    }

    pub fn verify_signature(&self, pk: &PublicKey) -> bool {
        verify(pk, &self.signing_bytes(), &self.signature)
    }

    pub fn has_vin(&self) -> bool {
        self.attribute_names.iter().any(|a| a == VIN_ATTRIBUTE)
    }

    pub fn attribute_set(&self) -> BTreeSet<&str> {
        self.attribute_names.iter().map(String::as_str).collect()
    }
}

pub(crate) fn check_attribute_names(names: &[String]) -> Result<(), CredentialError> {
    if names.is_empty() {
        return Err(CredentialError::EmptyAttributes);
    }
    let mut seen = BTreeSet::new();
    for n in names {
        if n.is_empty() {
            return Err(CredentialError::InvalidAttribute(n.clone()));
        }
        if !seen.insert(n.as_str()) {
            return Err(CredentialError::DuplicateAttribute(n.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialDefinition {
    pub schema_ref: Digest,
    pub issuer: Did,
    pub issuer_public_key: PublicKey,
    pub signature: Signature,
}

#[derive(Serialize)]
struct DefBody<'a> {
    schema_ref: &'a Digest,
    issuer: &'a Did,
    issuer_public_key: &'a PublicKey,
}

impl CredentialDefinition {
    pub fn new(schema: &Schema, issuer: Did, key: &KeyPair) -> Self {
        let mut d = CredentialDefinition {
            schema_ref: schema.id(),
            issuer,
            issuer_public_key: key.public_key(),
            signature: Signature([0; 64]),
        };
        d.signature = key.sign(&d.signing_bytes());
        d
    }

    fn signing_bytes(&self) -> Vec<u8> {
        to_canonical_bytes(&DefBody {
            schema_ref: &self.schema_ref,
            issuer: &self.issuer,
            issuer_public_key: &self.issuer_public_key,
        })
    }

    pub fn id(&self) -> Digest {
        Digest::of(&self.signing_bytes())
    }

    pub fn verify_signature(&self) -> bool {
        verify(
            &self.issuer_public_key,
            &self.signing_bytes(),
            &self.signature,
        )
    }
}

/// A disclosed attribute value together with its blinding salt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub value: String,
    pub salt: Salt,
}

impl Claim {
    pub fn commitment(&self, name: &str) -> Digest {
        commit(name, &self.value, &self.salt)
    }
}

pub type ClaimSet = BTreeMap<String, Claim>;

/// Salted hash commitment to one attribute: H(salt ‖ name ‖ value), length-prefixed.
pub fn commit(name: &str, value: &str, salt: &Salt) -> Digest {
    Digest::of_parts(&[salt.as_bytes(), name.as_bytes(), value.as_bytes()])
}

/// Root over per-attribute commitments, taken in attribute-name order.
pub fn commitment_root(commitments: &BTreeMap<String, Digest>) -> Digest {
    let mut parts: Vec<&[u8]> = Vec::with_capacity(1 + 2 * commitments.len());
    parts.push(b"vdkms/commitment-root/v1");
    for (name, d) in commitments {
        parts.push(name.as_bytes());
        parts.push(d.as_bytes());
    }
    Digest::of_parts(&parts)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiableCredential {
    pub cred_def_ref: Digest,
    pub issuer: Did,
    pub subject: Did,
    pub subject_public_key: PublicKey,
    pub commitments: BTreeMap<String, Digest>,
    pub issued_at: u64,
    pub issuer_signature: Signature,
}

#[derive(Serialize)]
struct IssuerSigned<'a> {
    cred_def_ref: &'a Digest,
    subject: &'a Did,
    subject_public_key: &'a PublicKey,
    commitment_root: &'a Digest,
    issued_at: u64,
}

/// Bytes the issuer signs for a credential.
pub fn issuer_signing_bytes(
    cred_def_ref: &Digest,
    subject: &Did,
    subject_public_key: &PublicKey,
    root: &Digest,
    issued_at: u64,
) -> Vec<u8> {
    to_canonical_bytes(&IssuerSigned {
        cred_def_ref,
        subject,
        subject_public_key,
        commitment_root: root,
        issued_at,
    })
}

impl VerifiableCredential {
    pub fn commitment_root(&self) -> Digest {
        commitment_root(&self.commitments)
    }

    pub fn core(&self) -> CredentialCore {
        CredentialCore {
            cred_def_ref: self.cred_def_ref,
            issuer: self.issuer.clone(),
            subject: self.subject.clone(),
            subject_public_key: self.subject_public_key,
            issued_at: self.issued_at,
            issuer_signature: self.issuer_signature,
        }
    }

    pub fn verify_issuer_signature(&self, issuer_key: &PublicKey) -> bool {
        let msg = issuer_signing_bytes(
            &self.cred_def_ref,
            &self.subject,
            &self.subject_public_key,
            &self.commitment_root(),
            self.issued_at,
        );
        verify(issuer_key, &msg, &self.issuer_signature)
    }
}

/// What the holder keeps: the signed credential plus the opening of every commitment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldCredential {
    pub credential: VerifiableCredential,
    pub claims: ClaimSet,
}

impl HeldCredential {
    pub fn attribute(&self, name: &str) -> Option<&str> {
        self.claims.get(name).map(|c| c.value.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofRequest {
    pub requested_attributes: Vec<String>,
    pub nonce: Nonce,
    pub verifier: Did,
    pub issued_at: u64,
}

impl ProofRequest {
    pub fn new<R: RngCore + CryptoRng>(
        rng: &mut R,
        requested_attributes: Vec<String>,
        verifier: Did,
        now: u64,
    ) -> Result<Self, CredentialError> {
        if requested_attributes.is_empty() {
            return Err(CredentialError::EmptyAttributes);
        }
        Ok(ProofRequest {
            requested_attributes,
            nonce: Nonce::random(rng),
            verifier,
            issued_at: now,
        })
    }

    /// The VIN challenge: requests exactly `["VIN"]`.
    pub fn vin_challenge<R: RngCore + CryptoRng>(rng: &mut R, verifier: Did, now: u64) -> Self {
        Self::new(rng, vec![VIN_ATTRIBUTE.to_string()], verifier, now).expect("nonempty")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialCore {
    pub cred_def_ref: Digest,
    pub issuer: Did,
    pub subject: Did,
    pub subject_public_key: PublicKey,
    pub issued_at: u64,
    pub issuer_signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proof {
    pub revealed: BTreeMap<String, Claim>,
    pub hidden_commitments: BTreeMap<String, Digest>,
    pub credential: CredentialCore,
}

impl Proof {
    /// Commitments recomputed from revealed openings merged with hidden ones.
    /// `None` if an attribute appears on both sides.
    pub fn recomputed_commitments(&self) -> Option<BTreeMap<String, Digest>> {
        let mut all = self.hidden_commitments.clone();
        for (name, claim) in &self.revealed {
            if all.insert(name.clone(), claim.commitment(name)).is_some() {
                return None;
            }
        }
        Some(all)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presentation {
    pub proof: Proof,
    pub challenge_nonce: Nonce,
    pub holder_signature: Signature,
}

#[derive(Serialize)]
struct HolderSigned<'a> {
    proof: &'a Proof,
    challenge_nonce: &'a Nonce,
}

impl Presentation {
    pub fn holder_signing_bytes(proof: &Proof, nonce: &Nonce) -> Vec<u8> {
        to_canonical_bytes(&HolderSigned {
            proof,
            challenge_nonce: nonce,
        })
    }

    pub fn verify_holder_signature(&self, pk: &PublicKey) -> bool {
        verify(
            pk,
            &Self::holder_signing_bytes(&self.proof, &self.challenge_nonce),
            &self.holder_signature,
        )
    }
}
