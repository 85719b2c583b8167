//! Schemas, credential definitions, issuance, selective-disclosure
//! presentations and their verification.
//!
//! Selective disclosure uses one salted SHA-256 commitment per attribute.
//! The issuer signs the root over all commitments; a presentation opens the
//! requested attributes (value and salt) and passes the remaining commitments
//! through unchanged, so the verifier can rebuild the signed root without
//! learning hidden values.

mod model;
pub mod vin;

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore};

pub(crate) use model::check_attribute_names;
pub use model::{
    commit, commitment_root, issuer_signing_bytes, Claim, ClaimSet, CredentialCore,
    CredentialDefinition, HeldCredential, Presentation, Proof, ProofRequest, Salt, Schema,
    VerifiableCredential, VIN_ATTRIBUTE,
};
pub use vin::is_valid_vin;

use crate::crypto::{Digest, KeyPair, Nonce};
use crate::identity::{Did, IdentityError, KeyStore};
use crate::ledger::{CredentialRegistration, LedgerView, Transaction, TxnPayload, TxnStamp};

/// Maximum age of a proof request, and maximum clock skew, in seconds.
pub const FRESHNESS_WINDOW_S: u64 = 300;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CredentialError {
    #[error("attribute list is empty")]
    EmptyAttributes,
    #[error("duplicate attribute {0:?}")]
    DuplicateAttribute(String),
    #[error("invalid value for attribute {0:?}")]
    InvalidAttribute(String),
    #[error("attributes do not include VIN")]
    MissingVin,
    #[error("VIN {0:?} fails the ISO 3779 check")]
    InvalidVin(String),
    #[error("a live credential already exists for this VIN")]
    DuplicateVin,
    #[error("schema does not include VIN")]
    SchemaWithoutVin,
    #[error("unknown credential definition {0}")]
    UnknownCredDef(Digest),
    #[error("unknown schema {0}")]
    UnknownSchema(Digest),
    #[error("attributes do not match the schema")]
    AttributeMismatch,
    #[error("attribute {0:?} is not in the schema")]
    NotInSchema(String),
    #[error("unknown credential {0}")]
    UnknownCredential(Digest),
    #[error("only the original issuer may do this")]
    NotIssuer,
    #[error(transparent)]
    Identity(#[from] IdentityError),
}

/// Why a presentation was rejected. Each conjunct of the acceptance rule has its own code.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "kebab-case")]
pub enum VerifyFailure {
    EmptyRequest,
    NonceMismatch,
    Replay,
    Expired,
    UnknownSubject,
    RevokedSubject,
    InvalidHolderSignature,
    UnknownCredentialDefinition,
    UnknownSchema,
    AttributeSetMismatch,
    MissingAttribute,
    CommitmentMismatch,
    UntrustedIssuer,
    UnknownIssuer,
    RevokedIssuer,
    InvalidIssuerSignature,
    CredentialMismatch,
    RevokedCredential,
}

impl VerifyFailure {
    pub fn code(&self) -> &'static str {
        match self {
            VerifyFailure::EmptyRequest => "empty-request",
            VerifyFailure::NonceMismatch => "nonce-mismatch",
            VerifyFailure::Replay => "replay",
            VerifyFailure::Expired => "expired",
            VerifyFailure::UnknownSubject => "unknown-subject",
            VerifyFailure::RevokedSubject => "revoked-subject",
            VerifyFailure::InvalidHolderSignature => "invalid-holder-signature",
            VerifyFailure::UnknownCredentialDefinition => "unknown-credential-definition",
            VerifyFailure::UnknownSchema => "unknown-schema",
            VerifyFailure::AttributeSetMismatch => "attribute-set-mismatch",
            VerifyFailure::MissingAttribute => "missing-attribute",
            VerifyFailure::CommitmentMismatch => "commitment-mismatch",
            VerifyFailure::UntrustedIssuer => "untrusted-issuer",
            VerifyFailure::UnknownIssuer => "unknown-issuer",
            VerifyFailure::RevokedIssuer => "revoked-issuer",
            VerifyFailure::InvalidIssuerSignature => "invalid-issuer-signature",
            VerifyFailure::CredentialMismatch => "credential-mismatch",
            VerifyFailure::RevokedCredential => "revoked-credential",
        }
    }
}

impl std::fmt::Display for VerifyFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

/// Creates and signs a schema, plus the SCHEMA transaction that registers it.
pub fn schema_gen(
    keys: &KeyStore,
    registrar: &Did,
    name: &str,
    version: &str,
    attribute_names: Vec<String>,
    stamp: TxnStamp,
) -> Result<(Schema, Transaction), CredentialError> {
    let kp = keys.get(registrar)?;
    let schema = Schema::new(name, version, attribute_names, registrar.clone(), kp)?;
    let txn = Transaction::sign(
        TxnPayload::Schema(schema.clone()),
        registrar.clone(),
        kp,
        stamp,
    );
    Ok((schema, txn))
}

pub fn def_gen(
    keys: &KeyStore,
    registrar: &Did,
    schema: &Schema,
    stamp: TxnStamp,
) -> Result<(CredentialDefinition, Transaction), CredentialError> {
    let kp = keys.get(registrar)?;
    let def = CredentialDefinition::new(schema, registrar.clone(), kp);
    let txn = Transaction::sign(
        TxnPayload::CredDef(def.clone()),
        registrar.clone(),
        kp,
        stamp,
    );
    Ok((def, txn))
}

/// Issues a VIN credential.
///
/// Validity: the VIN must be 17 ISO 3779 characters with a correct check
/// digit, every other attribute nonempty, and no live credential may exist
/// for the VIN in `view`.
#[allow(clippy::too_many_arguments)]
pub fn issue_credential<R: RngCore + CryptoRng>(
    rng: &mut R,
    keys: &KeyStore,
    registrar: &Did,
    view: &LedgerView,
    cred_def_ref: &Digest,
    subject: &Did,
    subject_pk: &crate::crypto::PublicKey,
    attributes: &BTreeMap<String, String>,
    stamp: TxnStamp,
) -> Result<(HeldCredential, Transaction), CredentialError> {
    let vin = attributes
        .get(VIN_ATTRIBUTE)
        .ok_or(CredentialError::MissingVin)?;
    if !is_valid_vin(vin) {
        return Err(CredentialError::InvalidVin(vin.clone()));
    }
    let tag = view.vin_tag(vin);
    if view.vin_is_live(&tag) {
        return Err(CredentialError::DuplicateVin);
    }
    issue_inner(
        rng,
        keys,
        registrar,
        view,
        cred_def_ref,
        subject,
        subject_pk,
        attributes,
        Some(tag),
        stamp,
    )
}

/// Issues a credential over a schema without a VIN (service-provider and
/// regular credentials). Same pipeline, no uniqueness index.
#[allow(clippy::too_many_arguments)]
pub fn issue_generic_credential<R: RngCore + CryptoRng>(
    rng: &mut R,
    keys: &KeyStore,
    issuer: &Did,
    view: &LedgerView,
    cred_def_ref: &Digest,
    subject: &Did,
    subject_pk: &crate::crypto::PublicKey,
    attributes: &BTreeMap<String, String>,
    stamp: TxnStamp,
) -> Result<(HeldCredential, Transaction), CredentialError> {
    issue_inner(
        rng,
        keys,
        issuer,
        view,
        cred_def_ref,
        subject,
        subject_pk,
        attributes,
        None,
        stamp,
    )
}

#[allow(clippy::too_many_arguments)]
fn issue_inner<R: RngCore + CryptoRng>(
    rng: &mut R,
    keys: &KeyStore,
    issuer: &Did,
    view: &LedgerView,
    cred_def_ref: &Digest,
    subject: &Did,
    subject_pk: &crate::crypto::PublicKey,
    attributes: &BTreeMap<String, String>,
    vin_tag: Option<Digest>,
    stamp: TxnStamp,
) -> Result<(HeldCredential, Transaction), CredentialError> {
    let kp = keys.get(issuer)?;
    let def = view
        .cred_def(cred_def_ref)
        .ok_or(CredentialError::UnknownCredDef(*cred_def_ref))?;
    if def.issuer != *issuer {
        return Err(CredentialError::NotIssuer);
    }
    let schema = view
        .schema(&def.schema_ref)
        .ok_or(CredentialError::UnknownSchema(def.schema_ref))?;
    if vin_tag.is_none() && schema.has_vin() {
        return Err(CredentialError::MissingVin);
    }
    if vin_tag.is_some() && !schema.has_vin() {
        return Err(CredentialError::SchemaWithoutVin);
    }
    let names: BTreeSet<&str> = attributes.keys().map(String::as_str).collect();
    if names != schema.attribute_set() {
        return Err(CredentialError::AttributeMismatch);
    }
    if let Some((name, _)) = attributes.iter().find(|(_, v)| v.trim().is_empty()) {
        return Err(CredentialError::InvalidAttribute(name.clone()));
    }

    let claims: ClaimSet = attributes
        .iter()
        .map(|(k, v)| {
            (
                k.clone(),
                Claim {
                    value: v.clone(),
                    salt: Salt::random(rng),
                },
            )
        })
        .collect();
    let commitments: BTreeMap<String, Digest> = claims
        .iter()
        .map(|(k, c)| (k.clone(), c.commitment(k)))
        .collect();
    let root = commitment_root(&commitments);
    let issued_at = stamp.timestamp;
    let issuer_signature = kp.sign(&issuer_signing_bytes(
        cred_def_ref,
        subject,
        subject_pk,
        &root,
        issued_at,
    ));

    let credential = VerifiableCredential {
        cred_def_ref: *cred_def_ref,
        issuer: issuer.clone(),
        subject: subject.clone(),
        subject_public_key: *subject_pk,
        commitments: commitments.clone(),
        issued_at,
        issuer_signature,
    };
    let reg = CredentialRegistration {
        cred_def_ref: *cred_def_ref,
        commitment_root: root,
        commitments,
        subject: subject.clone(),
        subject_public_key: *subject_pk,
        issued_at,
        issuer_signature,
        vin_tag,
    };
    let txn = Transaction::sign(TxnPayload::CredReg(reg), issuer.clone(), kp, stamp);
    Ok((HeldCredential { credential, claims }, txn))
}

/// Builds a presentation revealing exactly the requested attributes.
pub fn proof_gen(
    holder_key: &KeyPair,
    held: &HeldCredential,
    request: &ProofRequest,
) -> Result<Presentation, CredentialError> {
    if request.requested_attributes.is_empty() {
        return Err(CredentialError::EmptyAttributes);
    }
    let requested: BTreeSet<&str> = request
        .requested_attributes
        .iter()
        .map(String::as_str)
        .collect();
    for name in &requested {
        if !held.claims.contains_key(*name) {
            return Err(CredentialError::NotInSchema(name.to_string()));
        }
    }
    let mut revealed = BTreeMap::new();
    let mut hidden = BTreeMap::new();
    for (name, claim) in &held.claims {
        if requested.contains(name.as_str()) {
            revealed.insert(name.clone(), claim.clone());
        } else {
            hidden.insert(name.clone(), held.credential.commitments[name]);
        }
    }
    let proof = Proof {
        revealed,
        hidden_commitments: hidden,
        credential: held.credential.core(),
    };
    let sig = holder_key.sign(&Presentation::holder_signing_bytes(&proof, &request.nonce));
    Ok(Presentation {
        proof,
        challenge_nonce: request.nonce,
        holder_signature: sig,
    })
}

/// Checks a presentation against a request and a committed ledger snapshot.
///
/// Replay across calls is not tracked here; see [`ChallengeBook`].
pub fn verify_presentation(
    view: &LedgerView,
    presentation: &Presentation,
    request: &ProofRequest,
    now: u64,
) -> Result<(), VerifyFailure> {
    use VerifyFailure::*;

    if request.requested_attributes.is_empty() {
        return Err(EmptyRequest);
    }
    if presentation.challenge_nonce != request.nonce {
        return Err(NonceMismatch);
    }
    if now > request.issued_at + FRESHNESS_WINDOW_S || request.issued_at > now + FRESHNESS_WINDOW_S
    {
        return Err(Expired);
    }

    let proof = &presentation.proof;
    let core = &proof.credential;

    // holder: resolvable, unrevoked, and signing with its active key
    let subject_doc = if core.subject.is_peer() {
        None
    } else {
        view.did_document(&core.subject)
    };
    let subject_doc = subject_doc.ok_or(UnknownSubject)?;
    if subject_doc.revoked {
        return Err(RevokedSubject);
    }
    if !presentation.verify_holder_signature(&subject_doc.active_public_key) {
        return Err(InvalidHolderSignature);
    }

    // attribute coverage
    let def = view
        .cred_def(&core.cred_def_ref)
        .ok_or(UnknownCredentialDefinition)?;
    let schema = view.schema(&def.schema_ref).ok_or(UnknownSchema)?;
    let commitments = proof.recomputed_commitments().ok_or(AttributeSetMismatch)?;
    let covered: BTreeSet<&str> = commitments.keys().map(String::as_str).collect();
    if covered != schema.attribute_set() {
        return Err(AttributeSetMismatch);
    }
    if request
        .requested_attributes
        .iter()
        .any(|a| !proof.revealed.contains_key(a))
    {
        return Err(MissingAttribute);
    }

    // the rebuilt root must be a registered credential
    let root = commitment_root(&commitments);
    let record = view.credential(&root).ok_or(CommitmentMismatch)?;

    // issuer trust is taken from the ledger's registrar set, not from the prover
    if def.issuer != core.issuer || !view.is_registrar(&core.issuer) {
        return Err(UntrustedIssuer);
    }
    let issuer_doc = view.did_document(&core.issuer).ok_or(UnknownIssuer)?;
    if issuer_doc.revoked {
        return Err(RevokedIssuer);
    }
    let issuer_key = issuer_doc
        .key_at(core.issued_at)
        .ok_or(InvalidIssuerSignature)?;
    let msg = issuer_signing_bytes(
        &core.cred_def_ref,
        &core.subject,
        &core.subject_public_key,
        &root,
        core.issued_at,
    );
    if !crate::crypto::verify(&issuer_key, &msg, &core.issuer_signature) {
        return Err(InvalidIssuerSignature);
    }
    if record.subject != core.subject
        || record.issuer != core.issuer
        || record.cred_def_ref != core.cred_def_ref
        || record.issued_at != core.issued_at
    {
        return Err(CredentialMismatch);
    }
    if record.revoked {
        return Err(RevokedCredential);
    }
    Ok(())
}

/// Builds a CRED_REVOKE transaction for a credential this registrar issued.
pub fn revoke_credential(
    keys: &KeyStore,
    registrar: &Did,
    view: &LedgerView,
    commitment_root: &Digest,
    stamp: TxnStamp,
) -> Result<Transaction, CredentialError> {
    let kp = keys.get(registrar)?;
    let record = view
        .credential(commitment_root)
        .ok_or(CredentialError::UnknownCredential(*commitment_root))?;
    if record.issuer != *registrar {
        return Err(CredentialError::NotIssuer);
    }
    Ok(Transaction::sign(
        TxnPayload::CredRevoke {
            commitment_root: *commitment_root,
        },
        registrar.clone(),
        kp,
        stamp,
    ))
}

/// Verifier-side record of issued challenges. Each nonce is accepted at most
/// once; answered nonces are kept until they fall out of the freshness window.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ChallengeBook {
    outstanding: BTreeMap<Nonce, ProofRequest>,
    consumed: BTreeMap<Nonce, u64>,
}

impl ChallengeBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn issue<R: RngCore + CryptoRng>(
        &mut self,
        rng: &mut R,
        requested: Vec<String>,
        verifier: Did,
        now: u64,
    ) -> Result<ProofRequest, CredentialError> {
        self.prune(now);
        let req = ProofRequest::new(rng, requested, verifier, now)?;
        self.outstanding.insert(req.nonce, req.clone());
        Ok(req)
    }

    pub fn request(&self, nonce: &Nonce) -> Option<&ProofRequest> {
        self.outstanding.get(nonce)
    }

    /// Verifies a presentation answering `nonce`, consuming the challenge.
    pub fn check(
        &mut self,
        view: &LedgerView,
        nonce: &Nonce,
        presentation: &Presentation,
        now: u64,
    ) -> Result<(), VerifyFailure> {
        if self.consumed.contains_key(nonce)
            || self.consumed.contains_key(&presentation.challenge_nonce)
        {
            return Err(VerifyFailure::Replay);
        }
        let request = self
            .outstanding
            .remove(nonce)
            .ok_or(VerifyFailure::NonceMismatch)?;
        self.consumed.insert(request.nonce, request.issued_at);
        verify_presentation(view, presentation, &request, now)
    }

    pub fn outstanding_len(&self) -> usize {
        self.outstanding.len()
    }

    fn prune(&mut self, now: u64) {
        let horizon = now.saturating_sub(2 * FRESHNESS_WINDOW_S);
        self.consumed.retain(|_, issued| *issued >= horizon);
        self.outstanding.retain(|_, r| r.issued_at >= horizon);
    }
}

#[cfg(test)]
mod tests;
