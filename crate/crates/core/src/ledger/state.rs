use std::sync::Arc;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use super::block::{Block, Genesis, NodeIdentity};
use super::commitment::StateCommitment;
use super::txn::{CredentialRegistration, Transaction, TxnKind, TxnPayload};
use super::LedgerError;
use crate::credentials::{commitment_root, issuer_signing_bytes, CredentialDefinition, Schema};
use crate::crypto::{verify, Digest, Nonce};
use crate::identity::{Did, DidDocument};

/// Accepted distance between a transaction timestamp and ledger time, seconds.
pub const TIMESTAMP_SKEW_S: u64 = 300;

/// Why the state machine refused a transaction.
#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    Hash,
    PartialOrd,
    Ord,
    Serialize,
    Deserialize,
    thiserror::Error,
)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    #[error("bad signature")]
    BadSignature,
    #[error("replayed (author, nonce)")]
    Replay,
    #[error("timestamp outside the accepted window")]
    StaleTimestamp,
    #[error("author lacks permission for this transaction kind")]
    Permission,
    #[error("author DID is not registered")]
    UnknownAuthor,
    #[error("author DID is revoked")]
    RevokedAuthor,
    #[error("DID does not match its key")]
    DidMismatch,
    #[error("peer DIDs may not be written to the ledger")]
    PeerDidOnLedger,
    #[error("DID already registered")]
    DuplicateDid,
    #[error("schema (name, version) already registered")]
    DuplicateSchema,
    #[error("schema is malformed or its signature is invalid")]
    InvalidSchema,
    #[error("unknown schema")]
    UnknownSchema,
    #[error("credential definition already registered")]
    DuplicateCredDef,
    #[error("credential definition key does not match the issuer's active key")]
    KeyMismatch,
    #[error("unknown credential definition")]
    UnknownCredDef,
    #[error("subject DID is not registered")]
    UnknownSubject,
    #[error("subject DID is revoked")]
    RevokedSubject,
    #[error("credential registration is malformed")]
    MalformedCredential,
    #[error("credential already registered")]
    DuplicateCredential,
    #[error("a live credential already exists for this VIN")]
    DuplicateVin,
    #[error("unknown credential")]
    UnknownCredential,
    #[error("already revoked")]
    AlreadyRevoked,
    #[error("only the original issuer may revoke")]
    NotIssuer,
    #[error("target DID is not registered")]
    UnknownDid,
    #[error("key was already used by this DID")]
    KeyReuse,
}

impl Rejection {
    pub fn code(&self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialRecord {
    pub cred_def_ref: Digest,
    pub issuer: Did,
    pub subject: Did,
    pub subject_public_key: crate::crypto::PublicKey,
    pub issued_at: u64,
    pub vin_tag: Option<Digest>,
    pub revoked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnOutcome {
    pub txn_id: Digest,
    pub kind: TxnKind,
    pub rejection: Option<Rejection>,
}

impl TxnOutcome {
    pub fn accepted(&self) -> bool {
        self.rejection.is_none()
    }
}

/// Result of applying a block: the successor state plus one outcome per transaction.
#[derive(Debug, Clone)]
pub struct AppliedBlock {
    pub state: LedgerState,
    pub outcomes: Vec<TxnOutcome>,
}

const M_DID: &str = "did_documents";
const M_SCHEMA: &str = "schemas";
const M_DEF: &str = "cred_defs";
const M_CRED: &str = "cred_registry";
const M_VIN: &str = "vin_index";
const M_REG: &str = "registrars";
const M_NONCE: &str = "nonces";

/// Replicated ledger state. Cloning is cheap (persistent maps), which makes
/// [`LedgerState::apply_block`] a pure function and snapshots free.
#[derive(Debug, Clone)]
pub struct LedgerState {
    chain_id: Arc<str>,
    height: u64,
    head: Digest,
    time: u64,
    nodes: Arc<[NodeIdentity]>,
    vin_tag_key: Digest,
    did_documents: im::OrdMap<Did, DidDocument>,
    schemas: im::OrdMap<Digest, Schema>,
    schema_names: im::OrdMap<(String, String), Digest>,
    cred_defs: im::OrdMap<Digest, CredentialDefinition>,
    cred_registry: im::OrdMap<Digest, CredentialRecord>,
    vin_index: im::OrdMap<Digest, Digest>,
    registrars: im::OrdSet<Did>,
    seen_nonces: im::OrdSet<(Did, Nonce)>,
    commitment: StateCommitment,
}

/// Immutable, shareable snapshot of committed state.
#[derive(Debug, Clone)]
pub struct LedgerView(Arc<LedgerState>);

impl std::ops::Deref for LedgerView {
    type Target = LedgerState;

    fn deref(&self) -> &LedgerState {
        &self.0
    }
}

impl LedgerState {
    /// Builds the state and block at height 0.
    pub fn genesis(genesis: &Genesis) -> (LedgerState, Block) {
        let mut s = LedgerState {
            chain_id: Arc::from(genesis.chain_id.as_str()),
            height: 0,
            head: Digest::ZERO,
            time: genesis.timestamp,
            nodes: genesis.nodes.clone().into(),
            vin_tag_key: genesis.vin_tag_key,
            did_documents: im::OrdMap::new(),
            schemas: im::OrdMap::new(),
            schema_names: im::OrdMap::new(),
            cred_defs: im::OrdMap::new(),
            cred_registry: im::OrdMap::new(),
            vin_index: im::OrdMap::new(),
            registrars: im::OrdSet::new(),
            seen_nonces: im::OrdSet::new(),
            commitment: StateCommitment::default(),
        };
        for r in &genesis.registrars {
            s.registrars.insert(r.clone());
            s.commitment.put(M_REG, r, &true);
        }
        let root = s.commitment.finalize();
        let block = Block {
            height: 0,
            prev_hash: Digest::ZERO,
            timestamp: genesis.timestamp,
            txns: Vec::new(),
            state_root: root,
            genesis: Some(genesis.clone()),
        };
        s.head = block.hash();
        (s, block)
    }

    pub fn snapshot(&self) -> LedgerView {
        LedgerView(Arc::new(self.clone()))
    }

    pub fn chain_id(&self) -> &str {
        &self.chain_id
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    /// Hash of the last applied block.
    pub fn head(&self) -> Digest {
        self.head
    }

    /// Timestamp of the last applied block.
    pub fn time(&self) -> u64 {
        self.time
    }

    pub fn state_root(&self) -> Digest {
        self.commitment.root()
    }

    pub fn nodes(&self) -> &[NodeIdentity] {
        &self.nodes
    }

    pub fn did_document(&self, did: &Did) -> Option<&DidDocument> {
        self.did_documents.get(did)
    }

    pub fn did_documents(&self) -> impl Iterator<Item = &DidDocument> {
        self.did_documents.values()
    }

    pub fn schema(&self, id: &Digest) -> Option<&Schema> {
        self.schemas.get(id)
    }

    pub fn schema_by_name(&self, name: &str, version: &str) -> Option<&Schema> {
        self.schema_names
            .get(&(name.to_string(), version.to_string()))
            .and_then(|id| self.schemas.get(id))
    }

    pub fn schemas(&self) -> impl Iterator<Item = &Schema> {
        self.schemas.values()
    }

    pub fn cred_def(&self, id: &Digest) -> Option<&CredentialDefinition> {
        self.cred_defs.get(id)
    }

    pub fn cred_defs(&self) -> impl Iterator<Item = (&Digest, &CredentialDefinition)> {
        self.cred_defs.iter()
    }

    /// Credential registry entry by commitment root.
    pub fn credential(&self, root: &Digest) -> Option<&CredentialRecord> {
        self.cred_registry.get(root)
    }

    pub fn credentials(&self) -> impl Iterator<Item = (&Digest, &CredentialRecord)> {
        self.cred_registry.iter()
    }

    pub fn is_registrar(&self, did: &Did) -> bool {
        self.registrars.contains(did)
    }

    pub fn registrars(&self) -> impl Iterator<Item = &Did> {
        self.registrars.iter()
    }

    pub fn has_seen(&self, author: &Did, nonce: &Nonce) -> bool {
        self.seen_nonces.contains(&(author.clone(), *nonce))
    }

    /// Keyed digest of a VIN under the consortium's tag key. Lets the ledger
    /// deduplicate VINs without storing them.
    pub fn vin_tag(&self, vin: &str) -> Digest {
        let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(self.vin_tag_key.as_bytes())
            .expect("HMAC accepts any key length");
        mac.update(vin.trim().as_bytes());
        Digest(mac.finalize().into_bytes().into())
    }

    /// True if an unrevoked credential is registered under this VIN tag.
    pub fn vin_is_live(&self, tag: &Digest) -> bool {
        self.vin_index
            .get(tag)
            .and_then(|root| self.cred_registry.get(root))
            .map(|rec| !rec.revoked)
            .unwrap_or(false)
    }

    /// Number of unrevoked credentials under a VIN tag.
    pub fn live_credentials_for_tag(&self, tag: &Digest) -> usize {
        self.cred_registry
            .values()
            .filter(|r| r.vin_tag.as_ref() == Some(tag) && !r.revoked)
            .count()
    }

    /// Checks a transaction against this state at ledger time `now`.
    pub fn validate_txn(&self, txn: &Transaction, now: u64) -> Result<(), Rejection> {
        if txn.timestamp + TIMESTAMP_SKEW_S < now || txn.timestamp > now + TIMESTAMP_SKEW_S {
            return Err(Rejection::StaleTimestamp);
        }
        if self.has_seen(&txn.author, &txn.nonce) {
            return Err(Rejection::Replay);
        }
        if txn.author.is_peer() {
            return Err(Rejection::PeerDidOnLedger);
        }

        // DID_REG is self-certifying: the author is the DID derived from the payload key.
        if let TxnPayload::DidReg { did, public_key } = &txn.body {
            if did.is_peer() {
                return Err(Rejection::PeerDidOnLedger);
            }
            if *did != txn.author || !did.is_derived_from(public_key) {
                return Err(Rejection::DidMismatch);
            }
            if !txn.verify_signature(public_key) {
                return Err(Rejection::BadSignature);
            }
            if self.did_documents.contains_key(did) {
                return Err(Rejection::DuplicateDid);
            }
            return Ok(());
        }

        match &txn.body {
            TxnPayload::Rotate { did, .. } => {
                if *did != txn.author {
                    return Err(Rejection::Permission);
                }
            }
            _ => {
                if !self.registrars.contains(&txn.author) {
                    return Err(Rejection::Permission);
                }
            }
        }

        let author_doc = self
            .did_documents
            .get(&txn.author)
            .ok_or(Rejection::UnknownAuthor)?;
        if author_doc.revoked {
            return Err(Rejection::RevokedAuthor);
        }
        let author_key = author_doc.active_public_key;
        if !txn.verify_signature(&author_key) {
            return Err(Rejection::BadSignature);
        }

        match &txn.body {
            TxnPayload::DidReg { .. } => unreachable!("handled above"),
            TxnPayload::Schema(schema) => {
                if schema.issuer != txn.author
                    || crate::credentials::check_attribute_names(&schema.attribute_names).is_err()
                    || !schema.verify_signature(&author_key)
                {
                    return Err(Rejection::InvalidSchema);
                }
                if self
                    .schema_names
                    .contains_key(&(schema.name.clone(), schema.version.clone()))
                {
                    return Err(Rejection::DuplicateSchema);
                }
            }
            TxnPayload::CredDef(def) => {
                if def.issuer != txn.author || !def.verify_signature() {
                    return Err(Rejection::InvalidSchema);
                }
                if def.issuer_public_key != author_key {
                    return Err(Rejection::KeyMismatch);
                }
                if !self.schemas.contains_key(&def.schema_ref) {
                    return Err(Rejection::UnknownSchema);
                }
                if self.cred_defs.contains_key(&def.id()) {
                    return Err(Rejection::DuplicateCredDef);
                }
            }
            TxnPayload::CredReg(reg) => self.check_cred_reg(txn, reg, &author_key)?,
            TxnPayload::CredRevoke { commitment_root } => {
                let rec = self
                    .cred_registry
                    .get(commitment_root)
                    .ok_or(Rejection::UnknownCredential)?;
                if rec.issuer != txn.author {
                    return Err(Rejection::NotIssuer);
                }
                if rec.revoked {
                    return Err(Rejection::AlreadyRevoked);
                }
            }
            TxnPayload::DidRevoke { did } => {
                let doc = self.did_documents.get(did).ok_or(Rejection::UnknownDid)?;
                if doc.revoked {
                    return Err(Rejection::AlreadyRevoked);
                }
            }
            TxnPayload::Rotate { new_public_key, .. } => {
                if author_doc.has_used_key(new_public_key) {
                    return Err(Rejection::KeyReuse);
                }
            }
        }
        Ok(())
    }

    fn check_cred_reg(
        &self,
        txn: &Transaction,
        reg: &CredentialRegistration,
        author_key: &crate::crypto::PublicKey,
    ) -> Result<(), Rejection> {
        let def = self
            .cred_defs
            .get(&reg.cred_def_ref)
            .ok_or(Rejection::UnknownCredDef)?;
        if def.issuer != txn.author {
            return Err(Rejection::NotIssuer);
        }
        let schema = self
            .schemas
            .get(&def.schema_ref)
            .ok_or(Rejection::UnknownSchema)?;
        let subject = self
            .did_documents
            .get(&reg.subject)
            .ok_or(Rejection::UnknownSubject)?;
        if subject.revoked {
            return Err(Rejection::RevokedSubject);
        }
        let names: std::collections::BTreeSet<&str> =
            reg.commitments.keys().map(String::as_str).collect();
        if names != schema.attribute_set()
            || commitment_root(&reg.commitments) != reg.commitment_root
            || schema.has_vin() != reg.vin_tag.is_some()
        {
            return Err(Rejection::MalformedCredential);
        }
        let msg = issuer_signing_bytes(
            &reg.cred_def_ref,
            &reg.subject,
            &reg.subject_public_key,
            &reg.commitment_root,
            reg.issued_at,
        );
        if !verify(author_key, &msg, &reg.issuer_signature) {
            return Err(Rejection::MalformedCredential);
        }
        if self.cred_registry.contains_key(&reg.commitment_root) {
            return Err(Rejection::DuplicateCredential);
        }
        if let Some(tag) = &reg.vin_tag {
            if self.vin_is_live(tag) {
                return Err(Rejection::DuplicateVin);
            }
        }
        Ok(())
    }

    /// Applies a transaction already known to be valid.
    fn apply_txn(&mut self, txn: &Transaction, at: u64) {
        self.seen_nonces.insert((txn.author.clone(), txn.nonce));
        self.commitment
            .put(M_NONCE, &(&txn.author, &txn.nonce), &true);
        match &txn.body {
            TxnPayload::DidReg { did, public_key } => {
                let doc = DidDocument::new(did.clone(), *public_key, at);
                self.put_did(doc);
            }
            TxnPayload::Schema(schema) => {
                let id = schema.id();
                self.schema_names
                    .insert((schema.name.clone(), schema.version.clone()), id);
                self.commitment.put(M_SCHEMA, &id, schema);
                self.schemas.insert(id, schema.clone());
            }
            TxnPayload::CredDef(def) => {
                let id = def.id();
                self.commitment.put(M_DEF, &id, def);
                self.cred_defs.insert(id, def.clone());
            }
            TxnPayload::CredReg(reg) => {
                let rec = CredentialRecord {
                    cred_def_ref: reg.cred_def_ref,
                    issuer: txn.author.clone(),
                    subject: reg.subject.clone(),
                    subject_public_key: reg.subject_public_key,
                    issued_at: reg.issued_at,
                    vin_tag: reg.vin_tag,
                    revoked: false,
                };
                if let Some(tag) = reg.vin_tag {
                    self.commitment.put(M_VIN, &tag, &reg.commitment_root);
                    self.vin_index.insert(tag, reg.commitment_root);
                }
                self.put_cred(reg.commitment_root, rec);
            }
            TxnPayload::CredRevoke { commitment_root } => {
                let mut rec = self.cred_registry[commitment_root].clone();
                rec.revoked = true;
                self.put_cred(*commitment_root, rec);
            }
            TxnPayload::DidRevoke { did } => {
                let mut doc = self.did_documents[did].clone();
                doc.revoke(at);
                self.put_did(doc);
            }
            TxnPayload::Rotate {
                did,
                new_public_key,
            } => {
                let mut doc = self.did_documents[did].clone();
                doc.rotate(*new_public_key, at);
                self.put_did(doc);
            }
        }
    }

    fn put_did(&mut self, doc: DidDocument) {
        self.commitment.put(M_DID, &doc.id, &doc);
        self.did_documents.insert(doc.id.clone(), doc);
    }

    fn put_cred(&mut self, root: Digest, rec: CredentialRecord) {
        self.commitment.put(M_CRED, &root, &rec);
        self.cred_registry.insert(root, rec);
    }

    /// Executes `txns` in order at ledger time `timestamp`. Invalid
    /// transactions are skipped and recorded; the result is not yet bound to
    /// a block header.
    fn execute(&self, txns: &[Transaction], timestamp: u64) -> (LedgerState, Vec<TxnOutcome>) {
        let mut next = self.clone();
        let mut outcomes = Vec::with_capacity(txns.len());
        for txn in txns {
            let rejection = next.validate_txn(txn, timestamp).err();
            if rejection.is_none() {
                next.apply_txn(txn, timestamp);
            }
            outcomes.push(TxnOutcome {
                txn_id: txn.id(),
                kind: txn.kind(),
                rejection,
            });
        }
        next.commitment.finalize();
        (next, outcomes)
    }

    /// Builds the next block over `txns`, filling in the resulting state root.
    pub fn propose_block(&self, txns: Vec<Transaction>, timestamp: u64) -> (Block, AppliedBlock) {
        let timestamp = timestamp.max(self.time);
        let (mut state, outcomes) = self.execute(&txns, timestamp);
        let block = Block {
            height: self.height + 1,
            prev_hash: self.head,
            timestamp,
            txns,
            state_root: state.commitment.root(),
            genesis: None,
        };
        state.height = block.height;
        state.head = block.hash();
        state.time = timestamp;
        (block, AppliedBlock { state, outcomes })
    }

    /// Pure state transition: checks linkage, executes every transaction in
    /// order, and checks the resulting state root against the header.
    pub fn apply_block(&self, block: &Block) -> Result<AppliedBlock, LedgerError> {
        if block.height != self.height + 1 {
            return Err(LedgerError::HeightMismatch {
                expected: self.height + 1,
                found: block.height,
            });
        }
        if block.prev_hash != self.head {
            return Err(LedgerError::BrokenChain {
                height: block.height,
            });
        }
        if block.timestamp < self.time {
            return Err(LedgerError::TimeRegression {
                height: block.height,
            });
        }
        if block.genesis.is_some() {
            return Err(LedgerError::UnexpectedGenesis);
        }
        let (mut state, outcomes) = self.execute(&block.txns, block.timestamp);
        if state.commitment.root() != block.state_root {
            return Err(LedgerError::StateRootMismatch {
                height: block.height,
            });
        }
        state.height = block.height;
        state.head = block.hash();
        state.time = block.timestamp;
        Ok(AppliedBlock { state, outcomes })
    }

    /// Replays a chain starting at its genesis block.
    pub fn replay(blocks: &[Block]) -> Result<LedgerState, LedgerError> {
        let first = blocks.first().ok_or(LedgerError::MissingGenesis)?;
        let genesis = first.genesis.as_ref().ok_or(LedgerError::MissingGenesis)?;
        let (mut state, g) = LedgerState::genesis(genesis);
        if g.hash() != first.hash() {
            return Err(LedgerError::BrokenChain { height: 0 });
        }
        for b in &blocks[1..] {
            state = state.apply_block(b)?.state;
        }
        Ok(state)
    }
}

/// Free-function form of [`LedgerState::validate_txn`] at the state's own clock.
pub fn validate_txn(state: &LedgerState, txn: &Transaction) -> Result<(), Rejection> {
    state.validate_txn(txn, state.time())
}

pub fn apply_block(state: &LedgerState, block: &Block) -> Result<AppliedBlock, LedgerError> {
    state.apply_block(block)
}

pub fn snapshot(state: &LedgerState) -> LedgerView {
    state.snapshot()
}
