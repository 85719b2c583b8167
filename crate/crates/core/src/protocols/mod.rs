//! End-to-end workflows between registrars, vehicles and service providers:
//! provisioning, registration, credential verification and authorization,
//! plus the pairwise channels and microledgers that authorization leaves
//! behind.
//!
//! Agents exchange signed [`Envelope`]s. Each agent handles one envelope at a
//! time; the functions at the bottom of this module wire a complete exchange
//! together over direct calls.

mod agents;
mod channel;
mod envelope;
mod microledger;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{CryptoRng, RngCore};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use agents::{
    Event, Handled, Party, ProvisionReport, RegistrarAgent, SchemaSpec, ServiceProviderAgent,
    VehicleAgent,
};
pub use channel::{channel_recv, channel_send, SessionChannel};
pub use envelope::{Body, Envelope, Message, ReplayGuard, MESSAGE_WINDOW_S};
pub use microledger::{Microledger, MicroledgerTxn};

use crate::credentials::{
    CredentialDefinition, CredentialError, Schema, VerifiableCredential, VerifyFailure,
};
use crate::crypto::{CryptoError, KdfParams, WalletFile};
use crate::embedded::{ClientError, LedgerClient};
use crate::identity::{Did, IdentityError};
use crate::ledger::Rejection;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Ledger(#[from] ClientError),
    #[error("ledger rejected the transaction: {0}")]
    Rejected(Rejection),
    #[error(transparent)]
    Credential(#[from] CredentialError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error("verification failed: {0}")]
    Verification(VerifyFailure),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("replayed envelope")]
    Replay,
    #[error("envelope timestamp outside the accepted window")]
    Stale,
    #[error("bad envelope signature")]
    BadSignature,
    #[error("envelope could not be decrypted")]
    Decrypt,
    #[error("channel counter went from {last} to {got}")]
    CounterRegression { got: u64, last: u64 },
    #[error("unknown sender {0}")]
    UnknownSender(Did),
    #[error("sender {0} is revoked")]
    RevokedSender(Did),
    #[error("envelope addressed to someone else")]
    WrongRecipient,
    #[error("unexpected message: {0}")]
    UnexpectedMessage(&'static str),
    #[error("{0} has not passed verification")]
    NotVerified(Did),
    #[error("no credential held")]
    NoCredential,
    #[error("registration refused: {0}")]
    RegistrationRefused(String),
    #[error("agent is not provisioned")]
    NotProvisioned,
}

impl ProtocolError {
    /// Short machine-readable reason.
    pub fn code(&self) -> String {
        use ProtocolError::*;
        match self {
            Ledger(e) if e.is_retriable() => "ledger-unavailable".into(),
            Ledger(_) => "ledger-error".into(),
            Rejected(r) => r.code(),
            Credential(CredentialError::InvalidVin(_)) => "invalid-vin".into(),
            Credential(CredentialError::DuplicateVin) => "duplicate-vin".into(),
            Credential(CredentialError::MissingVin) => "missing-vin".into(),
            Credential(_) => "invalid-request".into(),
            Identity(_) => "identity".into(),
            Verification(f) => f.code().into(),
            Crypto(_) => "crypto".into(),
            Replay => "replay".into(),
            Stale => "stale".into(),
            BadSignature => "bad-signature".into(),
            Decrypt => "decrypt".into(),
            CounterRegression { .. } => "counter-regression".into(),
            UnknownSender(_) => "unknown-sender".into(),
            RevokedSender(_) => "revoked-sender".into(),
            WrongRecipient => "wrong-recipient".into(),
            UnexpectedMessage(_) => "unexpected-message".into(),
            NotVerified(_) => "not-verified".into(),
            NoCredential => "no-credential".into(),
            RegistrationRefused(r) => r.clone(),
            NotProvisioned => "not-provisioned".into(),
        }
    }

    pub fn is_retriable(&self) -> bool {
        matches!(self, ProtocolError::Ledger(e) if e.is_retriable())
    }
}

pub fn provision_registrar<R: RngCore + CryptoRng>(
    registrar: &mut RegistrarAgent,
    ledger: &mut dyn LedgerClient,
    rng: &mut R,
    spec: &SchemaSpec,
) -> Result<(Did, Schema, CredentialDefinition), ProtocolError> {
    registrar.provision(ledger, rng, spec)?;
    let schema = registrar.schema.clone().expect("set by provision");
    let def = registrar.cred_def.clone().expect("set by provision");
    Ok((registrar.did().clone(), schema, def))
}

pub fn provision_vehicle<R: RngCore + CryptoRng>(
    vehicle: &mut VehicleAgent,
    ledger: &mut dyn LedgerClient,
    rng: &mut R,
) -> Result<Did, ProtocolError> {
    vehicle.provision(ledger, rng)
}

pub fn provision_sp<R: RngCore + CryptoRng>(
    provider: &mut ServiceProviderAgent,
    ledger: &mut dyn LedgerClient,
    rng: &mut R,
) -> Result<Did, ProtocolError> {
    provider.provision(ledger, rng)
}

/// Request, issuance and delivery of a registration credential.
pub fn register_vehicle<R: RngCore + CryptoRng>(
    vehicle: &mut VehicleAgent,
    registrar: &mut RegistrarAgent,
    ledger: &mut dyn LedgerClient,
    rng: &mut R,
    attributes: BTreeMap<String, String>,
) -> Result<VerifiableCredential, ProtocolError> {
    let view = ledger.view()?;
    let request =
        vehicle.registration_request(rng, &view, registrar.did(), attributes, ledger.now())?;
    let handled = registrar.handle(&request, ledger, rng)?;
    let reply = handled.reply.expect("registrar always replies");
    let view = ledger.view()?;
    match vehicle.handle(&reply, &view, rng, ledger.now())?.event {
        Event::CredentialStored { .. } => Ok(vehicle
            .credential
            .as_ref()
            .expect("just stored")
            .credential
            .clone()),
        Event::RegistrationRefused { reason } => Err(ProtocolError::RegistrationRefused(reason)),
        _ => Err(ProtocolError::UnexpectedMessage("registration reply")),
    }
}

/// Challenge, presentation and verdict. On success the provider remembers
/// the vehicle as verified.
pub fn verify_credentials<R: RngCore + CryptoRng>(
    vehicle: &mut VehicleAgent,
    provider: &mut ServiceProviderAgent,
    ledger: &dyn LedgerClient,
    rng: &mut R,
    attributes: Vec<String>,
) -> Result<(), ProtocolError> {
    let view = ledger.view()?;
    let now = ledger.now();
    let request = provider.proof_request(rng, vehicle.did(), attributes, now)?;
    let presented = vehicle.handle(&request, &view, rng, now)?;
    let presentation = presented.reply.expect("presentation");
    let verdict = provider.handle(&presentation, &view, rng, now)?;
    if let Some(reply) = &verdict.reply {
        vehicle.handle(reply, &view, rng, now)?;
    }
    match verdict.event {
        Event::Verified { .. } => Ok(()),
        Event::VerificationFailed { reason, .. } => Err(ProtocolError::Verification(reason)),
        _ => Err(ProtocolError::UnexpectedMessage("verification reply")),
    }
}

/// Verification followed by the pairwise DID exchange. Nothing is written to
/// either microledger unless verification succeeds.
pub fn authorize<R: RngCore + CryptoRng>(
    vehicle: &mut VehicleAgent,
    provider: &mut ServiceProviderAgent,
    ledger: &dyn LedgerClient,
    rng: &mut R,
    attributes: Vec<String>,
) -> Result<(), ProtocolError> {
    verify_credentials(vehicle, provider, ledger, rng, attributes)?;
    let view = ledger.view()?;
    let now = ledger.now();
    let request = vehicle.auth_request(rng, &view, provider.did(), now)?;
    let handled = provider.handle(&request, &view, rng, now)?;
    let reply = handled.reply.expect("auth response");
    vehicle.handle(&reply, &view, rng, now)?;
    Ok(())
}

/// Encrypts an agent's state into a wallet file at `path`.
pub fn save_agent<T: Serialize, R: RngCore + CryptoRng>(
    rng: &mut R,
    agent: &T,
    path: &Path,
    passphrase: &str,
    kdf: KdfParams,
) -> Result<(), CryptoError> {
    WalletFile::store(rng, passphrase, agent, kdf)?.write_to(path)
}

pub fn load_agent<T: DeserializeOwned>(path: &Path, passphrase: &str) -> Result<T, CryptoError> {
    WalletFile::read_from(path)?.load(passphrase)
}
