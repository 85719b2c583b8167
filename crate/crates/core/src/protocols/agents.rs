use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::channel::SessionChannel;
use super::envelope::{Body, Envelope, Message, ReplayGuard, MESSAGE_WINDOW_S};
use super::microledger::Microledger;
use super::ProtocolError;
use crate::credentials::{
    check_attribute_names, def_gen, issue_credential, proof_gen, revoke_credential, schema_gen,
    ChallengeBook, CredentialDefinition, CredentialError, HeldCredential, ProofRequest, Schema,
    VerifyFailure, VIN_ATTRIBUTE,
};
use crate::crypto::{from_canonical_bytes, Digest, KeyPair, Nonce, PublicKey};
use crate::embedded::LedgerClient;
use crate::identity::{register_did, revoke_did, rotate_key, Did, KeyStore, PeerDid};
use crate::ledger::{LedgerView, Transaction, TxnStamp};

/// Something an agent learned while handling an envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    CredentialStored { commitment_root: Digest },
    RegistrationRefused { reason: String },
    PresentationSent { nonce: Nonce },
    Verified { subject: Did },
    VerificationFailed { subject: Did, reason: VerifyFailure },
    VerificationReported { result: Result<(), String> },
    ChannelOpened { counterparty: Did, pairwise: Did },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Handled {
    pub reply: Option<Envelope>,
    pub event: Event,
}

/// Identity, keys and inbound replay state shared by every agent kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Party {
    pub did: Did,
    keys: KeyStore,
    guard: ReplayGuard,
}

impl Party {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut keys = KeyStore::new();
        let did = keys.create(rng);
        Party {
            did,
            keys,
            guard: ReplayGuard::new(),
        }
    }

    pub fn key(&self) -> &KeyPair {
        self.keys
            .get(&self.did)
            .expect("party always holds its own key")
    }

    pub fn keys(&self) -> &KeyStore {
        &self.keys
    }

    pub fn seen_envelopes(&self) -> usize {
        self.guard.len()
    }

    /// Submits DID_REG unless the DID already resolves.
    pub fn ensure_registered<R: RngCore + CryptoRng>(
        &mut self,
        ledger: &mut dyn LedgerClient,
        rng: &mut R,
    ) -> Result<bool, ProtocolError> {
        if ledger.view()?.did_document(&self.did).is_some() {
            return Ok(false);
        }
        let txn = register_did(&self.keys, &self.did, TxnStamp::new(rng, ledger.now()))?;
        submit_one(ledger, txn)?;
        Ok(true)
    }

    /// Rotates to a fresh key once the ROTATE transaction commits.
    pub fn rotate<R: RngCore + CryptoRng>(
        &mut self,
        ledger: &mut dyn LedgerClient,
        rng: &mut R,
    ) -> Result<(), ProtocolError> {
        let view = ledger.view()?;
        let next = KeyPair::generate(rng);
        let txn = rotate_key(
            &self.keys,
            &view,
            &self.did,
            &next,
            TxnStamp::new(rng, ledger.now()),
        )?;
        submit_one(ledger, txn)?;
        self.keys.insert(self.did.clone(), next);
        Ok(())
    }

    pub fn plain<R: RngCore + CryptoRng>(
        &self,
        rng: &mut R,
        to: &Did,
        message: Message,
        now: u64,
    ) -> Envelope {
        Envelope::plain(rng, self.did.clone(), self.key(), to.clone(), message, now)
    }

    pub fn sealed<R: RngCore + CryptoRng>(
        &self,
        rng: &mut R,
        view: &LedgerView,
        to: &Did,
        message: &Message,
        now: u64,
    ) -> Result<Envelope, ProtocolError> {
        let pk = active_key(view, to)?;
        Envelope::seal_message(
            rng,
            self.did.clone(),
            self.key(),
            to.clone(),
            &pk,
            message,
            now,
        )
    }

    /// Authenticates an envelope from a ledger-registered sender and returns its message.
    pub fn receive(
        &mut self,
        env: &Envelope,
        view: &LedgerView,
        now: u64,
    ) -> Result<Message, ProtocolError> {
        if env.recipient != self.did {
            return Err(ProtocolError::WrongRecipient);
        }
        // revoked senders still authenticate; each protocol step decides what revocation means
        let sender_key = crate::identity::resolve(view, &env.sender)
            .map_err(|_| ProtocolError::UnknownSender(env.sender.clone()))?
            .active_public_key;
        if !env.verify_signature(&sender_key) {
            return Err(ProtocolError::BadSignature);
        }
        self.guard.check(env, now)?;
        let message = match &env.body {
            Body::Plain { message } => (**message).clone(),
            Body::Sealed { counter: None, .. } => {
                let bytes = env.open_sealed(self.key(), &sender_key)?;
                from_canonical_bytes(&bytes)
                    .map_err(|_| ProtocolError::UnexpectedMessage("undecodable body"))?
            }
            Body::Sealed {
                counter: Some(_), ..
            } => return Err(ProtocolError::UnexpectedMessage("channel traffic")),
        };
        self.guard.admit(env, now)?;
        Ok(message)
    }
}

fn active_key(view: &LedgerView, did: &Did) -> Result<PublicKey, ProtocolError> {
    let doc = crate::identity::resolve(view, did)
        .map_err(|_| ProtocolError::UnknownSender(did.clone()))?;
    if doc.revoked {
        return Err(ProtocolError::RevokedSender(did.clone()));
    }
    Ok(doc.active_public_key)
}

pub(crate) fn submit_one(
    ledger: &mut dyn LedgerClient,
    txn: Transaction,
) -> Result<(), ProtocolError> {
    let outcome = ledger
        .submit(vec![txn])?
        .pop()
        .expect("one outcome per txn");
    match outcome.rejection {
        None => Ok(()),
        Some(r) => Err(ProtocolError::Rejected(r)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub name: String,
    pub version: String,
    pub attributes: Vec<String>,
}

impl SchemaSpec {
    /// The vehicle registration schema used throughout the system.
    pub fn vehicle_registration() -> Self {
        SchemaSpec {
            name: "vehicle-registration".into(),
            version: "1.0".into(),
            attributes: ["VIN", "make", "model", "year"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrarAgent {
    pub party: Party,
    pub schema: Option<Schema>,
    pub cred_def: Option<CredentialDefinition>,
    /// Subject DID to the commitment root of the credential issued to it.
    pub issued: BTreeMap<Did, Digest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProvisionReport {
    /// Transactions this call committed.
    pub committed: usize,
}

impl RegistrarAgent {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        RegistrarAgent {
            party: Party::generate(rng),
            schema: None,
            cred_def: None,
            issued: BTreeMap::new(),
        }
    }

    pub fn did(&self) -> &Did {
        &self.party.did
    }

    /// Registers the DID, schema and credential definition, skipping
    /// whichever are already on the ledger.
    pub fn provision<R: RngCore + CryptoRng>(
        &mut self,
        ledger: &mut dyn LedgerClient,
        rng: &mut R,
        spec: &SchemaSpec,
    ) -> Result<ProvisionReport, ProtocolError> {
        check_attribute_names(&spec.attributes)?;
        if !spec.attributes.iter().any(|a| a == VIN_ATTRIBUTE) {
            return Err(CredentialError::SchemaWithoutVin.into());
        }
        let mut committed = 0;
        if self.party.ensure_registered(ledger, rng)? {
            committed += 1;
        }

        let view = ledger.view()?;
        let schema = match view.schema_by_name(&spec.name, &spec.version) {
            Some(s) if s.issuer == self.party.did => s.clone(),
            Some(_) => {
                return Err(ProtocolError::Rejected(
                    crate::ledger::Rejection::DuplicateSchema,
                ))
            }
            None => {
                let stamp = TxnStamp::new(rng, ledger.now());
                let (schema, txn) = schema_gen(
                    self.party.keys(),
                    &self.party.did,
                    &spec.name,
                    &spec.version,
                    spec.attributes.clone(),
                    stamp,
                )?;
                submit_one(ledger, txn)?;
                committed += 1;
                schema
            }
        };

        let view = ledger.view()?;
        let existing = view
            .cred_defs()
            .find(|(_, d)| {
                d.schema_ref == schema.id()
                    && d.issuer == self.party.did
                    && d.issuer_public_key == self.party.key().public_key()
            })
            .map(|(_, d)| d.clone());
        let def = match existing {
            Some(d) => d,
            None => {
                let (def, txn) = def_gen(
                    self.party.keys(),
                    &self.party.did,
                    &schema,
                    TxnStamp::new(rng, ledger.now()),
                )?;
                submit_one(ledger, txn)?;
                committed += 1;
                def
            }
        };
        self.schema = Some(schema);
        self.cred_def = Some(def);
        Ok(ProvisionReport { committed })
    }

    /// Answers a registration request: validates, issues, commits CRED_REG
    /// and returns the signed credential, or a refusal.
    pub fn handle<R: RngCore + CryptoRng>(
        &mut self,
        env: &Envelope,
        ledger: &mut dyn LedgerClient,
        rng: &mut R,
    ) -> Result<Handled, ProtocolError> {
        let view = ledger.view()?;
        let now = ledger.now();
        let message = self.party.receive(env, &view, now)?;
        let Message::RegistrationRequest { did, attributes } = message else {
            return Err(ProtocolError::UnexpectedMessage(message.name()));
        };
        if did != env.sender {
            return Err(ProtocolError::UnknownSender(did));
        }
        let result = self.issue(ledger, rng, &view, &did, &attributes);
        let (reply_result, event) = match result {
            Ok(held) => {
                let root = held.credential.commitment_root();
                self.issued.insert(did.clone(), root);
                (
                    Ok(held),
                    Event::CredentialStored {
                        commitment_root: root,
                    },
                )
            }
            Err(e) => {
                let reason = e.code();
                (Err(reason.clone()), Event::RegistrationRefused { reason })
            }
        };
        let reply = self.party.sealed(
            rng,
            &view,
            &did,
            &Message::RegistrationResponse {
                result: reply_result,
            },
            ledger.now(),
        )?;
        Ok(Handled {
            reply: Some(reply),
            event,
        })
    }

    fn issue<R: RngCore + CryptoRng>(
        &mut self,
        ledger: &mut dyn LedgerClient,
        rng: &mut R,
        view: &LedgerView,
        subject: &Did,
        attributes: &BTreeMap<String, String>,
    ) -> Result<HeldCredential, ProtocolError> {
        let def = self
            .cred_def
            .as_ref()
            .ok_or(ProtocolError::NotProvisioned)?;
        let subject_pk = active_key(view, subject)?;
        let stamp = TxnStamp::new(rng, ledger.now());
        let (held, txn) = issue_credential(
            rng,
            self.party.keys(),
            &self.party.did,
            view,
            &def.id(),
            subject,
            &subject_pk,
            attributes,
            stamp,
        )?;
        submit_one(ledger, txn)?;
        Ok(held)
    }

    /// Revokes the credential issued to `subject`.
    pub fn revoke_credential_of<R: RngCore + CryptoRng>(
        &mut self,
        ledger: &mut dyn LedgerClient,
        rng: &mut R,
        subject: &Did,
    ) -> Result<(), ProtocolError> {
        let root = *self
            .issued
            .get(subject)
            .ok_or(ProtocolError::NoCredential)?;
        let view = ledger.view()?;
        let txn = revoke_credential(
            self.party.keys(),
            &self.party.did,
            &view,
            &root,
            TxnStamp::new(rng, ledger.now()),
        )?;
        submit_one(ledger, txn)
    }

    /// Revokes `target`'s DID outright.
    pub fn revoke_did<R: RngCore + CryptoRng>(
        &mut self,
        ledger: &mut dyn LedgerClient,
        rng: &mut R,
        target: &Did,
    ) -> Result<(), ProtocolError> {
        let view = ledger.view()?;
        let txn = revoke_did(
            self.party.keys(),
            &self.party.did,
            &view,
            target,
            TxnStamp::new(rng, ledger.now()),
        )?;
        submit_one(ledger, txn)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VehicleAgent {
    pub party: Party,
    pub credential: Option<HeldCredential>,
    pub microledger: Microledger,
    /// Open channels by provider DID.
    pub channels: BTreeMap<Did, SessionChannel>,
    /// Pairwise DIDs offered to providers that have not answered yet.
    pending_auth: BTreeMap<Did, PeerDid>,
    pub last_verification: Option<Result<(), String>>,
}

impl VehicleAgent {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        VehicleAgent {
            party: Party::generate(rng),
            credential: None,
            microledger: Microledger::new(),
            channels: BTreeMap::new(),
            pending_auth: BTreeMap::new(),
            last_verification: None,
        }
    }

    pub fn did(&self) -> &Did {
        &self.party.did
    }

    pub fn provision<R: RngCore + CryptoRng>(
        &mut self,
        ledger: &mut dyn LedgerClient,
        rng: &mut R,
    ) -> Result<Did, ProtocolError> {
        self.party.ensure_registered(ledger, rng)?;
        Ok(self.party.did.clone())
    }

    pub fn registration_request<R: RngCore + CryptoRng>(
        &self,
        rng: &mut R,
        view: &LedgerView,
        registrar: &Did,
        attributes: BTreeMap<String, String>,
        now: u64,
    ) -> Result<Envelope, ProtocolError> {
        let message = Message::RegistrationRequest {
            did: self.party.did.clone(),
            attributes,
        };
        self.party.sealed(rng, view, registrar, &message, now)
    }

    /// Offers a fresh pairwise DID to `provider`.
    pub fn auth_request<R: RngCore + CryptoRng>(
        &mut self,
        rng: &mut R,
        view: &LedgerView,
        provider: &Did,
        now: u64,
    ) -> Result<Envelope, ProtocolError> {
        let peer = PeerDid::generate(rng, provider.clone());
        let message = Message::AuthRequest {
            pairwise_did: peer.did.clone(),
            pairwise_key: peer.pairwise_keypair.public_key(),
        };
        let env = self.party.sealed(rng, view, provider, &message, now)?;
        self.pending_auth.insert(provider.clone(), peer);
        Ok(env)
    }

    pub fn handle<R: RngCore + CryptoRng>(
        &mut self,
        env: &Envelope,
        view: &LedgerView,
        rng: &mut R,
        now: u64,
    ) -> Result<Handled, ProtocolError> {
        let message = self.party.receive(env, view, now)?;
        match message {
            Message::RegistrationResponse { result: Ok(held) } => {
                let c = &held.credential;
                if c.subject != self.party.did
                    || c.issuer != env.sender
                    || c.subject_public_key != self.party.key().public_key()
                {
                    return Err(ProtocolError::UnexpectedMessage(
                        "credential for someone else",
                    ));
                }
                let consistent = held.claims.len() == c.commitments.len()
                    && held
                        .claims
                        .iter()
                        .all(|(k, claim)| c.commitments.get(k) == Some(&claim.commitment(k)));
                if !consistent {
                    return Err(ProtocolError::UnexpectedMessage(
                        "claims do not match commitments",
                    ));
                }
                let root = c.commitment_root();
                self.credential = Some(held);
                Ok(Handled {
                    reply: None,
                    event: Event::CredentialStored {
                        commitment_root: root,
                    },
                })
            }
            Message::RegistrationResponse {
                result: Err(reason),
            } => Ok(Handled {
                reply: None,
                event: Event::RegistrationRefused { reason },
            }),
            Message::ProofRequest { request } => {
                if request.verifier != env.sender {
                    return Err(ProtocolError::UnknownSender(request.verifier));
                }
                let held = self
                    .credential
                    .as_ref()
                    .ok_or(ProtocolError::NoCredential)?;
                let presentation = proof_gen(self.party.key(), held, &request)?;
                let reply = self.party.sealed(
                    rng,
                    view,
                    &env.sender,
                    &Message::Presentation { presentation },
                    now,
                )?;
                Ok(Handled {
                    reply: Some(reply),
                    event: Event::PresentationSent {
                        nonce: request.nonce,
                    },
                })
            }
            Message::VerificationResult { result, .. } => {
                self.last_verification = Some(result.clone());
                Ok(Handled {
                    reply: None,
                    event: Event::VerificationReported { result },
                })
            }
            Message::AuthResponse {
                pairwise_did,
                pairwise_key,
            } => {
                let local = self
                    .pending_auth
                    .remove(&env.sender)
                    .ok_or(ProtocolError::UnexpectedMessage("no authorization pending"))?;
                if !pairwise_did.is_peer() || !pairwise_did.is_derived_from(&pairwise_key) {
                    return Err(ProtocolError::UnexpectedMessage(
                        "pairwise DID does not match its key",
                    ));
                }
                // vehicle side records (own public DID, provider pairwise DID)
                self.microledger.append(
                    (self.party.did.clone(), pairwise_did.clone()),
                    &local.pairwise_keypair,
                    now,
                );
                self.channels.insert(
                    env.sender.clone(),
                    SessionChannel::new(local, pairwise_did.clone(), pairwise_key),
                );
                Ok(Handled {
                    reply: None,
                    event: Event::ChannelOpened {
                        counterparty: env.sender.clone(),
                        pairwise: pairwise_did,
                    },
                })
            }
            other => Err(ProtocolError::UnexpectedMessage(other.name())),
        }
    }

    pub fn channel(&mut self, provider: &Did) -> Option<&mut SessionChannel> {
        self.channels.get_mut(provider)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceProviderAgent {
    pub party: Party,
    challenges: ChallengeBook,
    /// Vehicles whose presentation verified, with the time it did.
    verified: BTreeMap<Did, u64>,
    pub microledger: Microledger,
    /// Open channels by the vehicle's public DID.
    pub channels: BTreeMap<Did, SessionChannel>,
}

impl ServiceProviderAgent {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        ServiceProviderAgent {
            party: Party::generate(rng),
            challenges: ChallengeBook::new(),
            verified: BTreeMap::new(),
            microledger: Microledger::new(),
            channels: BTreeMap::new(),
        }
    }

    pub fn did(&self) -> &Did {
        &self.party.did
    }

    pub fn provision<R: RngCore + CryptoRng>(
        &mut self,
        ledger: &mut dyn LedgerClient,
        rng: &mut R,
    ) -> Result<Did, ProtocolError> {
        self.party.ensure_registered(ledger, rng)?;
        Ok(self.party.did.clone())
    }

    pub fn proof_request<R: RngCore + CryptoRng>(
        &mut self,
        rng: &mut R,
        vehicle: &Did,
        attributes: Vec<String>,
        now: u64,
    ) -> Result<Envelope, ProtocolError> {
        let request = self
            .challenges
            .issue(rng, attributes, self.party.did.clone(), now)?;
        Ok(self
            .party
            .plain(rng, vehicle, Message::ProofRequest { request }, now))
    }

    pub fn outstanding_request(&self, nonce: &Nonce) -> Option<&ProofRequest> {
        self.challenges.request(nonce)
    }

    pub fn is_verified(&self, vehicle: &Did, now: u64) -> bool {
        self.verified
            .get(vehicle)
            .is_some_and(|t| *t + MESSAGE_WINDOW_S >= now)
    }

    pub fn handle<R: RngCore + CryptoRng>(
        &mut self,
        env: &Envelope,
        view: &LedgerView,
        rng: &mut R,
        now: u64,
    ) -> Result<Handled, ProtocolError> {
        let message = self.party.receive(env, view, now)?;
        match message {
            Message::Presentation { presentation } => {
                let nonce = presentation.challenge_nonce;
                let result = if presentation.proof.credential.subject != env.sender {
                    Err(VerifyFailure::CredentialMismatch)
                } else {
                    self.challenges.check(view, &nonce, &presentation, now)
                };
                let event = match result {
                    Ok(()) => {
                        self.verified.insert(env.sender.clone(), now);
                        Event::Verified {
                            subject: env.sender.clone(),
                        }
                    }
                    Err(reason) => Event::VerificationFailed {
                        subject: env.sender.clone(),
                        reason,
                    },
                };
                let reported = result.map_err(|f| f.code().to_string());
                let reply = self.party.plain(
                    rng,
                    &env.sender,
                    Message::VerificationResult {
                        nonce,
                        result: reported,
                    },
                    now,
                );
                Ok(Handled {
                    reply: Some(reply),
                    event,
                })
            }
            Message::AuthRequest {
                pairwise_did,
                pairwise_key,
            } => {
                if !self.is_verified(&env.sender, now) {
                    return Err(ProtocolError::NotVerified(env.sender.clone()));
                }
                if !pairwise_did.is_peer() || !pairwise_did.is_derived_from(&pairwise_key) {
                    return Err(ProtocolError::UnexpectedMessage(
                        "pairwise DID does not match its key",
                    ));
                }
                self.verified.remove(&env.sender);
                let local = PeerDid::generate(rng, env.sender.clone());
                let mine = local.did.clone();
                // provider side records (its pairwise DID, vehicle public DID)
                self.microledger.append(
                    (mine.clone(), env.sender.clone()),
                    &local.pairwise_keypair,
                    now,
                );
                let message = Message::AuthResponse {
                    pairwise_did: mine.clone(),
                    pairwise_key: local.pairwise_keypair.public_key(),
                };
                self.channels.insert(
                    env.sender.clone(),
                    SessionChannel::new(local, pairwise_did, pairwise_key),
                );
                let reply = self.party.sealed(rng, view, &env.sender, &message, now)?;
                Ok(Handled {
                    reply: Some(reply),
                    event: Event::ChannelOpened {
                        counterparty: env.sender.clone(),
                        pairwise: mine,
                    },
                })
            }
            other => Err(ProtocolError::UnexpectedMessage(other.name())),
        }
    }

    pub fn channel(&mut self, vehicle: &Did) -> Option<&mut SessionChannel> {
        self.channels.get_mut(vehicle)
    }
}
