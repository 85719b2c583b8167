use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::ProtocolError;
use crate::credentials::{HeldCredential, Presentation, ProofRequest};
use crate::crypto::{
    hex_vec, open, seal, to_canonical_bytes, verify, KeyPair, Nonce, PublicKey, Signature,
};
use crate::identity::Did;

/// Accepted distance between an envelope's timestamp and the receiver's clock.
pub const MESSAGE_WINDOW_S: u64 = 300;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    RegistrationRequest {
        did: Did,
        attributes: BTreeMap<String, String>,
    },
    RegistrationResponse {
        result: Result<HeldCredential, String>,
    },
    ProofRequest {
        request: ProofRequest,
    },
    Presentation {
        presentation: Presentation,
    },
    VerificationResult {
        nonce: Nonce,
        result: Result<(), String>,
    },
    AuthRequest {
        pairwise_did: Did,
        pairwise_key: PublicKey,
    },
    AuthResponse {
        pairwise_did: Did,
        pairwise_key: PublicKey,
    },
}

impl Message {
    pub fn name(&self) -> &'static str {
        match self {
            Message::RegistrationRequest { .. } => "registration_request",
            Message::RegistrationResponse { .. } => "registration_response",
            Message::ProofRequest { .. } => "proof_request",
            Message::Presentation { .. } => "presentation",
            Message::VerificationResult { .. } => "verification_result",
            Message::AuthRequest { .. } => "auth_request",
            Message::AuthResponse { .. } => "auth_response",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Body {
    Plain {
        message: Box<Message>,
    },
    /// Ciphertext for the recipient's key. Channel traffic carries a counter.
    Sealed {
        counter: Option<u64>,
        #[serde(with = "hex_vec")]
        ciphertext: Vec<u8>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub sender: Did,
    pub recipient: Did,
    pub nonce: Nonce,
    pub timestamp: u64,
    pub body: Body,
    pub signature: Signature,
}

#[derive(Serialize)]
struct Header<'a> {
    sender: &'a Did,
    recipient: &'a Did,
    nonce: &'a Nonce,
    timestamp: u64,
    counter: Option<u64>,
}

#[derive(Serialize)]
struct SignedPart<'a> {
    sender: &'a Did,
    recipient: &'a Did,
    nonce: &'a Nonce,
    timestamp: u64,
    body: &'a Body,
}

impl Envelope {
    fn signing_bytes(&self) -> Vec<u8> {
        to_canonical_bytes(&SignedPart {
            sender: &self.sender,
            recipient: &self.recipient,
            nonce: &self.nonce,
            timestamp: self.timestamp,
            body: &self.body,
        })
    }

    fn aad(
        sender: &Did,
        recipient: &Did,
        nonce: &Nonce,
        timestamp: u64,
        counter: Option<u64>,
    ) -> Vec<u8> {
        to_canonical_bytes(&Header {
            sender,
            recipient,
            nonce,
            timestamp,
            counter,
        })
    }

    pub fn plain<R: RngCore + CryptoRng>(
        rng: &mut R,
        sender: Did,
        key: &KeyPair,
        recipient: Did,
        message: Message,
        now: u64,
    ) -> Self {
        let mut env = Envelope {
            sender,
            recipient,
            nonce: Nonce::random(rng),
            timestamp: now,
            body: Body::Plain {
                message: Box::new(message),
            },
            signature: Signature([0; 64]),
        };
        env.signature = key.sign(&env.signing_bytes());
        env
    }

    /// Encrypts `plaintext` to `recipient_key` and signs the result.
    #[allow(clippy::too_many_arguments)]
    pub fn sealed<R: RngCore + CryptoRng>(
        rng: &mut R,
        sender: Did,
        key: &KeyPair,
        recipient: Did,
        recipient_key: &PublicKey,
        plaintext: &[u8],
        counter: Option<u64>,
        now: u64,
    ) -> Result<Self, ProtocolError> {
        let nonce = Nonce::random(rng);
        let aad = Self::aad(&sender, &recipient, &nonce, now, counter);
        let ciphertext = seal(rng, key, recipient_key, plaintext, &aad)?;
        let mut env = Envelope {
            sender,
            recipient,
            nonce,
            timestamp: now,
            body: Body::Sealed {
                counter,
                ciphertext,
            },
            signature: Signature([0; 64]),
        };
        env.signature = key.sign(&env.signing_bytes());
        Ok(env)
    }

    pub fn seal_message<R: RngCore + CryptoRng>(
        rng: &mut R,
        sender: Did,
        key: &KeyPair,
        recipient: Did,
        recipient_key: &PublicKey,
        message: &Message,
        now: u64,
    ) -> Result<Self, ProtocolError> {
        Self::sealed(
            rng,
            sender,
            key,
            recipient,
            recipient_key,
            &to_canonical_bytes(message),
            None,
            now,
        )
    }

    pub fn verify_signature(&self, sender_key: &PublicKey) -> bool {
        verify(sender_key, &self.signing_bytes(), &self.signature)
    }

    /// Decrypts a sealed body. Fails for anyone but the intended recipient.
    pub fn open_sealed(
        &self,
        recipient_key: &KeyPair,
        sender_key: &PublicKey,
    ) -> Result<Vec<u8>, ProtocolError> {
        let Body::Sealed {
            counter,
            ciphertext,
        } = &self.body
        else {
            return Err(ProtocolError::UnexpectedMessage("plain body"));
        };
        let aad = Self::aad(
            &self.sender,
            &self.recipient,
            &self.nonce,
            self.timestamp,
            *counter,
        );
        open(recipient_key, sender_key, ciphertext, &aad).map_err(|_| ProtocolError::Decrypt)
    }

    pub fn counter(&self) -> Option<u64> {
        match &self.body {
            Body::Sealed { counter, .. } => *counter,
            Body::Plain { .. } => None,
        }
    }
}

/// Per-recipient record of accepted (sender, nonce) pairs. Entries older than
/// the message window are dropped, since their envelopes would be refused as
/// stale anyway.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayGuard {
    /// `sender#nonce` to envelope timestamp; string keys keep it JSON-friendly.
    seen: BTreeMap<String, u64>,
}

fn guard_key(env: &Envelope) -> String {
    format!("{}#{}", env.sender, env.nonce.to_hex())
}

impl ReplayGuard {
    pub fn new() -> Self {
        Self::default()
    }

    /// Checks freshness and uniqueness without recording anything.
    pub fn check(&self, env: &Envelope, now: u64) -> Result<(), ProtocolError> {
        if env.timestamp + MESSAGE_WINDOW_S < now || env.timestamp > now + MESSAGE_WINDOW_S {
            return Err(ProtocolError::Stale);
        }
        if self.seen.contains_key(&guard_key(env)) {
            return Err(ProtocolError::Replay);
        }
        Ok(())
    }

    /// [`ReplayGuard::check`], then records the envelope.
    pub fn admit(&mut self, env: &Envelope, now: u64) -> Result<(), ProtocolError> {
        self.check(env, now)?;
        self.seen.retain(|_, t| *t + MESSAGE_WINDOW_S >= now);
        self.seen.insert(guard_key(env), env.timestamp);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}
