use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::envelope::{Envelope, ReplayGuard};
use super::ProtocolError;
use crate::crypto::PublicKey;
use crate::identity::{Did, PeerDid};

/// One side of an authorized pairwise connection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionChannel {
    pub local_peer: PeerDid,
    pub remote_peer_did: Did,
    pub remote_peer_pk: PublicKey,
    pub send_counter: u64,
    pub recv_counter: u64,
    guard: ReplayGuard,
}

impl SessionChannel {
    pub fn new(local_peer: PeerDid, remote_peer_did: Did, remote_peer_pk: PublicKey) -> Self {
        SessionChannel {
            local_peer,
            remote_peer_did,
            remote_peer_pk,
            send_counter: 0,
            recv_counter: 0,
            guard: ReplayGuard::new(),
        }
    }

    pub fn send<R: RngCore + CryptoRng>(
        &mut self,
        rng: &mut R,
        payload: &[u8],
        now: u64,
    ) -> Result<Envelope, ProtocolError> {
        let counter = self.send_counter + 1;
        let env = Envelope::sealed(
            rng,
            self.local_peer.did.clone(),
            &self.local_peer.pairwise_keypair,
            self.remote_peer_did.clone(),
            &self.remote_peer_pk,
            payload,
            Some(counter),
            now,
        )?;
        self.send_counter = counter;
        Ok(env)
    }

    pub fn recv(&mut self, env: &Envelope, now: u64) -> Result<Vec<u8>, ProtocolError> {
        if env.sender != self.remote_peer_did || env.recipient != self.local_peer.did {
            return Err(ProtocolError::UnknownSender(env.sender.clone()));
        }
        if !env.verify_signature(&self.remote_peer_pk) {
            return Err(ProtocolError::BadSignature);
        }
        let counter = env.counter().ok_or(ProtocolError::UnexpectedMessage(
            "channel traffic needs a counter",
        ))?;
        // checked before the counter so a re-delivery reports as a replay
        self.guard.check(env, now)?;
        if counter <= self.recv_counter {
            return Err(ProtocolError::CounterRegression {
                got: counter,
                last: self.recv_counter,
            });
        }
        let payload = env.open_sealed(&self.local_peer.pairwise_keypair, &self.remote_peer_pk)?;
        self.guard.admit(env, now)?;
        self.recv_counter = counter;
        Ok(payload)
    }
}

pub fn channel_send<R: RngCore + CryptoRng>(
    rng: &mut R,
    channel: &mut SessionChannel,
    payload: &[u8],
    now: u64,
) -> Result<Envelope, ProtocolError> {
    channel.send(rng, payload, now)
}

pub fn channel_recv(
    channel: &mut SessionChannel,
    env: &Envelope,
    now: u64,
) -> Result<Vec<u8>, ProtocolError> {
    channel.recv(env, now)
}
