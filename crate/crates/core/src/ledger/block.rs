use serde::{Deserialize, Serialize};

use super::txn::Transaction;
use crate::crypto::{Digest, PublicKey};
use crate::identity::Did;

/// Consensus node index within the consortium.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "node-{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeIdentity {
    pub id: NodeId,
    pub public_key: PublicKey,
}

/// Out-of-band consortium setup recorded in block 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genesis {
    pub chain_id: String,
    pub timestamp: u64,
    pub registrars: Vec<Did>,
    pub nodes: Vec<NodeIdentity>,
    /// Key for the VIN uniqueness tags.
    pub vin_tag_key: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Digest,
    pub timestamp: u64,
    pub txns: Vec<Transaction>,
    pub state_root: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genesis: Option<Genesis>,
}

impl Block {
    pub fn hash(&self) -> Digest {
        Digest::of_canonical(self)
    }
}
