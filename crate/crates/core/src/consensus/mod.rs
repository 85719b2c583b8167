//! Replicated transaction ordering across a fixed consortium of n = 3f+1
//! nodes: single-instance PBFT with one block in flight, round-robin leaders
//! and view change.
//!
//! Each [`Replica`] is a deterministic state machine. The caller delivers
//! messages, client transactions and clock ticks, and routes the returned
//! [`Output`]. Nothing inside reads a clock or a random source.

mod message;
mod replica;

pub use message::{
    CertifiedBlock, CommitCert, ConsensusMessage, MessageBody, Prepared, PreparedCert,
};
pub use replica::{CommittedBlock, Dest, Output, Replica, SubmitError};

use serde::{Deserialize, Serialize};

use crate::ledger::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaConfig {
    pub n: usize,
    pub f: usize,
    pub node_ids: Vec<NodeId>,
    pub this_node: NodeId,
    /// Maximum transactions per block.
    pub batch_size: usize,
    /// Time without progress before a view change, in milliseconds.
    pub view_timeout_ms: u64,
    /// How long the leader waits to fill a batch.
    pub batch_interval_ms: u64,
    pub retransmit_ms: u64,
    pub max_pending: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConsensusError {
    #[error("n = {0} is not of the form 3f+1 with f >= 1")]
    BadSize(usize),
    #[error("f = {f} does not match n = {n}")]
    FaultBound { n: usize, f: usize },
    #[error("node ids must be distinct")]
    DuplicateNode,
    #[error("{0} is not a consortium member")]
    UnknownNode(NodeId),
    #[error("node keys do not match the genesis node set")]
    KeyMismatch,
    #[error("invalid parameter: {0}")]
    Parameter(&'static str),
    #[error("chain does not replay: {0}")]
    Chain(String),
}

impl ReplicaConfig {
    /// Config with default timing for `node_ids`, run as `this_node`.
    pub fn new(node_ids: Vec<NodeId>, this_node: NodeId) -> Result<Self, ConsensusError> {
        let n = node_ids.len();
        let cfg = ReplicaConfig {
            n,
            f: n.saturating_sub(1) / 3,
            node_ids,
            this_node,
            batch_size: 100,
            view_timeout_ms: 2_000,
            batch_interval_ms: 1_000,
            retransmit_ms: 250,
            max_pending: 50_000,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConsensusError> {
        if self.n < 4 || !(self.n - 1).is_multiple_of(3) || self.node_ids.len() != self.n {
            return Err(ConsensusError::BadSize(self.node_ids.len()));
        }
        if self.n != 3 * self.f + 1 {
            return Err(ConsensusError::FaultBound {
                n: self.n,
                f: self.f,
            });
        }
        let distinct: std::collections::BTreeSet<_> = self.node_ids.iter().collect();
        if distinct.len() != self.n {
            return Err(ConsensusError::DuplicateNode);
        }
        if !self.node_ids.contains(&self.this_node) {
            return Err(ConsensusError::UnknownNode(self.this_node));
        }
        if self.batch_size == 0 {
            return Err(ConsensusError::Parameter("batch_size must be positive"));
        }
        if self.view_timeout_ms == 0 || self.retransmit_ms == 0 {
            return Err(ConsensusError::Parameter("timeouts must be positive"));
        }
        Ok(())
    }

    pub fn quorum(&self) -> usize {
        2 * self.f + 1
    }

    pub fn leader(&self, view: u64) -> NodeId {
        self.node_ids[(view % self.n as u64) as usize]
    }

    pub fn for_node(&self, id: NodeId) -> Self {
        ReplicaConfig {
            this_node: id,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests;
