use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ReplicaConfig;
use crate::crypto::{to_canonical_bytes, verify, Digest, KeyPair, PublicKey, Signature};
use crate::ledger::{Block, NodeId, Transaction};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MessageBody {
    /// Client transactions relayed to the current leader.
    Forward {
        txns: Vec<Transaction>,
    },
    PrePrepare {
        view: u64,
        seq: u64,
        block: Block,
    },
    Prepare {
        view: u64,
        seq: u64,
        digest: Digest,
    },
    Commit {
        view: u64,
        seq: u64,
        digest: Digest,
    },
    ViewChange {
        new_view: u64,
        last_stable: u64,
        prepared: Option<PreparedCert>,
    },
    NewView {
        new_view: u64,
        proof: Vec<ConsensusMessage>,
        pre_prepare: Option<Box<ConsensusMessage>>,
    },
    FetchBlocks {
        from: u64,
        view: u64,
    },
    Blocks {
        blocks: Vec<CertifiedBlock>,
        new_view: Option<Box<ConsensusMessage>>,
    },
}

impl MessageBody {
    pub fn name(&self) -> &'static str {
        match self {
            MessageBody::Forward { .. } => "forward",
            MessageBody::PrePrepare { .. } => "pre_prepare",
            MessageBody::Prepare { .. } => "prepare",
            MessageBody::Commit { .. } => "commit",
            MessageBody::ViewChange { .. } => "view_change",
            MessageBody::NewView { .. } => "new_view",
            MessageBody::FetchBlocks { .. } => "fetch_blocks",
            MessageBody::Blocks { .. } => "blocks",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusMessage {
    pub body: MessageBody,
    pub sender: NodeId,
    pub signature: Signature,
}

#[derive(Serialize)]
struct Signed<'a> {
    body: &'a MessageBody,
    sender: NodeId,
}

impl ConsensusMessage {
    pub fn sign(body: MessageBody, sender: NodeId, key: &KeyPair) -> Self {
        let signature = key.sign(&to_canonical_bytes(&Signed {
            body: &body,
            sender,
        }));
        ConsensusMessage {
            body,
            sender,
            signature,
        }
    }

    pub fn verify(&self, keys: &BTreeMap<NodeId, PublicKey>) -> bool {
        match keys.get(&self.sender) {
            Some(pk) => verify(
                pk,
                &to_canonical_bytes(&Signed {
                    body: &self.body,
                    sender: self.sender,
                }),
                &self.signature,
            ),
            None => false,
        }
    }
}

/// A PrePrepare plus a quorum of matching Prepares.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedCert {
    pub pre_prepare: Box<ConsensusMessage>,
    pub prepares: Vec<ConsensusMessage>,
}

/// Summary of a verified [`PreparedCert`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prepared {
    pub view: u64,
    pub seq: u64,
    pub digest: Digest,
}

impl PreparedCert {
    pub fn block(&self) -> Option<&Block> {
        match &self.pre_prepare.body {
            MessageBody::PrePrepare { block, .. } => Some(block),
            _ => None,
        }
    }

    pub fn verify(
        &self,
        cfg: &ReplicaConfig,
        keys: &BTreeMap<NodeId, PublicKey>,
    ) -> Option<Prepared> {
        let MessageBody::PrePrepare { view, seq, block } = &self.pre_prepare.body else {
            return None;
        };
        if self.pre_prepare.sender != cfg.leader(*view)
            || !self.pre_prepare.verify(keys)
            || block.height != *seq
        {
            return None;
        }
        let digest = block.hash();
        let want = MessageBody::Prepare {
            view: *view,
            seq: *seq,
            digest,
        };
        if !quorum_of(&self.prepares, &want, cfg, keys) {
            return None;
        }
        Some(Prepared {
            view: *view,
            seq: *seq,
            digest,
        })
    }
}

/// A quorum of matching Commits for a block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitCert {
    pub view: u64,
    pub commits: Vec<ConsensusMessage>,
}

impl CommitCert {
    pub fn verify(
        &self,
        block: &Block,
        cfg: &ReplicaConfig,
        keys: &BTreeMap<NodeId, PublicKey>,
    ) -> bool {
        let want = MessageBody::Commit {
            view: self.view,
            seq: block.height,
            digest: block.hash(),
        };
        quorum_of(&self.commits, &want, cfg, keys)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertifiedBlock {
    pub block: Block,
    pub cert: CommitCert,
}

/// True when `msgs` holds a quorum of distinct, validly signed copies of `want`.
fn quorum_of(
    msgs: &[ConsensusMessage],
    want: &MessageBody,
    cfg: &ReplicaConfig,
    keys: &BTreeMap<NodeId, PublicKey>,
) -> bool {
    let mut senders = BTreeSet::new();
    for m in msgs {
        if m.body != *want || !m.verify(keys) {
            return false;
        }
        senders.insert(m.sender);
    }
    senders.len() >= cfg.quorum()
}
