//! In-process ledger: a full replica set driven over a zero-latency queue
//! and a virtual clock, with optional on-disk persistence.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::consensus::{
    ConsensusError, ConsensusMessage, Dest, Output, Replica, ReplicaConfig, SubmitError,
};
use crate::crypto::{from_canonical_bytes, to_canonical_bytes, Digest, KeyPair};
use crate::identity::Did;
use crate::ledger::{
    read_blocks, BlockStore, Genesis, LedgerError, LedgerView, NodeId, NodeIdentity, Rejection,
    Transaction, TxnOutcome,
};

const STATE_FILE: &str = "ledger.json";
const BLOCKS_FILE: &str = "blocks.bin";
/// Virtual time a submission may take before it is reported as timed out.
const SUBMIT_BUDGET_MS: u64 = 120_000;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("ledger unreachable")]
    Unreachable,
    #[error("transactions did not commit in time")]
    Timeout,
    #[error("submission refused: {0}")]
    Refused(#[from] SubmitError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("ledger directory: {0}")]
    Storage(String),
}

impl ClientError {
    /// Whether the same request may succeed if simply retried later.
    pub fn is_retriable(&self) -> bool {
        matches!(
            self,
            ClientError::Unreachable
                | ClientError::Timeout
                | ClientError::Refused(SubmitError::QueueFull)
        )
    }
}

/// What agents need from a ledger.
pub trait LedgerClient {
    /// Submits transactions and waits until each commits or is refused.
    /// Outcomes come back in submission order.
    fn submit(&mut self, txns: Vec<Transaction>) -> Result<Vec<TxnOutcome>, ClientError>;
    /// Latest committed snapshot.
    fn view(&self) -> Result<LedgerView, ClientError>;
    /// Ledger clock in unix seconds.
    fn now(&self) -> u64;
}

/// What goes into a new chain's genesis block.
#[derive(Debug, Clone)]
pub struct EmbeddedConfig {
    pub chain_id: String,
    pub nodes: usize,
    pub registrars: Vec<Did>,
    /// Unix seconds.
    pub start_time: u64,
}

impl EmbeddedConfig {
    pub fn new(nodes: usize, registrars: Vec<Did>, start_time: u64) -> Self {
        EmbeddedConfig {
            chain_id: "vdkms-embedded".into(),
            nodes,
            registrars,
            start_time,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Persisted {
    genesis: Genesis,
    node_keys: Vec<KeyPair>,
}

pub struct EmbeddedLedger {
    replicas: Vec<Replica>,
    queue: VecDeque<(usize, ConsensusMessage)>,
    now_ms: u64,
    reachable: bool,
    store: Option<BlockStore>,
    stored_height: u64,
    dir: Option<PathBuf>,
}

impl EmbeddedLedger {
    pub fn new<R: RngCore + CryptoRng>(
        rng: &mut R,
        cfg: &EmbeddedConfig,
    ) -> Result<Self, ClientError> {
        let (genesis, keys) = make_genesis(rng, cfg);
        let blocks = vec![crate::ledger::LedgerState::genesis(&genesis).1];
        Self::assemble(&blocks, keys, cfg.start_time * 1000, None, None)
    }

    /// Creates a persistent ledger in `dir`, which must not already hold one.
    pub fn create<R: RngCore + CryptoRng>(
        rng: &mut R,
        cfg: &EmbeddedConfig,
        dir: &Path,
    ) -> Result<Self, ClientError> {
        if dir.join(STATE_FILE).exists() {
            return Err(ClientError::Storage(format!(
                "{} already holds a ledger",
                dir.display()
            )));
        }
        std::fs::create_dir_all(dir).map_err(|e| ClientError::Storage(e.to_string()))?;
        let (genesis, node_keys) = make_genesis(rng, cfg);
        let (_, block0) = crate::ledger::LedgerState::genesis(&genesis);
        let persisted = Persisted {
            genesis,
            node_keys: node_keys.clone(),
        };
        std::fs::write(dir.join(STATE_FILE), to_canonical_bytes(&persisted))
            .map_err(|e| ClientError::Storage(e.to_string()))?;
        let mut store = BlockStore::open(&dir.join(BLOCKS_FILE))?;
        store.append(&block0)?;
        Self::assemble(
            &[block0],
            node_keys,
            cfg.start_time * 1000,
            Some(store),
            Some(dir.to_path_buf()),
        )
    }

    /// Reopens a persistent ledger, replaying its block store.
    pub fn open(dir: &Path, now: u64) -> Result<Self, ClientError> {
        let raw = std::fs::read(dir.join(STATE_FILE))
            .map_err(|e| ClientError::Storage(format!("{}: {e}", dir.display())))?;
        let persisted: Persisted =
            from_canonical_bytes(&raw).map_err(|e| ClientError::Storage(e.to_string()))?;
        let blocks = read_blocks(&dir.join(BLOCKS_FILE))?;
        if blocks.first().and_then(|b| b.genesis.as_ref()) != Some(&persisted.genesis) {
            return Err(ClientError::Storage(
                "block store does not match genesis".into(),
            ));
        }
        let last = blocks.last().map_or(0, |b| b.timestamp);
        let store = BlockStore::open(&dir.join(BLOCKS_FILE))?;
        Self::assemble(
            &blocks,
            persisted.node_keys,
            now.max(last) * 1000,
            Some(store),
            Some(dir.to_path_buf()),
        )
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(STATE_FILE).exists()
    }

    fn assemble(
        blocks: &[crate::ledger::Block],
        keys: Vec<KeyPair>,
        now_ms: u64,
        store: Option<BlockStore>,
        dir: Option<PathBuf>,
    ) -> Result<Self, ClientError> {
        let ids: Vec<NodeId> = (0..keys.len() as u32).map(NodeId).collect();
        let mut replicas = Vec::with_capacity(keys.len());
        for (id, key) in ids.iter().zip(keys) {
            let cfg = ReplicaConfig::new(ids.clone(), *id)?;
            replicas.push(Replica::from_chain(cfg, key, blocks)?);
        }
        let stored_height = blocks.len() as u64 - 1;
        Ok(EmbeddedLedger {
            replicas,
            queue: VecDeque::new(),
            now_ms,
            reachable: true,
            store,
            stored_height,
            dir,
        })
    }

    /// Simulates losing the connection to the ledger.
    pub fn set_reachable(&mut self, reachable: bool) {
        self.reachable = reachable;
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn replicas(&self) -> &[Replica] {
        &self.replicas
    }

    /// Moves the virtual clock forward.
    pub fn advance(&mut self, secs: u64) {
        self.now_ms += secs * 1000;
    }

    fn route(&mut self, from: usize, out: Output) {
        for (dest, msg) in out.messages {
            match dest {
                Dest::All => {
                    for i in (0..self.replicas.len()).filter(|i| *i != from) {
                        self.queue.push_back((i, msg.clone()));
                    }
                }
                Dest::To(id) => self.queue.push_back((id.0 as usize, msg)),
            }
        }
    }

    fn persist(&mut self) -> Result<(), ClientError> {
        let Some(store) = self.store.as_mut() else {
            return Ok(());
        };
        let chain = self.replicas[0].chain();
        for b in &chain[self.stored_height as usize + 1..] {
            store.append(b)?;
        }
        self.stored_height = chain.len() as u64 - 1;
        Ok(())
    }
}

impl LedgerClient for EmbeddedLedger {
    fn submit(&mut self, txns: Vec<Transaction>) -> Result<Vec<TxnOutcome>, ClientError> {
        if !self.reachable {
            return Err(ClientError::Unreachable);
        }
        let mut outcomes: BTreeMap<Digest, Option<TxnOutcome>> = BTreeMap::new();
        let mut order = Vec::with_capacity(txns.len());
        for txn in txns {
            let id = txn.id();
            order.push(id);
            if outcomes.contains_key(&id) {
                continue;
            }
            let at = self.replicas[0].leader().0 as usize;
            let kind = txn.kind();
            match self.replicas[at].on_client_txn(txn, self.now_ms) {
                Ok(out) => {
                    outcomes.insert(id, None);
                    self.route(at, out);
                }
                Err(e @ SubmitError::QueueFull) => return Err(e.into()),
                Err(e) => {
                    let rejection = match e {
                        SubmitError::Duplicate => Rejection::Replay,
                        _ => Rejection::StaleTimestamp,
                    };
                    outcomes.insert(
                        id,
                        Some(TxnOutcome {
                            txn_id: id,
                            kind,
                            rejection: Some(rejection),
                        }),
                    );
                }
            }
        }

        let deadline = self.now_ms + SUBMIT_BUDGET_MS;
        while outcomes.values().any(Option::is_none) {
            if let Some((to, msg)) = self.queue.pop_front() {
                let out = self.replicas[to].on_message(msg, self.now_ms);
                for c in &out.commits {
                    if to == 0 {
                        for o in &c.outcomes {
                            if let Some(slot @ None) = outcomes.get_mut(&o.txn_id) {
                                *slot = Some(o.clone());
                            }
                        }
                    }
                }
                self.route(to, out);
                continue;
            }
            let next = self
                .replicas
                .iter()
                .filter_map(Replica::next_deadline)
                .min();
            match next {
                Some(t) if t <= deadline => {
                    self.now_ms = self.now_ms.max(t);
                    for i in 0..self.replicas.len() {
                        if self.replicas[i]
                            .next_deadline()
                            .is_some_and(|d| d <= self.now_ms)
                        {
                            let out = self.replicas[i].tick(self.now_ms);
                            self.route(i, out);
                        }
                    }
                }
                _ => return Err(ClientError::Timeout),
            }
        }
        // let stragglers finish the round so every replica is at the same height
        while let Some((to, msg)) = self.queue.pop_front() {
            let out = self.replicas[to].on_message(msg, self.now_ms);
            self.route(to, out);
        }
        self.persist()?;
        Ok(order
            .iter()
            .map(|id| outcomes[id].clone().expect("all resolved"))
            .collect())
    }

    fn view(&self) -> Result<LedgerView, ClientError> {
        if !self.reachable {
            return Err(ClientError::Unreachable);
        }
        Ok(self.replicas[0].state().snapshot())
    }

    fn now(&self) -> u64 {
        self.now_ms / 1000
    }
}

fn make_genesis<R: RngCore + CryptoRng>(
    rng: &mut R,
    cfg: &EmbeddedConfig,
) -> (Genesis, Vec<KeyPair>) {
    let keys: Vec<KeyPair> = (0..cfg.nodes).map(|_| KeyPair::generate(rng)).collect();
    let genesis = Genesis {
        chain_id: cfg.chain_id.clone(),
        timestamp: cfg.start_time,
        registrars: cfg.registrars.clone(),
        nodes: keys
            .iter()
            .enumerate()
            .map(|(i, k)| NodeIdentity {
                id: NodeId(i as u32),
                public_key: k.public_key(),
            })
            .collect(),
        vin_tag_key: Digest::random(rng),
    };
    (genesis, keys)
}
