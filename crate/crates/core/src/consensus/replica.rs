use std::collections::BTreeMap;

use super::message::{
    CertifiedBlock, CommitCert, ConsensusMessage, MessageBody, Prepared, PreparedCert,
};
use super::{ConsensusError, ReplicaConfig};
use crate::crypto::{Digest, KeyPair, PublicKey};
use crate::ledger::{
    AppliedBlock, Block, Genesis, LedgerState, NodeId, Transaction, TxnOutcome, TIMESTAMP_SKEW_S,
};

/// Largest number of blocks returned for one fetch.
const FETCH_LIMIT: u64 = 64;
/// Pre-prepares further ahead than this are not buffered.
const FUTURE_WINDOW: u64 = 4;
/// Cap on the view-timeout multiplier (2^3).
const MAX_BACKOFF: u32 = 3;
/// Cap on the per-transaction forward backoff multiplier.
const MAX_FORWARD_BACKOFF: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dest {
    /// Every other node.
    All,
    To(NodeId),
}

#[derive(Debug, Clone)]
pub struct CommittedBlock {
    pub block: Block,
    pub outcomes: Vec<TxnOutcome>,
    pub view: u64,
}

#[derive(Debug, Default)]
pub struct Output {
    pub messages: Vec<(Dest, ConsensusMessage)>,
    pub commits: Vec<CommittedBlock>,
}

impl Output {
    fn send(&mut self, to: NodeId, msg: ConsensusMessage) {
        self.messages.push((Dest::To(to), msg));
    }

    fn broadcast(&mut self, msg: ConsensusMessage) {
        self.messages.push((Dest::All, msg));
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty() && self.commits.is_empty()
    }

    pub fn extend(&mut self, other: Output) {
        self.messages.extend(other.messages);
        self.commits.extend(other.commits);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubmitError {
    #[error("pending queue is full")]
    QueueFull,
    #[error("timestamp outside the accepted window")]
    Stale,
    #[error("transaction already committed")]
    Duplicate,
}

/// The block accepted for the next sequence number in the current view.
#[derive(Debug, Clone)]
struct Slot {
    view: u64,
    seq: u64,
    digest: Digest,
    block: Block,
    pre_prepare: ConsensusMessage,
    applied: AppliedBlock,
    my_prepare: ConsensusMessage,
    my_commit: Option<ConsensusMessage>,
}

#[derive(Debug, Clone)]
struct ViewChangeState {
    target: u64,
    deadline: u64,
    message: ConsensusMessage,
}

#[derive(Debug, Clone)]
struct Pending {
    txn: Transaction,
    next_forward: u64,
    forwards: u32,
}

type VoteKey = (u64, u64, Digest);

#[derive(Debug, Clone)]
pub struct Replica {
    cfg: ReplicaConfig,
    key: KeyPair,
    node_keys: BTreeMap<NodeId, PublicKey>,
    state: LedgerState,
    chain: Vec<Block>,
    certs: BTreeMap<u64, CommitCert>,
    view: u64,
    view_change: Option<ViewChangeState>,
    slot: Option<Slot>,
    /// Digest of the first PrePrepare accepted per (view, seq).
    accepted: BTreeMap<(u64, u64), Digest>,
    prepares: BTreeMap<VoteKey, BTreeMap<NodeId, ConsensusMessage>>,
    commits: BTreeMap<VoteKey, BTreeMap<NodeId, ConsensusMessage>>,
    /// Highest-view prepared certificate for seq = height + 1.
    prepared: Option<(Prepared, PreparedCert)>,
    /// After a NewView that carried a prepared value, the only block
    /// acceptable at that seq in the new view.
    locked: Option<(u64, Digest)>,
    future: BTreeMap<u64, Vec<ConsensusMessage>>,
    vc_log: BTreeMap<NodeId, ConsensusMessage>,
    last_new_view: Option<ConsensusMessage>,
    pending: BTreeMap<Digest, Pending>,
    batch_since: Option<u64>,
    progress_deadline: Option<u64>,
    probed: bool,
    backoff: u32,
    next_retransmit: Option<u64>,
    last_fetch: Option<u64>,
    hints: BTreeMap<NodeId, u64>,
    now: u64,
}

impl Replica {
    pub fn new(
        cfg: ReplicaConfig,
        key: KeyPair,
        genesis: &Genesis,
    ) -> Result<Self, ConsensusError> {
        let (state, block) = LedgerState::genesis(genesis);
        Self::with_state(cfg, key, state, vec![block])
    }

    /// Rebuilds a replica from a stored chain starting at genesis.
    pub fn from_chain(
        cfg: ReplicaConfig,
        key: KeyPair,
        blocks: &[Block],
    ) -> Result<Self, ConsensusError> {
        let state =
            LedgerState::replay(blocks).map_err(|e| ConsensusError::Chain(e.to_string()))?;
        Self::with_state(cfg, key, state, blocks.to_vec())
    }

    fn with_state(
        cfg: ReplicaConfig,
        key: KeyPair,
        state: LedgerState,
        chain: Vec<Block>,
    ) -> Result<Self, ConsensusError> {
        cfg.validate()?;
        let node_keys: BTreeMap<NodeId, PublicKey> =
            state.nodes().iter().map(|n| (n.id, n.public_key)).collect();
        let mut ids: Vec<NodeId> = node_keys.keys().copied().collect();
        let mut want = cfg.node_ids.clone();
        ids.sort();
        want.sort();
        if ids != want || node_keys.get(&cfg.this_node) != Some(&key.public_key()) {
            return Err(ConsensusError::KeyMismatch);
        }
        Ok(Replica {
            cfg,
            key,
            node_keys,
            state,
            chain,
            certs: BTreeMap::new(),
            view: 0,
            view_change: None,
            slot: None,
            accepted: BTreeMap::new(),
            prepares: BTreeMap::new(),
            commits: BTreeMap::new(),
            prepared: None,
            locked: None,
            future: BTreeMap::new(),
            vc_log: BTreeMap::new(),
            last_new_view: None,
            pending: BTreeMap::new(),
            batch_since: None,
            progress_deadline: None,
            probed: false,
            backoff: 0,
            next_retransmit: None,
            last_fetch: None,
            hints: BTreeMap::new(),
            now: 0,
        })
    }

    pub fn id(&self) -> NodeId {
        self.cfg.this_node
    }

    pub fn key(&self) -> &KeyPair {
        &self.key
    }

    pub fn config(&self) -> &ReplicaConfig {
        &self.cfg
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn height(&self) -> u64 {
        self.state.height()
    }

    pub fn state(&self) -> &LedgerState {
        &self.state
    }

    /// Committed blocks, genesis first.
    pub fn chain(&self) -> &[Block] {
        &self.chain
    }

    pub fn commit_cert(&self, height: u64) -> Option<&CommitCert> {
        self.certs.get(&height)
    }

    pub fn leader(&self) -> NodeId {
        self.cfg.leader(self.view)
    }

    pub fn is_leader(&self) -> bool {
        self.leader() == self.id() && self.view_change.is_none()
    }

    pub fn in_view_change(&self) -> bool {
        self.view_change.is_some()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    fn now_s(&self) -> u64 {
        self.now / 1000
    }

    fn sign(&self, body: MessageBody) -> ConsensusMessage {
        ConsensusMessage::sign(body, self.id(), &self.key)
    }

    fn timeout(&self) -> u64 {
        self.cfg.view_timeout_ms << self.backoff.min(MAX_BACKOFF)
    }

    fn has_work(&self) -> bool {
        !self.pending.is_empty() || self.slot.is_some()
    }

    fn arm_progress(&mut self) {
        if self.progress_deadline.is_none() && self.view_change.is_none() && self.has_work() {
            self.progress_deadline = Some(self.now + self.timeout());
        }
        if self.next_retransmit.is_none() {
            self.next_retransmit = Some(self.now + self.cfg.retransmit_ms);
        }
    }

    // ---- client path ----

    pub fn on_client_txn(&mut self, txn: Transaction, now: u64) -> Result<Output, SubmitError> {
        self.now = self.now.max(now);
        let id = self.add_pending(txn.clone())?;
        let mut out = Output::default();
        if self.is_leader() {
            self.maybe_propose(&mut out);
        } else if self.view_change.is_none() {
            if let Some(p) = self.pending.get_mut(&id) {
                p.forwards = 1;
                p.next_forward = self.now + 2 * self.cfg.retransmit_ms;
            }
            let msg = self.sign(MessageBody::Forward { txns: vec![txn] });
            out.send(self.leader(), msg);
        }
        self.arm_progress();
        Ok(out)
    }

    fn add_pending(&mut self, txn: Transaction) -> Result<Digest, SubmitError> {
        let now_s = self.now_s();
        if txn.timestamp + TIMESTAMP_SKEW_S < now_s || txn.timestamp > now_s + TIMESTAMP_SKEW_S {
            return Err(SubmitError::Stale);
        }
        if self.state.has_seen(&txn.author, &txn.nonce) {
            return Err(SubmitError::Duplicate);
        }
        let id = txn.id();
        if self.pending.contains_key(&id) {
            return Ok(id);
        }
        if self.pending.len() >= self.cfg.max_pending {
            return Err(SubmitError::QueueFull);
        }
        if self.pending.is_empty() {
            self.batch_since = Some(self.now);
        }
        self.pending.insert(
            id,
            Pending {
                txn,
                next_forward: self.now,
                forwards: 0,
            },
        );
        Ok(id)
    }

    fn maybe_propose(&mut self, out: &mut Output) {
        if !self.is_leader() || self.slot.is_some() || self.pending.is_empty() {
            return;
        }
        let since = *self.batch_since.get_or_insert(self.now);
        if self.pending.len() < self.cfg.batch_size && self.now < since + self.cfg.batch_interval_ms
        {
            return;
        }
        let seq = self.height() + 1;
        let (block, applied) = match self.locked.filter(|(s, _)| *s == seq) {
            // a value carried over by the view change must be re-proposed as is
            Some((_, digest)) => {
                let Some(block) = self
                    .prepared
                    .as_ref()
                    .filter(|(p, _)| p.seq == seq && p.digest == digest)
                    .and_then(|(_, cert)| cert.block().cloned())
                else {
                    return;
                };
                match self.state.apply_block(&block) {
                    Ok(a) => (block, a),
                    Err(_) => return,
                }
            }
            None => {
                let mut txns: Vec<&Transaction> = self.pending.values().map(|p| &p.txn).collect();
                txns.sort_by_cached_key(|t| (t.timestamp, t.id()));
                let txns: Vec<Transaction> = txns
                    .into_iter()
                    .take(self.cfg.batch_size)
                    .cloned()
                    .collect();
                self.state.propose_block(txns, self.now_s())
            }
        };
        let pp = self.sign(MessageBody::PrePrepare {
            view: self.view,
            seq,
            block: block.clone(),
        });
        out.broadcast(pp.clone());
        self.batch_since = Some(self.now);
        self.accept(pp, block, applied, out);
    }

    // ---- normal case ----

    pub fn on_message(&mut self, msg: ConsensusMessage, now: u64) -> Output {
        self.now = self.now.max(now);
        let mut out = Output::default();
        if msg.sender == self.id() || !msg.verify(&self.node_keys) {
            return out;
        }
        self.handle(msg, &mut out);
        self.arm_progress();
        out
    }

    fn handle(&mut self, msg: ConsensusMessage, out: &mut Output) {
        match msg.body.clone() {
            MessageBody::Forward { txns } => {
                let relayed = !self.is_leader();
                for t in txns {
                    if let Ok(id) = self.add_pending(t) {
                        // the sender already relays it; only forward on our own much later
                        if let Some(p) = self
                            .pending
                            .get_mut(&id)
                            .filter(|p| relayed && p.forwards == 0)
                        {
                            p.forwards = 2;
                            p.next_forward = self.now + (self.cfg.retransmit_ms << 3);
                        }
                    }
                }
                self.maybe_propose(out);
            }
            MessageBody::PrePrepare { view, seq, block } => {
                self.on_pre_prepare(msg, view, seq, block, out)
            }
            MessageBody::Prepare { view, seq, digest } => {
                self.on_vote(msg, false, view, seq, digest, out)
            }
            MessageBody::Commit { view, seq, digest } => {
                self.on_vote(msg, true, view, seq, digest, out)
            }
            MessageBody::ViewChange {
                new_view,
                last_stable,
                prepared,
            } => self.on_view_change(msg, new_view, last_stable, prepared, out),
            MessageBody::NewView { new_view, .. } => {
                if new_view > self.view || (new_view == self.view && self.view_change.is_some()) {
                    self.on_new_view(msg, out);
                }
            }
            MessageBody::FetchBlocks { from, view } => self.on_fetch(msg.sender, from, view, out),
            MessageBody::Blocks { blocks, new_view } => {
                for cb in blocks {
                    self.commit_certified(cb, out);
                }
                if let Some(nv) = new_view {
                    if nv.verify(&self.node_keys) {
                        if let MessageBody::NewView { new_view, .. } = nv.body {
                            if new_view > self.view
                                || (new_view == self.view && self.view_change.is_some())
                            {
                                self.on_new_view(*nv, out);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Reacts to a message from a different view: tell laggards about the
    /// current view, or ask a node that is ahead of us to catch us up.
    fn view_mismatch(&mut self, sender: NodeId, view: u64, out: &mut Output) {
        if view < self.view {
            if let Some(nv) = &self.last_new_view {
                let due = self
                    .hints
                    .get(&sender)
                    .is_none_or(|t| self.now >= t + self.cfg.retransmit_ms);
                if due {
                    self.hints.insert(sender, self.now);
                    let hint = self.sign(MessageBody::Blocks {
                        blocks: Vec::new(),
                        new_view: Some(Box::new(nv.clone())),
                    });
                    out.send(sender, hint);
                }
            }
        } else if view > self.view {
            self.fetch(sender, out);
        }
    }

    fn fetch(&mut self, from: NodeId, out: &mut Output) {
        if self
            .last_fetch
            .is_some_and(|t| self.now < t + self.cfg.retransmit_ms)
        {
            return;
        }
        self.last_fetch = Some(self.now);
        let msg = self.sign(MessageBody::FetchBlocks {
            from: self.height() + 1,
            view: self.view,
        });
        out.send(from, msg);
    }

    fn on_pre_prepare(
        &mut self,
        msg: ConsensusMessage,
        view: u64,
        seq: u64,
        block: Block,
        out: &mut Output,
    ) {
        if view != self.view || self.view_change.is_some() {
            if view != self.view {
                self.view_mismatch(msg.sender, view, out);
            }
            return;
        }
        if msg.sender != self.cfg.leader(view) || seq <= self.height() {
            return;
        }
        if seq > self.height() + 1 {
            if seq <= self.height() + FUTURE_WINDOW {
                self.future.entry(seq).or_default().push(msg.clone());
            }
            self.fetch(msg.sender, out);
            return;
        }
        let digest = block.hash();
        if self.accepted.contains_key(&(view, seq)) {
            // equivocation or a retransmission; either way the first one stands
            return;
        }
        if let Some((s, d)) = self.locked {
            if s == seq && d != digest {
                return;
            }
        }
        if block.height != seq
            || block.txns.len() > self.cfg.batch_size
            || block.timestamp > self.now_s() + TIMESTAMP_SKEW_S
        {
            return;
        }
        let Ok(applied) = self.state.apply_block(&block) else {
            return;
        };
        self.accept(msg, block, applied, out);
    }

    fn accept(
        &mut self,
        pp: ConsensusMessage,
        block: Block,
        applied: AppliedBlock,
        out: &mut Output,
    ) {
        let MessageBody::PrePrepare { view, seq, .. } = pp.body else {
            return;
        };
        let digest = block.hash();
        self.accepted.insert((view, seq), digest);
        let prepare = self.sign(MessageBody::Prepare { view, seq, digest });
        out.broadcast(prepare.clone());
        let me = self.id();
        self.prepares
            .entry((view, seq, digest))
            .or_default()
            .insert(me, prepare.clone());
        self.slot = Some(Slot {
            view,
            seq,
            digest,
            block,
            pre_prepare: pp,
            applied,
            my_prepare: prepare,
            my_commit: None,
        });
        self.arm_progress();
        self.check_slot(out);
    }

    fn on_vote(
        &mut self,
        msg: ConsensusMessage,
        commit: bool,
        view: u64,
        seq: u64,
        digest: Digest,
        out: &mut Output,
    ) {
        if seq <= self.height() {
            return;
        }
        if view < self.view {
            self.view_mismatch(msg.sender, view, out);
            return;
        }
        if seq > self.height() + FUTURE_WINDOW {
            self.fetch(msg.sender, out);
            return;
        }
        let sender = msg.sender;
        let log = if commit {
            &mut self.commits
        } else {
            &mut self.prepares
        };
        log.entry((view, seq, digest))
            .or_default()
            .insert(sender, msg);
        if view > self.view {
            self.view_mismatch(sender, view, out);
        }
        if seq > self.height() + 1 {
            self.fetch(sender, out);
            return;
        }
        self.check_slot(out);
        // a quorum committed a block we never saw
        if commit {
            let have = self.slot.as_ref().is_some_and(|s| s.digest == digest);
            let n = self
                .commits
                .get(&(view, seq, digest))
                .map_or(0, |m| m.len());
            if !have && n >= self.cfg.quorum() {
                self.fetch(sender, out);
            }
        }
    }

    fn check_slot(&mut self, out: &mut Output) {
        let Some(slot) = &self.slot else { return };
        let key = (slot.view, slot.seq, slot.digest);
        let quorum = self.cfg.quorum();
        if slot.my_commit.is_none() && slot.view == self.view && self.view_change.is_none() {
            let votes = self.prepares.get(&key).map_or(0, |m| m.len());
            if votes >= quorum {
                let prepares: Vec<ConsensusMessage> =
                    self.prepares[&key].values().cloned().collect();
                let cert = PreparedCert {
                    pre_prepare: Box::new(slot.pre_prepare.clone()),
                    prepares,
                };
                let info = Prepared {
                    view: key.0,
                    seq: key.1,
                    digest: key.2,
                };
                if self
                    .prepared
                    .as_ref()
                    .is_none_or(|(p, _)| p.view <= info.view || p.seq != info.seq)
                {
                    self.prepared = Some((info, cert));
                }
                let commit = self.sign(MessageBody::Commit {
                    view: key.0,
                    seq: key.1,
                    digest: key.2,
                });
                out.broadcast(commit.clone());
                let me = self.id();
                self.commits
                    .entry(key)
                    .or_default()
                    .insert(me, commit.clone());
                if let Some(s) = self.slot.as_mut() {
                    s.my_commit = Some(commit);
                }
            }
        }
        let votes = self.commits.get(&key).map_or(0, |m| m.len());
        if votes >= quorum {
            let slot = self.slot.take().expect("slot present");
            let commits: Vec<ConsensusMessage> = self.commits[&key].values().cloned().collect();
            let cert = CommitCert {
                view: slot.view,
                commits,
            };
            self.commit(slot.block, slot.applied, cert, out);
        }
    }

    fn commit(&mut self, block: Block, applied: AppliedBlock, cert: CommitCert, out: &mut Output) {
        let view = cert.view;
        let height = block.height;
        self.state = applied.state;
        self.certs.insert(height, cert);
        for t in &block.txns {
            self.pending.remove(&t.id());
        }
        let now_s = self.now_s();
        let state = &self.state;
        self.pending.retain(|_, p| {
            !state.has_seen(&p.txn.author, &p.txn.nonce)
                && p.txn.timestamp + TIMESTAMP_SKEW_S >= now_s
        });
        self.chain.push(block.clone());
        out.commits.push(CommittedBlock {
            block,
            outcomes: applied.outcomes,
            view,
        });

        if self.slot.as_ref().is_some_and(|s| s.seq <= height) {
            self.slot = None;
        }
        if self.prepared.as_ref().is_some_and(|(p, _)| p.seq <= height) {
            self.prepared = None;
        }
        if self.locked.is_some_and(|(s, _)| s <= height) {
            self.locked = None;
        }
        self.accepted.retain(|(_, s), _| *s > height);
        self.prepares.retain(|(_, s, _), _| *s > height);
        self.commits.retain(|(_, s, _), _| *s > height);
        self.future.retain(|s, _| *s > height);

        self.backoff = 0;
        self.probed = false;
        self.progress_deadline = None;
        self.arm_progress();
        if self.pending.is_empty() {
            self.batch_since = None;
        }

        if self.view_change.is_some() {
            self.try_new_view(out);
        }
        if let Some(msgs) = self.future.remove(&(height + 1)) {
            for m in msgs {
                self.handle(m, out);
            }
        }
        self.maybe_propose(out);
        if self.slot.is_none() {
            self.check_pending_votes(out);
        }
    }

    /// After advancing, votes for the new next seq may already hold a commit quorum.
    fn check_pending_votes(&mut self, out: &mut Output) {
        let seq = self.height() + 1;
        let quorum = self.cfg.quorum();
        let me = self.id();
        let sender = self
            .commits
            .iter()
            .filter(|((_, s, _), m)| *s == seq && m.len() >= quorum)
            .find_map(|(_, m)| m.keys().find(|id| **id != me).copied());
        if let Some(sender) = sender {
            self.fetch(sender, out);
        }
    }

    fn commit_certified(&mut self, cb: CertifiedBlock, out: &mut Output) {
        if cb.block.height != self.height() + 1
            || !cb.cert.verify(&cb.block, &self.cfg, &self.node_keys)
        {
            return;
        }
        let Ok(applied) = self.state.apply_block(&cb.block) else {
            return;
        };
        self.commit(cb.block, applied, cb.cert, out);
    }

    fn on_fetch(&mut self, sender: NodeId, from: u64, view: u64, out: &mut Output) {
        let to = (from + FETCH_LIMIT).min(self.height() + 1);
        let mut blocks = Vec::new();
        for h in from.max(1)..to {
            match self.certs.get(&h) {
                Some(cert) => blocks.push(CertifiedBlock {
                    block: self.chain[h as usize].clone(),
                    cert: cert.clone(),
                }),
                None => break,
            }
        }
        let new_view = self
            .last_new_view
            .as_ref()
            .filter(|_| self.view > view)
            .map(|m| Box::new(m.clone()));
        if blocks.is_empty() && new_view.is_none() {
            return;
        }
        let msg = self.sign(MessageBody::Blocks { blocks, new_view });
        out.send(sender, msg);
    }

    // ---- view change ----

    /// Forces a view change, as when the view timer expires.
    pub fn on_timeout(&mut self, now: u64) -> Output {
        self.now = self.now.max(now);
        let mut out = Output::default();
        let target = self.view_change.as_ref().map_or(self.view, |v| v.target) + 1;
        self.start_view_change(target, &mut out);
        out
    }

    fn start_view_change(&mut self, target: u64, out: &mut Output) {
        if target <= self.view
            || self
                .view_change
                .as_ref()
                .is_some_and(|v| v.target >= target)
        {
            return;
        }
        self.backoff = (self.backoff + 1).min(MAX_BACKOFF);
        let prepared = self
            .prepared
            .as_ref()
            .filter(|(p, _)| p.seq == self.height() + 1)
            .map(|(_, c)| c.clone());
        let msg = self.sign(MessageBody::ViewChange {
            new_view: target,
            last_stable: self.height(),
            prepared,
        });
        out.broadcast(msg.clone());
        self.vc_log.insert(self.id(), msg.clone());
        self.view_change = Some(ViewChangeState {
            target,
            deadline: self.now + self.timeout(),
            message: msg,
        });
        self.progress_deadline = None;
        self.try_new_view(out);
    }

    fn on_view_change(
        &mut self,
        msg: ConsensusMessage,
        new_view: u64,
        last_stable: u64,
        prepared: Option<PreparedCert>,
        out: &mut Output,
    ) {
        if let Some(cert) = &prepared {
            if cert.verify(&self.cfg, &self.node_keys).is_none() {
                return;
            }
        }
        let sender = msg.sender;
        if new_view <= self.view {
            self.view_mismatch(sender, new_view.saturating_sub(1), out);
            return;
        }
        let newer = self
            .vc_log
            .get(&sender)
            .is_none_or(|old| vc_view(old) < new_view);
        if newer {
            self.vc_log.insert(sender, msg);
        }
        if last_stable > self.height() {
            self.fetch(sender, out);
        }
        // join once f+1 others are ahead of us
        let current = self.view_change.as_ref().map_or(self.view, |v| v.target);
        let ahead: Vec<u64> = self
            .vc_log
            .iter()
            .filter(|(id, _)| **id != self.id())
            .map(|(_, m)| vc_view(m))
            .filter(|v| *v > current)
            .collect();
        if ahead.len() > self.cfg.f {
            let target = *ahead.iter().min().expect("nonempty");
            self.start_view_change(target, out);
        }
        self.try_new_view(out);
    }

    /// As the leader of the target view, sends NewView once a quorum of
    /// ViewChanges is in and this replica has caught up.
    fn try_new_view(&mut self, out: &mut Output) {
        let Some(vc) = &self.view_change else { return };
        let target = vc.target;
        if self.cfg.leader(target) != self.id() {
            return;
        }
        let proof: Vec<ConsensusMessage> = self
            .vc_log
            .values()
            .filter(|m| vc_view(m) == target)
            .cloned()
            .collect();
        if proof.len() < self.cfg.quorum() {
            return;
        }
        let Some(plan) = plan_new_view(&proof, &self.cfg, &self.node_keys) else {
            return;
        };
        if self.height() < plan.stable {
            if let Some(ahead) = proof.iter().find(|m| vc_stable(m) == plan.stable) {
                let sender = ahead.sender;
                self.fetch(sender, out);
            }
            return;
        }
        let pre_prepare = match &plan.reproposal {
            Some((p, cert)) if p.seq == self.height() + 1 => {
                let block = cert.block().expect("verified").clone();
                Some(Box::new(self.sign(MessageBody::PrePrepare {
                    view: target,
                    seq: p.seq,
                    block,
                })))
            }
            _ => None,
        };
        let nv = self.sign(MessageBody::NewView {
            new_view: target,
            proof,
            pre_prepare: pre_prepare.clone(),
        });
        out.broadcast(nv.clone());
        self.enter_view(
            target,
            plan.reproposal.map(|(p, _)| (p.seq, p.digest)),
            nv,
            out,
        );
        if let Some(pp) = pre_prepare {
            if let MessageBody::PrePrepare { block, .. } = &pp.body {
                let block = block.clone();
                if let Ok(applied) = self.state.apply_block(&block) {
                    self.accept(*pp, block, applied, out);
                }
            }
        }
        self.maybe_propose(out);
    }

    fn on_new_view(&mut self, msg: ConsensusMessage, out: &mut Output) {
        let MessageBody::NewView {
            new_view,
            proof,
            pre_prepare,
        } = &msg.body
        else {
            return;
        };
        let new_view = *new_view;
        if msg.sender != self.cfg.leader(new_view) {
            return;
        }
        if proof.iter().any(|m| vc_view(m) != new_view) {
            return;
        }
        let Some(plan) = plan_new_view(proof, &self.cfg, &self.node_keys) else {
            return;
        };
        let lock = plan.reproposal.as_ref().map(|(p, _)| (p.seq, p.digest));
        if let Some(pp) = pre_prepare {
            let ok = match (&pp.body, lock) {
                (MessageBody::PrePrepare { view, seq, block }, Some((s, d))) => {
                    *view == new_view
                        && *seq == s
                        && block.hash() == d
                        && pp.sender == msg.sender
                        && pp.verify(&self.node_keys)
                }
                _ => false,
            };
            if !ok {
                return;
            }
        }
        let pre_prepare = pre_prepare.clone();
        let leader = msg.sender;
        self.enter_view(new_view, lock, msg, out);
        if self.height() < plan.stable {
            self.fetch(leader, out);
        }
        if let Some(pp) = pre_prepare {
            self.handle(*pp, out);
        }
    }

    fn enter_view(
        &mut self,
        view: u64,
        lock: Option<(u64, Digest)>,
        new_view: ConsensusMessage,
        out: &mut Output,
    ) {
        self.view = view;
        self.view_change = None;
        self.slot = None;
        self.locked = lock.filter(|(s, _)| *s > self.height());
        self.last_new_view = Some(new_view);
        self.vc_log.retain(|_, m| vc_view(m) > view);
        self.future.clear();
        self.progress_deadline = None;
        self.batch_since = if self.pending.is_empty() {
            None
        } else {
            Some(self.now)
        };
        self.arm_progress();
        // hand our pending transactions to the new leader
        if self.leader() != self.id() && !self.pending.is_empty() {
            let txns: Vec<Transaction> = self.pending.values().map(|p| p.txn.clone()).collect();
            for p in self.pending.values_mut() {
                p.forwards = 1;
                p.next_forward = self.now + 2 * self.cfg.retransmit_ms;
            }
            let msg = self.sign(MessageBody::Forward { txns });
            out.send(self.leader(), msg);
        }
    }

    // ---- clock ----

    /// Earliest time at which [`Replica::tick`] has something to do.
    pub fn next_deadline(&self) -> Option<u64> {
        let mut d: Option<u64> = None;
        let mut add = |t: Option<u64>| {
            if let Some(t) = t {
                d = Some(d.map_or(t, |x| x.min(t)));
            }
        };
        add(self.view_change.as_ref().map(|v| v.deadline));
        add(self.progress_deadline);
        if self.is_leader() && self.slot.is_none() && !self.pending.is_empty() {
            add(Some(
                self.batch_since.unwrap_or(self.now) + self.cfg.batch_interval_ms,
            ));
        }
        if self.view_change.is_some() || self.slot.is_some() || !self.pending.is_empty() {
            add(self.next_retransmit);
        }
        d
    }

    pub fn tick(&mut self, now: u64) -> Output {
        self.now = self.now.max(now);
        let mut out = Output::default();
        let now = self.now;

        if let Some(vc) = &self.view_change {
            if now >= vc.deadline {
                let target = vc.target;
                // a replica that already moved past the target also supported it
                let joined = self
                    .vc_log
                    .values()
                    .filter(|m| vc_view(m) >= target)
                    .count();
                if joined >= self.cfg.quorum() {
                    // the view change itself stalled: the new leader is down
                    self.start_view_change(target + 1, &mut out);
                } else {
                    let msg = vc.message.clone();
                    let deadline = now + self.timeout();
                    if let Some(vc) = self.view_change.as_mut() {
                        vc.deadline = deadline;
                    }
                    out.broadcast(msg);
                }
            }
        } else if self.progress_deadline.is_some_and(|d| now >= d) {
            if !self.probed {
                // first check whether we are simply behind
                self.probed = true;
                self.progress_deadline = Some(now + self.cfg.view_timeout_ms / 2);
                self.last_fetch = Some(now);
                let msg = self.sign(MessageBody::FetchBlocks {
                    from: self.height() + 1,
                    view: self.view,
                });
                out.broadcast(msg);
            } else {
                self.start_view_change(self.view + 1, &mut out);
            }
        }

        self.maybe_propose(&mut out);

        if self.next_retransmit.is_some_and(|t| now >= t) {
            self.next_retransmit = Some(now + self.cfg.retransmit_ms);
            self.retransmit(&mut out);
        }
        self.drop_stale_pending();
        out
    }

    fn retransmit(&mut self, out: &mut Output) {
        if let Some(vc) = &self.view_change {
            out.broadcast(vc.message.clone());
            return;
        }
        if let Some(slot) = &self.slot {
            if slot.pre_prepare.sender == self.id() {
                out.broadcast(slot.pre_prepare.clone());
            }
            out.broadcast(slot.my_prepare.clone());
            if let Some(c) = &slot.my_commit {
                out.broadcast(c.clone());
            }
        }
        if self.leader() != self.id() {
            let now = self.now;
            let base = self.cfg.retransmit_ms;
            let (mut direct, mut everyone) = (Vec::new(), Vec::new());
            for p in self.pending.values_mut() {
                if now >= p.next_forward {
                    // after an unanswered forward, let every replica see the
                    // txn so their timers also notice a silent leader
                    if p.forwards >= 1 {
                        &mut everyone
                    } else {
                        &mut direct
                    }
                    .push(p.txn.clone());
                    p.forwards = (p.forwards + 1).min(MAX_FORWARD_BACKOFF);
                    p.next_forward = now + (base << p.forwards);
                }
            }
            if !direct.is_empty() {
                let msg = self.sign(MessageBody::Forward { txns: direct });
                out.send(self.leader(), msg);
            }
            if !everyone.is_empty() {
                out.broadcast(self.sign(MessageBody::Forward { txns: everyone }));
            }
        }
    }

    fn drop_stale_pending(&mut self) {
        let now_s = self.now_s();
        let before = self.pending.len();
        self.pending
            .retain(|_, p| p.txn.timestamp + TIMESTAMP_SKEW_S >= now_s);
        if before != self.pending.len() && self.pending.is_empty() {
            self.batch_since = None;
            if self.slot.is_none() {
                self.progress_deadline = None;
            }
        }
    }

    /// Called when a crashed node restarts with its state intact.
    pub fn on_recover(&mut self, now: u64) -> Output {
        self.now = self.now.max(now);
        let mut out = Output::default();
        self.progress_deadline = None;
        self.probed = false;
        self.backoff = 0;
        if let Some(vc) = self.view_change.as_mut() {
            vc.deadline = now + self.cfg.view_timeout_ms;
        }
        self.next_retransmit = Some(now + self.cfg.retransmit_ms);
        self.drop_stale_pending();
        self.arm_progress();
        self.last_fetch = Some(now);
        let msg = self.sign(MessageBody::FetchBlocks {
            from: self.height() + 1,
            view: self.view,
        });
        out.broadcast(msg);
        out
    }
}

fn vc_view(m: &ConsensusMessage) -> u64 {
    match &m.body {
        MessageBody::ViewChange { new_view, .. } => *new_view,
        _ => 0,
    }
}

fn vc_stable(m: &ConsensusMessage) -> u64 {
    match &m.body {
        MessageBody::ViewChange { last_stable, .. } => *last_stable,
        _ => 0,
    }
}

struct NewViewPlan {
    /// Highest committed height reported in the proof.
    stable: u64,
    /// Prepared value above `stable` that must be re-proposed.
    reproposal: Option<(Prepared, PreparedCert)>,
}

/// Validates a NewView proof and derives what the new view must carry over.
fn plan_new_view(
    proof: &[ConsensusMessage],
    cfg: &ReplicaConfig,
    keys: &BTreeMap<NodeId, PublicKey>,
) -> Option<NewViewPlan> {
    let mut senders = std::collections::BTreeSet::new();
    let mut stable = 0;
    let mut best: Option<(Prepared, PreparedCert)> = None;
    for m in proof {
        let MessageBody::ViewChange {
            last_stable,
            prepared,
            ..
        } = &m.body
        else {
            return None;
        };
        if !m.verify(keys) || !senders.insert(m.sender) {
            return None;
        }
        stable = stable.max(*last_stable);
        if let Some(cert) = prepared {
            let p = cert.verify(cfg, keys)?;
            let better = best
                .as_ref()
                .is_none_or(|(b, _)| (p.seq, p.view) > (b.seq, b.view));
            if better {
                best = Some((p, cert.clone()));
            }
        }
    }
    if senders.len() < cfg.quorum() {
        return None;
    }
    let reproposal = best.filter(|(p, _)| p.seq > stable);
    Some(NewViewPlan { stable, reproposal })
}
