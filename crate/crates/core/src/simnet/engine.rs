use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::metrics::{self, CommitRecord, MetricsSample};
use super::workload::{workload, FollowUp, Population};
use super::{SimConfig, SimError, TxnClass, SIM_EPOCH_S};
use crate::consensus::{ConsensusMessage, Dest, Output, Replica};
use crate::crypto::Digest;
use crate::ledger::{Block, NodeId};

const EPOCH_MS: u64 = SIM_EPOCH_S * 1000;

// independent ChaCha streams per concern, so e.g. changing the drop rate
// does not reshuffle the workload
const STREAM_SETUP: u64 = 1;
const STREAM_ARRIVALS: u64 = 2;
const STREAM_CONTENT: u64 = 3;
const STREAM_NETWORK: u64 = 4;

#[derive(Debug, Clone)]
pub enum EventKind {
    Deliver {
        to: NodeId,
        msg: Box<ConsensusMessage>,
    },
    Timer {
        node: NodeId,
    },
    Crash {
        node: NodeId,
    },
    Recover {
        node: NodeId,
    },
    Inject {
        class: TxnClass,
    },
    /// Credential definition for a schema that just committed.
    InjectDef {
        follow: Box<FollowUp>,
    },
}

#[derive(Debug, Clone)]
pub struct Event {
    /// Milliseconds after the start of the run.
    pub at: u64,
    pub seq: u64,
    pub kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimStats {
    pub injected: u64,
    pub committed: u64,
    /// Executed in a block but rejected by validation.
    pub rejected: u64,
    /// Refused by the receiving replica at submission.
    pub refused: u64,
    /// Neither committed nor refused when the run ended.
    pub in_flight: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    /// Deliveries addressed to a crashed node.
    pub messages_lost: u64,
    pub events: u64,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub metrics: Vec<MetricsSample>,
    /// Committed chain of every replica, indexed by node position.
    pub chains: Vec<Vec<Block>>,
    pub stats: SimStats,
    /// Running digest over the processed event sequence.
    pub trace: Digest,
}

struct Submitted {
    at_ms: u64,
    class: TxnClass,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    replicas: Vec<Replica>,
    index: BTreeMap<NodeId, usize>,
    up: Vec<bool>,
    armed: Vec<Option<u64>>,
    heap: BinaryHeap<Event>,
    seq: u64,
    now: u64,
    population: Population,
    content_rng: ChaCha20Rng,
    net_rng: ChaCha20Rng,
    submitted: BTreeMap<Digest, Submitted>,
    refused: BTreeSet<Digest>,
    commits: BTreeMap<Digest, CommitRecord>,
    follow_ups: BTreeMap<Digest, FollowUp>,
    stats: SimStats,
    trace: Digest,
}

fn stream(seed: u64, n: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(n);
    rng
}

/// Runs the simulation to `duration_s` and collects metrics and chains.
pub fn run(config: &SimConfig) -> Result<SimResult, SimError> {
    config.validate()?;
    let mut setup_rng = stream(config.seed, STREAM_SETUP);
    let boot = Population::bootstrap(&mut setup_rng, config)?;

    let mut replicas = Vec::with_capacity(config.nodes.n);
    for (id, key) in config.nodes.node_ids.iter().zip(boot.node_keys) {
        replicas.push(Replica::from_chain(
            config.nodes.for_node(*id),
            key,
            &boot.chain,
        )?);
    }
    let index = config
        .nodes
        .node_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, i))
        .collect();
    let n = replicas.len();
    let mut sim = Sim {
        cfg: config,
        replicas,
        index,
        up: vec![true; n],
        armed: vec![None; n],
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0,
        population: boot.population,
        content_rng: stream(config.seed, STREAM_CONTENT),
        net_rng: stream(config.seed, STREAM_NETWORK),
        submitted: BTreeMap::new(),
        refused: BTreeSet::new(),
        commits: BTreeMap::new(),
        follow_ups: BTreeMap::new(),
        stats: SimStats::default(),
        trace: Digest::ZERO,
    };

    for w in &config.crash_schedule {
        sim.push(w.down_from_s * 1000, EventKind::Crash { node: w.node });
        sim.push(w.up_at_s * 1000, EventKind::Recover { node: w.node });
    }
    for inj in workload(config, &mut stream(config.seed, STREAM_ARRIVALS)) {
        sim.push(inj.at_ms, EventKind::Inject { class: inj.class });
    }
    sim.run()?;
    Ok(sim.finish())
}

impl Sim<'_> {
    fn push(&mut self, at: u64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event {
            at,
            seq: self.seq,
            kind,
        });
    }

    fn abs_now(&self) -> u64 {
        EPOCH_MS + self.now
    }

    fn run(&mut self) -> Result<(), SimError> {
        let end = self.cfg.duration_s * 1000;
        while let Some(ev) = self.heap.pop() {
            if ev.at >= end {
                break;
            }
            self.now = ev.at;
            self.stats.events += 1;
            self.record(&ev);
            self.handle(ev)?;
        }
        Ok(())
    }

    fn record(&mut self, ev: &Event) {
        let (tag, node, detail): (&str, u32, String) = match &ev.kind {
            EventKind::Deliver { to, msg } => (
                "deliver",
                to.0,
                format!("{}:{}", msg.body.name(), msg.sender.0),
            ),
            EventKind::Timer { node } => ("timer", node.0, String::new()),
            EventKind::Crash { node } => ("crash", node.0, String::new()),
            EventKind::Recover { node } => ("recover", node.0, String::new()),
            EventKind::Inject { class } => ("inject", 0, class.as_str().to_string()),
            EventKind::InjectDef { .. } => ("inject_def", 0, String::new()),
        };
        let line = format!("{}|{}|{}|{}|{}", ev.at, ev.seq, tag, node, detail);
        self.trace = Digest::of_parts(&[self.trace.as_bytes(), line.as_bytes()]);
    }

    fn handle(&mut self, ev: Event) -> Result<(), SimError> {
        let at = self.abs_now();
        match ev.kind {
            EventKind::Deliver { to, msg } => {
                let i = self.index[&to];
                if !self.up[i] {
                    self.stats.messages_lost += 1;
                    return Ok(());
                }
                let out = self.replicas[i].on_message(*msg, at);
                self.after(i, out);
            }
            EventKind::Timer { node } => {
                let i = self.index[&node];
                if !self.up[i] || self.armed[i] != Some(ev.at) {
                    return Ok(());
                }
                self.armed[i] = None;
                let out = self.replicas[i].tick(at);
                self.after(i, out);
            }
            EventKind::Crash { node } => {
                let i = self.index[&node];
                self.up[i] = false;
                self.armed[i] = None;
            }
            EventKind::Recover { node } => {
                let i = self.index[&node];
                self.up[i] = true;
                let out = self.replicas[i].on_recover(at);
                self.after(i, out);
            }
            EventKind::Inject { class } => {
                let Some(i) = self.pick_live() else {
                    self.stats.injected += 1;
                    self.stats.refused += 1;
                    return Ok(());
                };
                let view = self.replicas[i].state().snapshot();
                let (txn, follow) =
                    self.population
                        .build(&mut self.content_rng, class, &view, at / 1000)?;
                if let Some(f) = follow {
                    self.follow_ups.insert(txn.id(), f);
                }
                self.submit(i, txn, class);
            }
            EventKind::InjectDef { follow } => {
                let Some(i) = self.pick_live() else {
                    return Ok(());
                };
                let txn =
                    self.population
                        .cred_def_for(&mut self.content_rng, &follow, at / 1000)?;
                self.submit(i, txn, TxnClass::SchemaDef);
            }
        }
        Ok(())
    }

    /// A client connects to a uniformly chosen live node.
    fn pick_live(&mut self) -> Option<usize> {
        let live: Vec<usize> = (0..self.replicas.len()).filter(|i| self.up[*i]).collect();
        if live.is_empty() {
            return None;
        }
        Some(live[self.content_rng.gen_range(0..live.len())])
    }

    fn submit(&mut self, i: usize, txn: crate::ledger::Transaction, class: TxnClass) {
        let id = txn.id();
        self.stats.injected += 1;
        self.submitted.insert(
            id,
            Submitted {
                at_ms: self.now,
                class,
            },
        );
        let at = self.abs_now();
        match self.replicas[i].on_client_txn(txn, at) {
            Ok(out) => self.after(i, out),
            Err(_) => {
                self.refused.insert(id);
            }
        }
    }

    fn after(&mut self, from: usize, out: Output) {
        for c in &out.commits {
            let block_s = c.block.timestamp.saturating_sub(SIM_EPOCH_S);
            for o in &c.outcomes {
                let Some(sub) = self.submitted.get(&o.txn_id) else {
                    continue;
                };
                if self.commits.contains_key(&o.txn_id) {
                    continue;
                }
                self.commits.insert(
                    o.txn_id,
                    CommitRecord {
                        class: sub.class,
                        block_s,
                        latency_ms: self.now - sub.at_ms,
                        accepted: o.accepted(),
                    },
                );
                if o.accepted() {
                    if let Some(f) = self.follow_ups.remove(&o.txn_id) {
                        self.push(
                            self.now,
                            EventKind::InjectDef {
                                follow: Box::new(f),
                            },
                        );
                    }
                }
            }
        }
        let me = self.replicas[from].id();
        for (dest, msg) in out.messages {
            match dest {
                Dest::All => {
                    let targets: Vec<NodeId> = self
                        .cfg
                        .nodes
                        .node_ids
                        .iter()
                        .copied()
                        .filter(|t| *t != me)
                        .collect();
                    for t in targets {
                        self.send(t, msg.clone());
                    }
                }
                Dest::To(t) => self.send(t, msg),
            }
        }
        self.rearm(from);
    }

    fn send(&mut self, to: NodeId, msg: ConsensusMessage) {
        self.stats.messages_sent += 1;
        if self.net_rng.gen_bool(self.cfg.drop_rate) {
            self.stats.messages_dropped += 1;
            return;
        }
        let lat = self
            .net_rng
            .gen_range(self.cfg.latency_model.min_ms..=self.cfg.latency_model.max_ms);
        self.push(
            self.now + lat,
            EventKind::Deliver {
                to,
                msg: Box::new(msg),
            },
        );
    }

    fn rearm(&mut self, i: usize) {
        let Some(d) = self.replicas[i].next_deadline() else {
            return;
        };
        // never re-fire within the same millisecond
        let at = d.saturating_sub(EPOCH_MS).max(self.now + 1);
        if self.armed[i].is_none_or(|a| at < a) {
            self.armed[i] = Some(at);
            let node = self.replicas[i].id();
            self.push(at, EventKind::Timer { node });
        }
    }

    fn finish(mut self) -> SimResult {
        for c in self.commits.values() {
            if c.accepted {
                self.stats.committed += 1;
            } else {
                self.stats.rejected += 1;
            }
        }
        self.stats.refused += self
            .refused
            .iter()
            .filter(|id| !self.commits.contains_key(*id))
            .count() as u64;
        self.stats.in_flight =
            self.stats.injected - self.stats.committed - self.stats.rejected - self.stats.refused;
        let records: Vec<CommitRecord> = self.commits.values().cloned().collect();
        SimResult {
            metrics: metrics::compute(self.cfg, &records),
            chains: self.replicas.iter().map(|r| r.chain().to_vec()).collect(),
            stats: self.stats,
            trace: self.trace,
        }
    }
}
