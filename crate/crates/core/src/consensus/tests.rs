use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::crypto::{Digest, KeyPair};
use crate::identity::{register_did, KeyStore};
use crate::ledger::{Genesis, NodeIdentity, Transaction, TxnStamp};

const EPOCH_MS: u64 = 1_700_000_000_000;

/// Minimal harness: fixed 1 ms latency, optional drops, crash set.
struct Net {
    nodes: Vec<Replica>,
    queue: VecDeque<(u64, usize, ConsensusMessage)>,
    crashed: BTreeSet<usize>,
    now: u64,
    drop_rate: f64,
    rng: ChaCha20Rng,
    pre_prepares: Vec<(usize, usize)>,
    seen_pp: BTreeSet<(u64, u64)>,
    committed: Vec<Vec<Digest>>,
    keys: KeyStore,
}

fn cluster(n: usize, tweak: impl Fn(&mut ReplicaConfig)) -> Net {
    let mut rng = ChaCha20Rng::seed_from_u64(n as u64);
    let pairs: Vec<KeyPair> = (0..n).map(|_| KeyPair::generate(&mut rng)).collect();
    let ids: Vec<NodeId> = (0..n as u32).map(NodeId).collect();
    let genesis = Genesis {
        chain_id: "consensus-test".into(),
        timestamp: EPOCH_MS / 1000,
        registrars: Vec::new(),
        nodes: ids
            .iter()
            .zip(&pairs)
            .map(|(id, k)| NodeIdentity {
                id: *id,
                public_key: k.public_key(),
            })
            .collect(),
        vin_tag_key: Digest::ZERO,
    };
    let nodes = ids
        .iter()
        .zip(pairs)
        .map(|(id, k)| {
            let mut cfg = ReplicaConfig::new(ids.clone(), *id).unwrap();
            tweak(&mut cfg);
            Replica::new(cfg, k, &genesis).unwrap()
        })
        .collect();
    Net {
        nodes,
        queue: VecDeque::new(),
        crashed: BTreeSet::new(),
        now: EPOCH_MS,
        drop_rate: 0.0,
        rng,
        pre_prepares: Vec::new(),
        seen_pp: BTreeSet::new(),
        committed: vec![Vec::new(); n],
        keys: KeyStore::new(),
    }
}

impl Net {
    fn route(&mut self, from: usize, out: Output) {
        for c in &out.commits {
            self.committed[from].push(c.block.hash());
        }
        for (dest, msg) in out.messages {
            if let MessageBody::PrePrepare { view, seq, block } = &msg.body {
                // retransmissions repeat the same block
                if self.seen_pp.insert((*view, *seq)) {
                    self.pre_prepares.push((from, block.txns.len()));
                }
            }
            let targets: Vec<usize> = match dest {
                Dest::All => (0..self.nodes.len()).filter(|i| *i != from).collect(),
                Dest::To(id) => vec![id.0 as usize],
            };
            for t in targets {
                if self.drop_rate > 0.0 && self.rng.gen_bool(self.drop_rate) {
                    continue;
                }
                self.queue.push_back((self.now + 1, t, msg.clone()));
            }
        }
    }

    fn submit(&mut self, node: usize, txn: Transaction) {
        let out = self.nodes[node].on_client_txn(txn, self.now).unwrap();
        self.route(node, out);
    }

    fn txn(&mut self) -> Transaction {
        let did = self.keys.create(&mut self.rng);
        let stamp = TxnStamp::new(&mut self.rng, self.now / 1000);
        register_did(&self.keys, &did, stamp).unwrap()
    }

    /// Advances simulated time by `ms`, delivering messages and ticking timers.
    fn run(&mut self, ms: u64) {
        let end = self.now + ms;
        while self.now < end {
            while let Some((at, _, _)) = self.queue.front() {
                if *at > self.now {
                    break;
                }
                let (_, to, msg) = self.queue.pop_front().unwrap();
                if self.crashed.contains(&to) {
                    continue;
                }
                let out = self.nodes[to].on_message(msg, self.now);
                self.route(to, out);
            }
            for i in 0..self.nodes.len() {
                if self.crashed.contains(&i) {
                    continue;
                }
                if self.nodes[i].next_deadline().is_some_and(|d| d <= self.now) {
                    let out = self.nodes[i].tick(self.now);
                    self.route(i, out);
                }
            }
            self.now += 1;
        }
    }

    fn heights(&self) -> Vec<u64> {
        self.nodes.iter().map(|n| n.height()).collect()
    }

    fn assert_agree(&self) {
        let longest = self.nodes.iter().map(|n| n.chain().len()).max().unwrap();
        for h in 0..longest {
            let hashes: BTreeSet<Digest> = self
                .nodes
                .iter()
                .filter_map(|n| n.chain().get(h))
                .map(|b| b.hash())
                .collect();
            assert!(hashes.len() <= 1, "fork at height {h}");
        }
    }
}

#[test]
fn config_validation() {
    let ids = |n: u32| (0..n).map(NodeId).collect::<Vec<_>>();
    assert!(ReplicaConfig::new(ids(4), NodeId(0)).is_ok());
    assert!(ReplicaConfig::new(ids(7), NodeId(6)).is_ok());
    assert_eq!(ReplicaConfig::new(ids(7), NodeId(0)).unwrap().quorum(), 5);
    assert!(matches!(
        ReplicaConfig::new(ids(5), NodeId(0)),
        Err(ConsensusError::BadSize(5))
    ));
    assert!(matches!(
        ReplicaConfig::new(ids(3), NodeId(0)),
        Err(ConsensusError::BadSize(3))
    ));
    assert!(matches!(
        ReplicaConfig::new(ids(4), NodeId(9)),
        Err(ConsensusError::UnknownNode(_))
    ));
    let mut cfg = ReplicaConfig::new(ids(4), NodeId(0)).unwrap();
    cfg.f = 2;
    assert!(matches!(
        cfg.validate(),
        Err(ConsensusError::FaultBound { .. })
    ));
    let mut cfg = ReplicaConfig::new(ids(4), NodeId(0)).unwrap();
    cfg.node_ids[1] = NodeId(0);
    assert!(matches!(cfg.validate(), Err(ConsensusError::DuplicateNode)));
    let cfg = ReplicaConfig::new(ids(7), NodeId(0)).unwrap();
    assert_eq!(
        (0..9).map(|v| cfg.leader(v).0).collect::<Vec<_>>(),
        vec![0, 1, 2, 3, 4, 5, 6, 0, 1]
    );
}

#[test]
fn all_honest_commit_identical_block() {
    let mut net = cluster(4, |_| {});
    let t = net.txn();
    net.submit(0, t);
    net.run(1_500);
    assert_eq!(net.heights(), vec![1, 1, 1, 1]);
    let first = net.nodes[0].chain()[1].hash();
    assert!(net.nodes.iter().all(|n| n.chain()[1].hash() == first));
    // exactly one commit per replica for that seq
    assert!(net.committed.iter().all(|c| c.len() == 1));
}

#[test]
fn single_txn_waits_for_batch_timer() {
    let mut net = cluster(4, |_| {});
    let t = net.txn();
    net.submit(0, t);
    net.run(900);
    assert!(net.pre_prepares.is_empty());
    net.run(200);
    assert_eq!(net.pre_prepares, vec![(0, 1)]);
}

#[test]
fn non_leader_forwards() {
    let mut net = cluster(4, |_| {});
    let t = net.txn();
    let out = net.nodes[2].on_client_txn(t, net.now).unwrap();
    assert_eq!(out.messages.len(), 1);
    assert_eq!(out.messages[0].0, Dest::To(NodeId(0)));
    assert!(matches!(
        out.messages[0].1.body,
        MessageBody::Forward { .. }
    ));
    net.route(2, out);
    net.run(1_500);
    assert_eq!(net.heights(), vec![1, 1, 1, 1]);
    assert_eq!(net.nodes[2].pending_len(), 0);
}

#[test]
fn batches_of_ten_ten_five() {
    let mut net = cluster(4, |c| c.batch_size = 10);
    for _ in 0..25 {
        let t = net.txn();
        net.submit(0, t);
    }
    net.run(3_000);
    let sizes: Vec<usize> = net.pre_prepares.iter().map(|(_, n)| *n).collect();
    assert_eq!(sizes, vec![10, 10, 5]);
    assert_eq!(net.heights(), vec![3, 3, 3, 3]);
}

#[test]
fn one_crash_still_commits() {
    let mut net = cluster(4, |_| {});
    net.crashed.insert(3);
    let t = net.txn();
    net.submit(1, t);
    net.run(2_000);
    assert_eq!(&net.heights()[..3], &[1, 1, 1]);
    assert_eq!(net.heights()[3], 0);
}

#[test]
fn two_crashes_stall_without_fork() {
    let mut net = cluster(4, |_| {});
    net.crashed.extend([2, 3]);
    let t = net.txn();
    net.submit(0, t);
    net.run(30_000);
    assert_eq!(net.heights(), vec![0, 0, 0, 0]);
    // recovery restores liveness
    net.crashed.clear();
    for i in [2, 3] {
        let out = net.nodes[i].on_recover(net.now);
        net.route(i, out);
    }
    net.run(30_000);
    assert!(net.heights().iter().all(|h| *h == 1), "{:?}", net.heights());
    net.assert_agree();
}

#[test]
fn leader_crash_triggers_one_view_change() {
    let mut net = cluster(4, |_| {});
    net.crashed.insert(0);
    let t = net.txn();
    net.submit(1, t);
    net.run(10_000);
    assert_eq!(&net.heights()[1..], &[1, 1, 1]);
    assert!(net.nodes[1..].iter().all(|n| n.view() == 1));
}

#[test]
fn f_consecutive_leader_crashes() {
    let mut net = cluster(7, |_| {});
    net.crashed.extend([0, 1]);
    let t = net.txn();
    net.submit(3, t);
    net.run(30_000);
    assert!(
        net.nodes[2..].iter().all(|n| n.height() == 1),
        "{:?} {:?} {:?}",
        net.heights(),
        net.nodes.iter().map(|n| n.view()).collect::<Vec<_>>(),
        net.nodes
            .iter()
            .map(|n| (n.in_view_change(), n.pending_len()))
            .collect::<Vec<_>>()
    );
    assert!(net.nodes[2..].iter().all(|n| n.view() == 2));
}

#[test]
fn timeout_without_work_rotates_leader() {
    let mut net = cluster(4, |_| {});
    for i in 0..4 {
        let out = net.nodes[i].on_timeout(net.now);
        net.route(i, out);
    }
    net.run(100);
    assert!(net
        .nodes
        .iter()
        .all(|n| n.view() == 1 && !n.in_view_change()));
    assert_eq!(net.heights(), vec![0, 0, 0, 0]);
    assert!(net.pre_prepares.is_empty());
}

#[test]
fn equivocating_pre_prepare_ignored() {
    let mut net = cluster(4, |c| c.batch_size = 1);
    let t1 = net.txn();
    let t2 = net.txn();
    let leader_key = net.nodes[0].key().clone();
    let state = net.nodes[1].state().clone();
    let (b1, _) = state.propose_block(vec![t1], net.now / 1000);
    let (b2, _) = state.propose_block(vec![t2], net.now / 1000);
    let pp = |b| {
        ConsensusMessage::sign(
            MessageBody::PrePrepare {
                view: 0,
                seq: 1,
                block: b,
            },
            NodeId(0),
            &leader_key,
        )
    };
    let out = net.nodes[1].on_message(pp(b1.clone()), net.now);
    assert!(out.messages.iter().any(
        |(_, m)| matches!(m.body, MessageBody::Prepare { digest, .. } if digest == b1.hash())
    ));
    let out = net.nodes[1].on_message(pp(b2), net.now);
    assert!(out
        .messages
        .iter()
        .all(|(_, m)| !matches!(m.body, MessageBody::Prepare { .. })));
}

#[test]
fn forged_and_foreign_messages_dropped() {
    let mut net = cluster(4, |_| {});
    let state = net.nodes[1].state().clone();
    let (b, _) = state.propose_block(Vec::new(), net.now / 1000);
    // signed by a key outside the consortium
    let stranger = KeyPair::generate(&mut net.rng);
    let forged = ConsensusMessage::sign(
        MessageBody::PrePrepare {
            view: 0,
            seq: 1,
            block: b.clone(),
        },
        NodeId(0),
        &stranger,
    );
    assert!(net.nodes[1].on_message(forged, net.now).is_empty());
    // signed by a member that is not the leader
    let k2 = net.nodes[2].key().clone();
    let wrong = ConsensusMessage::sign(
        MessageBody::PrePrepare {
            view: 0,
            seq: 1,
            block: b,
        },
        NodeId(2),
        &k2,
    );
    assert!(net.nodes[1].on_message(wrong, net.now).is_empty());
}

#[test]
fn stale_submissions_refused() {
    let mut net = cluster(4, |_| {});
    let did = net.keys.create(&mut net.rng);
    let old = TxnStamp::new(&mut net.rng, net.now / 1000 - 301);
    let t = register_did(&net.keys, &did, old).unwrap();
    assert_eq!(
        net.nodes[0].on_client_txn(t, net.now).unwrap_err(),
        SubmitError::Stale
    );
    let mut net = cluster(4, |c| c.max_pending = 2);
    for _ in 0..2 {
        let t = net.txn();
        net.nodes[1].on_client_txn(t, net.now).unwrap();
    }
    let t = net.txn();
    assert_eq!(
        net.nodes[1].on_client_txn(t, net.now).unwrap_err(),
        SubmitError::QueueFull
    );
}

#[test]
fn lossy_network_stays_safe_and_live() {
    for seed in 0..4 {
        let mut net = cluster(4, |c| c.batch_size = 5);
        net.rng = ChaCha20Rng::seed_from_u64(seed);
        net.drop_rate = 0.1;
        for i in 0..40 {
            let t = net.txn();
            net.submit(i % 4, t);
            net.run(100);
        }
        net.run(20_000);
        net.assert_agree();
        let total: usize = net.nodes[0].chain().iter().map(|b| b.txns.len()).sum();
        assert_eq!(total, 40, "seed {seed}: heights {:?}", net.heights());
    }
}

#[test]
fn replica_rebuilds_from_chain() {
    let mut net = cluster(4, |_| {});
    for _ in 0..3 {
        let t = net.txn();
        net.submit(0, t);
        net.run(1_200);
    }
    let chain = net.nodes[0].chain().to_vec();
    let cfg = net.nodes[1].config().clone();
    let r = Replica::from_chain(cfg, net.nodes[1].key().clone(), &chain).unwrap();
    assert_eq!(r.height(), 3);
    assert_eq!(r.state().state_root(), net.nodes[1].state().state_root());
}

#[test]
fn churn_never_forks() {
    for seed in 0..6u64 {
        let n = if seed % 2 == 0 { 4 } else { 7 };
        let mut net = cluster(n, |c| c.batch_size = 4);
        let f = (n - 1) / 3;
        net.rng = ChaCha20Rng::seed_from_u64(100 + seed);
        net.drop_rate = 0.05;
        let mut submitted = 0;
        for step in 0..60 {
            if step % 10 == 0 {
                // recover everyone, then crash a fresh random set of at most f
                let down: Vec<usize> = std::mem::take(&mut net.crashed).into_iter().collect();
                for i in down {
                    let out = net.nodes[i].on_recover(net.now);
                    net.route(i, out);
                }
                while net.crashed.len() < f && step < 40 {
                    let i = net.rng.gen_range(0..n);
                    net.crashed.insert(i);
                }
            }
            let live: Vec<usize> = (0..n).filter(|i| !net.crashed.contains(i)).collect();
            let at = live[net.rng.gen_range(0..live.len())];
            let t = net.txn();
            net.submit(at, t);
            submitted += 1;
            net.run(400);
        }
        net.run(60_000);
        net.assert_agree();
        let total: usize = net.nodes[0].chain().iter().map(|b| b.txns.len()).sum();
        assert_eq!(total, submitted, "seed {seed}: heights {:?}", net.heights());
    }
}
