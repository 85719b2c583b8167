//! Deterministic discrete-event simulation of a consortium: virtual clock,
//! lossy transport with uniform latency, crash schedules, a Poisson
//! transaction workload and per-bucket commit metrics.
//!
//! A run is a pure function of its [`SimConfig`]: every random choice comes
//! from ChaCha streams derived from `seed`, and events are ordered by
//! `(time, insertion sequence)`.

mod engine;
pub(crate) mod metrics;
mod workload;

pub use engine::{run, Event, EventKind, SimResult, SimStats};
pub use metrics::{
    chains_consistent, export_csv, interruption_report, write_csv, InterruptionReport,
    MetricsSample,
};
pub use workload::{workload, Injection};

use serde::{Deserialize, Serialize};

use crate::consensus::{ConsensusError, ReplicaConfig};
use crate::ledger::NodeId;

/// Unix time (seconds) at which every simulation starts.
pub const SIM_EPOCH_S: u64 = 1_700_000_000;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error("bootstrap failed: {0}")]
    Bootstrap(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("config file: {0}")]
    Parse(#[from] serde_json::Error),
}

fn bad(msg: impl Into<String>) -> SimError {
    SimError::Config(msg.into())
}

/// The three workload classes, smallest payload first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TxnClass {
    DidReg,
    /// A schema and, once it commits, its credential definition.
    SchemaDef,
    CredReg,
}

impl TxnClass {
    pub const ALL: [TxnClass; 3] = [TxnClass::DidReg, TxnClass::SchemaDef, TxnClass::CredReg];

    pub fn as_str(&self) -> &'static str {
        match self {
            TxnClass::DidReg => "DID_REG",
            TxnClass::SchemaDef => "SCHEMA_DEF",
            TxnClass::CredReg => "CRED_REG",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub min_ms: u64,
    pub max_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashWindow {
    pub node: NodeId,
    pub down_from_s: u64,
    pub up_at_s: u64,
}

impl CrashWindow {
    pub fn covers(&self, t_ms: u64) -> bool {
        self.down_from_s * 1000 <= t_ms && t_ms < self.up_at_s * 1000
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub duration_s: u64,
    /// Consortium and timing; `this_node` is ignored.
    pub nodes: ReplicaConfig,
    /// Vehicles registered before the run starts; CRED_REG picks subjects among them.
    pub vehicles: usize,
    pub providers: usize,
    pub registrars: usize,
    /// Weights for DID_REG, SCHEMA_DEF, CRED_REG.
    pub txn_mix: [f64; 3],
    /// Mean injections per simulated second.
    pub txn_rate_per_s: f64,
    pub latency_model: LatencyModel,
    pub drop_rate: f64,
    pub crash_schedule: Vec<CrashWindow>,
    pub metrics_bucket_s: u64,
}

impl SimConfig {
    /// A 60-second run on `n` nodes with a balanced mix and no faults.
    pub fn new(n: usize, seed: u64) -> Result<Self, SimError> {
        let ids: Vec<NodeId> = (0..n as u32).map(NodeId).collect();
        let nodes = ReplicaConfig::new(ids, NodeId(0))?;
        Ok(SimConfig {
            seed,
            duration_s: 60,
            nodes,
            vehicles: 50,
            providers: 10,
            registrars: 2,
            txn_mix: [0.4, 0.2, 0.4],
            txn_rate_per_s: 10.0,
            latency_model: LatencyModel {
                min_ms: 5,
                max_ms: 50,
            },
            drop_rate: 0.0,
            crash_schedule: Vec::new(),
            metrics_bucket_s: 10,
        })
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.nodes.validate()?;
        if self.duration_s == 0 {
            return Err(bad("duration_s must be positive"));
        }
        if self.metrics_bucket_s == 0 {
            return Err(bad("metrics_bucket_s must be positive"));
        }
        if self.registrars == 0 {
            return Err(bad("at least one registrar is needed"));
        }
        if self.vehicles == 0 && self.txn_mix[TxnClass::CredReg.index()] > 0.0 {
            return Err(bad("CRED_REG traffic needs at least one vehicle"));
        }
        if self.txn_mix.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(bad("txn_mix weights must be finite and non-negative"));
        }
        if (self.txn_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(bad("txn_mix weights must sum to 1"));
        }
        if !self.txn_rate_per_s.is_finite() || self.txn_rate_per_s < 0.0 {
            return Err(bad("txn_rate_per_s must be finite and non-negative"));
        }
        if self.latency_model.min_ms > self.latency_model.max_ms {
            return Err(bad("latency min exceeds max"));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(bad("drop_rate must lie in [0, 1]"));
        }
        for w in &self.crash_schedule {
            if !self.nodes.node_ids.contains(&w.node) {
                return Err(bad(format!("crash schedule names unknown {}", w.node)));
            }
            if w.down_from_s >= w.up_at_s || w.up_at_s > self.duration_s {
                return Err(bad(format!(
                    "crash window [{}, {}) is not inside the run",
                    w.down_from_s, w.up_at_s
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Vec<u8> {
        crate::crypto::to_canonical_bytes(self)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, SimError> {
        let cfg: SimConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Nodes up at `t_ms` after the start.
    pub fn live_nodes_at(&self, t_ms: u64) -> usize {
        let down: std::collections::BTreeSet<NodeId> = self
            .crash_schedule
            .iter()
            .filter(|w| w.covers(t_ms))
            .map(|w| w.node)
            .collect();
        self.nodes.n - down.len()
    }
}

/// The interruption experiment at desk scale: a 600-second run on `nodes`
/// replicas, with the `crashed` highest-numbered nodes down from 40% to 60%
/// of the run.
pub fn interruption_scenario(
    nodes: usize,
    crashed: usize,
    seed: u64,
) -> Result<SimConfig, SimError> {
    let mut cfg = SimConfig::new(nodes, seed)?;
    if crashed >= nodes {
        return Err(bad("cannot crash every node"));
    }
    cfg.duration_s = 600;
    cfg.vehicles = 200;
    cfg.providers = 20;
    cfg.registrars = 3;
    cfg.drop_rate = 0.01;
    let (from, to) = (cfg.duration_s * 2 / 5, cfg.duration_s * 3 / 5);
    cfg.crash_schedule = (nodes - crashed..nodes)
        .map(|i| CrashWindow {
            node: NodeId(i as u32),
            down_from_s: from,
            up_at_s: to,
        })
        .collect();
    cfg.validate()?;
    Ok(cfg)
}
