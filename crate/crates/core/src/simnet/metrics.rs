use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SimConfig, SimError, SimResult, TxnClass};
use crate::crypto::to_canonical_bytes;
use crate::ledger::Block;

/// First commit of a workload transaction anywhere in the consortium.
#[derive(Debug, Clone)]
pub(crate) struct CommitRecord {
    pub class: TxnClass,
    /// Block timestamp, seconds after the start of the run.
    pub block_s: u64,
    pub latency_ms: u64,
    pub accepted: bool,
}

/// Committed transactions of one class whose block timestamp falls in one bucket.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsSample {
    pub bucket_start_s: u64,
    pub txn_class: TxnClass,
    pub committed_count: u64,
    /// Submission to first commit; `None` for an empty bucket.
    pub commit_latency_ms_p50: Option<u64>,
    pub commit_latency_ms_p95: Option<u64>,
    /// Fewest nodes up at any point in the bucket.
    pub live_node_count: usize,
}

/// Nearest-rank percentile of a sorted slice.
fn percentile(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

fn min_live(cfg: &SimConfig, start_ms: u64, end_ms: u64) -> usize {
    let mut points = vec![start_ms];
    for w in &cfg.crash_schedule {
        for t in [w.down_from_s * 1000, w.up_at_s * 1000] {
            if start_ms < t && t < end_ms {
                points.push(t);
            }
        }
    }
    points
        .into_iter()
        .map(|t| cfg.live_nodes_at(t))
        .min()
        .unwrap_or(cfg.nodes.n)
}

pub(crate) fn compute(cfg: &SimConfig, records: &[CommitRecord]) -> Vec<MetricsSample> {
    let width = cfg.metrics_bucket_s;
    let buckets = cfg.duration_s.div_ceil(width) as usize;
    let mut latencies = vec![[Vec::new(), Vec::new(), Vec::new()]; buckets];
    for r in records.iter().filter(|r| r.accepted) {
        let b = ((r.block_s / width) as usize).min(buckets - 1);
        latencies[b][r.class.index()].push(r.latency_ms);
    }
    let mut out = Vec::with_capacity(buckets * 3);
    for (b, per_class) in latencies.iter_mut().enumerate() {
        let start = b as u64 * width;
        let live = min_live(
            cfg,
            start * 1000,
            (start + width).min(cfg.duration_s) * 1000,
        );
        for class in TxnClass::ALL {
            let l = &mut per_class[class.index()];
            l.sort_unstable();
            out.push(MetricsSample {
                bucket_start_s: start,
                txn_class: class,
                committed_count: l.len() as u64,
                commit_latency_ms_p50: percentile(l, 50.0),
                commit_latency_ms_p95: percentile(l, 95.0),
                live_node_count: live,
            });
        }
    }
    out
}

#[derive(Serialize)]
struct Row<'a> {
    bucket_start_s: u64,
    txn_class: &'a str,
    committed_count: u64,
    latency_ms_p50: Option<u64>,
    latency_ms_p95: Option<u64>,
    live_nodes: usize,
}

const HEADER: [&str; 6] = [
    "bucket_start_s",
    "txn_class",
    "committed_count",
    "latency_ms_p50",
    "latency_ms_p95",
    "live_nodes",
];

/// One row per (bucket, class); empty latency fields for empty buckets.
pub fn write_csv<W: Write>(metrics: &[MetricsSample], out: W) -> Result<(), SimError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(HEADER)?;
    for m in metrics {
        w.serialize(Row {
            bucket_start_s: m.bucket_start_s,
            txn_class: m.txn_class.as_str(),
            committed_count: m.committed_count,
            latency_ms_p50: m.commit_latency_ms_p50,
            latency_ms_p95: m.commit_latency_ms_p95,
            live_nodes: m.live_node_count,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(metrics: &[MetricsSample], path: &Path) -> Result<(), SimError> {
    let file = std::fs::File::create(path)?;
    write_csv(metrics, std::io::BufWriter::new(file))
}

/// Whether every pair of chains agrees, byte for byte, on their common prefix.
pub fn chains_consistent(chains: &[Vec<Block>]) -> bool {
    let Some(longest) = chains.iter().max_by_key(|c| c.len()) else {
        return true;
    };
    let reference: Vec<Vec<u8>> = longest.iter().map(to_canonical_bytes).collect();
    chains.iter().all(|c| {
        c.iter()
            .zip(&reference)
            .all(|(b, r)| to_canonical_bytes(b) == *r)
    })
}

/// Throughput before, during and after the crash window of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct InterruptionReport {
    pub nodes: usize,
    pub quorum: usize,
    pub window: (u64, u64),
    pub live_in_window: usize,
    /// (bucket start, committed transactions of every class).
    pub throughput: Vec<(u64, u64)>,
    pub pre_mean: f64,
    pub post_mean: f64,
    pub window_min: u64,
    pub window_max: u64,
    /// Buckets with no commits, across the whole run.
    pub empty_buckets: usize,
    pub chains_consistent: bool,
}

impl InterruptionReport {
    /// Relative gap between post-recovery and pre-crash mean throughput.
    pub fn recovery_gap(&self) -> f64 {
        if self.pre_mean == 0.0 {
            return f64::INFINITY;
        }
        (self.post_mean - self.pre_mean).abs() / self.pre_mean
    }

    pub fn quorum_held(&self) -> bool {
        self.live_in_window >= self.quorum
    }

    pub fn summary(&self) -> Vec<String> {
        let mut lines = vec![
            format!(
                "nodes={} quorum={} window=[{}s,{}s) live_in_window={}",
                self.nodes, self.quorum, self.window.0, self.window.1, self.live_in_window
            ),
            format!(
                "throughput per bucket: pre_mean={:.1} window_min={} window_max={} post_mean={:.1} recovery_gap={:.1}%",
                self.pre_mean,
                self.window_min,
                self.window_max,
                self.post_mean,
                self.recovery_gap() * 100.0
            ),
            format!("chains consistent: {}", self.chains_consistent),
        ];
        if self.quorum_held() {
            lines.push("quorum held through the window; commits continued".into());
        } else {
            lines.push(format!(
                "quorum lost: {} live < {} required, so no block can commit in the window; \
                 continued availability with only {} of {} nodes is not reproducible under standard BFT quorums",
                self.live_in_window, self.quorum, self.live_in_window, self.nodes
            ));
        }
        lines
    }
}

/// Summarizes a run with a single crash window shared by all crashed nodes.
pub fn interruption_report(cfg: &SimConfig, result: &SimResult) -> InterruptionReport {
    let (from, to) = match cfg.crash_schedule.first() {
        Some(w) => (w.down_from_s, w.up_at_s),
        None => (cfg.duration_s, cfg.duration_s),
    };
    let width = cfg.metrics_bucket_s;
    let mut throughput: Vec<(u64, u64)> = Vec::new();
    for m in &result.metrics {
        match throughput.last_mut() {
            Some((start, total)) if *start == m.bucket_start_s => *total += m.committed_count,
            _ => throughput.push((m.bucket_start_s, m.committed_count)),
        }
    }
    let mean = |xs: Vec<u64>| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<u64>() as f64 / xs.len() as f64
        }
    };
    let complete = |s: u64| s + width <= cfg.duration_s;
    let pre: Vec<u64> = throughput
        .iter()
        .filter(|(s, _)| s + width <= from)
        .map(|t| t.1)
        .collect();
    let inside: Vec<u64> = throughput
        .iter()
        .filter(|(s, _)| *s >= from && s + width <= to)
        .map(|t| t.1)
        .collect();
    let post: Vec<u64> = throughput
        .iter()
        .filter(|(s, _)| *s >= to && complete(*s))
        .map(|t| t.1)
        .collect();
    InterruptionReport {
        nodes: cfg.nodes.n,
        quorum: cfg.nodes.quorum(),
        window: (from, to),
        live_in_window: cfg.live_nodes_at(from * 1000),
        empty_buckets: throughput.iter().filter(|t| t.1 == 0).count(),
        window_min: inside.iter().copied().min().unwrap_or(0),
        window_max: inside.iter().copied().max().unwrap_or(0),
        pre_mean: mean(pre),
        post_mean: mean(post),
        throughput,
        chains_consistent: chains_consistent(&result.chains),
    }
}
