use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::Subcommand;

use vdkms::simnet::{self, export_csv, interruption_report, SimConfig, SimResult};

use crate::context::Context;

#[derive(Subcommand)]
pub enum SimCmd {
    /// Run the configuration in a JSON file and write per-bucket metrics as CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a default configuration to start from.
    Config {
        #[arg(long, default_value_t = 4)]
        nodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Built-in scenarios.
    #[command(subcommand)]
    Scenario(Scenario),
}

#[derive(Subcommand)]
pub enum Scenario {
    /// 600 s on N nodes with the highest-numbered nodes down for [240 s, 360 s).
    #[command(alias = "paper-interruption")]
    Interruption {
        #[arg(long, default_value_t = 7)]
        nodes: usize,
        #[arg(long, default_value_t = 2)]
        crash: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_stats(r: &SimResult) {
    let s = &r.stats;
    println!(
        "injected={} committed={} rejected={} refused={} in_flight={} messages={} dropped={} lost={}",
        s.injected, s.committed, s.rejected, s.refused, s.in_flight, s.messages_sent, s.messages_dropped, s.messages_lost
    );
    println!("trace {}", r.trace);
}

pub fn run(ctx: &Context, cmd: SimCmd) -> Result<ExitCode> {
    match cmd {
        SimCmd::Run { config, out } => {
            let raw =
                std::fs::read(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = SimConfig::from_json(&raw)?;
            if let Some(seed) = ctx.global.seed {
                cfg.seed = seed;
            }
            let result = simnet::run(&cfg)?;
            export_csv(&result.metrics, &out)?;
            print_stats(&result);
            println!(
                "chains consistent: {}",
                simnet::chains_consistent(&result.chains)
            );
            println!("metrics written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        SimCmd::Config { nodes, out } => {
            let cfg = SimConfig::new(nodes, ctx.global.seed.unwrap_or(1))?;
            let mut text = serde_json::to_string_pretty(&cfg)?;
            text.push('\n');
            std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            Ok(ExitCode::SUCCESS)
        }
        SimCmd::Scenario(Scenario::Interruption { nodes, crash, out }) => {
            if crash == 0 {
                bail!("--crash must be at least 1");
            }
            let cfg = simnet::interruption_scenario(nodes, crash, ctx.global.seed.unwrap_or(1))?;
            let result = simnet::run(&cfg)?;
            let report = interruption_report(&cfg, &result);
            let out =
                out.unwrap_or_else(|| PathBuf::from(format!("interruption-{nodes}n-{crash}c.csv")));
            export_csv(&result.metrics, &out)?;
            print_stats(&result);
            println!(
                "throughput: {}",
                report
                    .throughput
                    .iter()
                    .map(|(_, n)| n.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            for line in report.summary() {
                println!("{line}");
            }
            println!("metrics written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
