use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod agents;
mod context;
mod sim;

use context::Context;

/// Decentralized key management for vehicles, registrars and service providers.
#[derive(Parser)]
#[command(name = "vdkms", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Global {
    /// Encrypted wallet holding this agent's keys and state.
    #[arg(long, global = true)]
    pub wallet: Option<PathBuf>,
    /// Environment variable holding the wallet passphrase.
    #[arg(long, global = true, default_value = "VDKMS_PASSPHRASE")]
    pub passphrase_env: String,
    /// `embedded` (ledger in ./vdkms-ledger) or `embedded:<dir>`.
    #[arg(long, global = true, default_value = "embedded")]
    pub ledger: String,
    /// Seed for simulations and key generation; fresh entropy when absent.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Registrar: create the consortium ledger, issue and revoke credentials.
    #[command(subcommand)]
    Registrar(agents::RegistrarCmd),
    /// Vehicle: hold a DID and credential, present it, open channels.
    #[command(subcommand)]
    Vehicle(agents::VehicleCmd),
    /// Service provider: challenge vehicles and authorize them.
    #[command(subcommand)]
    Sp(agents::SpCmd),
    /// Read committed ledger state.
    #[command(subcommand)]
    Ledger(agents::LedgerCmd),
    /// Print the public state of a wallet.
    Wallet,
    /// Deterministic network simulations.
    #[command(subcommand)]
    Sim(sim::SimCmd),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Context::new(cli.global);
    let result = match cli.command {
        Command::Registrar(c) => agents::registrar(&ctx, c),
        Command::Vehicle(c) => agents::vehicle(&ctx, c),
        Command::Sp(c) => agents::sp(&ctx, c),
        Command::Ledger(c) => agents::ledger(&ctx, c),
        Command::Wallet => agents::wallet(&ctx),
        Command::Sim(c) => sim::run(&ctx, c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
