use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Subcommand, ValueEnum};
use serde_json::{json, Value};

use vdkms::crypto::Digest;
use vdkms::embedded::{EmbeddedConfig, EmbeddedLedger, LedgerClient};
use vdkms::identity::Did;
use vdkms::protocols::{Event, RegistrarAgent, SchemaSpec, ServiceProviderAgent, VehicleAgent};

use crate::context::{read_envelope, unix_now, write_json, Context, Stored};

#[derive(Subcommand)]
pub enum RegistrarCmd {
    /// Create a registrar wallet and register its DID, schema and credential
    /// definition. Creates the ledger, with this registrar in its genesis,
    /// when none exists yet.
    Init {
        /// Consensus nodes of a newly created ledger.
        #[arg(long, default_value_t = 4)]
        nodes: usize,
        #[arg(long, default_value = "vehicle-registration")]
        schema_name: String,
    },
    /// Answer a registration request: validate, commit the credential and
    /// write the sealed response.
    Issue {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Revoke the credential issued to a vehicle, or its whole DID.
    Revoke {
        #[arg(long)]
        subject: Did,
        #[arg(long)]
        whole_did: bool,
    },
}

#[derive(Subcommand)]
pub enum VehicleCmd {
    /// Create a vehicle wallet and register its DID.
    Init,
    /// Write a sealed registration request for a registrar.
    Register {
        #[arg(long)]
        registrar: Did,
        /// Attribute as NAME=VALUE; repeat for each attribute.
        #[arg(long = "attr", value_parser = parse_attr, required = true)]
        attrs: Vec<(String, String)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer a provider's challenge with a selective-disclosure presentation.
    Present {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offer a fresh pairwise DID to a provider that has verified this vehicle.
    Connect {
        #[arg(long)]
        provider: Did,
        #[arg(long)]
        out: PathBuf,
    },
    /// Process a registration response, verification result or authorization response.
    Receive {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Rotate the DID's signing key on the ledger.
    Rotate,
}

#[derive(Subcommand)]
pub enum SpCmd {
    /// Create a service-provider wallet and register its DID.
    Init,
    /// With --vehicle, write a challenge for that vehicle. With --in, verify
    /// the presentation it answered with and write the verdict to --out.
    Verify {
        #[arg(long, conflicts_with = "input")]
        vehicle: Option<Did>,
        /// Attributes to request, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "VIN")]
        attrs: Vec<String>,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accept a verified vehicle's pairwise DID and write the response.
    Authorize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum QueryKind {
    Did,
    Schema,
    CredDef,
    Credential,
    Vin,
    Block,
}

#[derive(Subcommand)]
pub enum LedgerCmd {
    /// Print the chain height, head and registrars.
    Status,
    /// Look up one entry. Schemas are keyed by id or NAME@VERSION, blocks by height.
    Query { kind: QueryKind, key: String },
}

fn parse_attr(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected NAME=VALUE, got {s:?}"))
}

fn describe(event: &Event) -> (String, bool) {
    match event {
        Event::CredentialStored { commitment_root } => (
            format!("credential stored, commitment root {commitment_root}"),
            true,
        ),
        Event::RegistrationRefused { reason } => (format!("registration refused: {reason}"), false),
        Event::PresentationSent { nonce } => (format!("presentation for challenge {nonce}"), true),
        Event::Verified { subject } => (format!("verified {subject}"), true),
        Event::VerificationFailed { subject, reason } => (
            format!("verification of {subject} failed: {}", reason.code()),
            false,
        ),
        Event::VerificationReported { result: Ok(()) } => {
            ("provider reports: verified".into(), true)
        }
        Event::VerificationReported { result: Err(r) } => {
            (format!("provider reports: rejected ({r})"), false)
        }
        Event::ChannelOpened {
            counterparty,
            pairwise,
        } => (
            format!("channel open with {counterparty}, counterparty pairwise DID {pairwise}"),
            true,
        ),
    }
}

fn report(event: &Event) -> ExitCode {
    let (line, ok) = describe(event);
    println!("{line}");
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

pub fn registrar(ctx: &Context, cmd: RegistrarCmd) -> Result<ExitCode> {
    match cmd {
        RegistrarCmd::Init { nodes, schema_name } => {
            ctx.ensure_new_wallet()?;
            let mut agent = RegistrarAgent::new(&mut ctx.keygen_rng());
            let dir = ctx.ledger_dir()?;
            let mut rng = ctx.rng();
            let mut ledger = if EmbeddedLedger::exists(&dir) {
                let ledger = ctx.open_ledger()?;
                if !ledger.view()?.is_registrar(agent.did()) {
                    bail!(
                        "the ledger in {} has a fixed registrar set that does not include a new key; \
                         use a fresh --ledger directory",
                        dir.display()
                    );
                }
                ledger
            } else {
                let cfg = EmbeddedConfig::new(nodes, vec![agent.did().clone()], unix_now());
                let ledger = EmbeddedLedger::create(&mut rng, &cfg, &dir)?;
                println!("created {nodes}-node ledger in {}", dir.display());
                ledger
            };
            let spec = SchemaSpec {
                name: schema_name,
                ..SchemaSpec::vehicle_registration()
            };
            agent.provision(&mut ledger, &mut rng, &spec)?;
            ctx.save(&Stored::Registrar(agent.clone()))?;
            println!("{}", agent.did());
            println!(
                "schema {}",
                agent.schema.as_ref().expect("provisioned").id()
            );
            println!(
                "credential definition {}",
                agent.cred_def.as_ref().expect("provisioned").id()
            );
            Ok(ExitCode::SUCCESS)
        }
        RegistrarCmd::Issue { input, out } => {
            let mut agent = ctx.registrar()?;
            let mut ledger = ctx.open_ledger()?;
            let env = read_envelope(&input)?;
            let handled = agent.handle(&env, &mut ledger, &mut ctx.rng())?;
            ctx.save(&Stored::Registrar(agent))?;
            write_json(
                &out,
                handled.reply.as_ref().expect("registrar always replies"),
            )?;
            Ok(report(&handled.event))
        }
        RegistrarCmd::Revoke { subject, whole_did } => {
            let mut agent = ctx.registrar()?;
            let mut ledger = ctx.open_ledger()?;
            if whole_did {
                agent.revoke_did(&mut ledger, &mut ctx.rng(), &subject)?;
                println!("revoked DID {subject}");
            } else {
                agent.revoke_credential_of(&mut ledger, &mut ctx.rng(), &subject)?;
                println!("revoked the credential of {subject}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

pub fn vehicle(ctx: &Context, cmd: VehicleCmd) -> Result<ExitCode> {
    if let VehicleCmd::Init = cmd {
        ctx.ensure_new_wallet()?;
        let mut agent = VehicleAgent::new(&mut ctx.keygen_rng());
        agent.provision(&mut ctx.open_ledger()?, &mut ctx.rng())?;
        ctx.save(&Stored::Vehicle(agent.clone()))?;
        println!("{}", agent.did());
        return Ok(ExitCode::SUCCESS);
    }
    let mut agent = ctx.vehicle()?;
    let mut ledger = ctx.open_ledger()?;
    let mut rng = ctx.rng();
    let view = ledger.view()?;
    let now = ledger.now();
    let code = match cmd {
        VehicleCmd::Init => unreachable!(),
        VehicleCmd::Register {
            registrar,
            attrs,
            out,
        } => {
            let attrs: BTreeMap<String, String> = attrs.into_iter().collect();
            let env = agent.registration_request(&mut rng, &view, &registrar, attrs, now)?;
            write_json(&out, &env)?;
            println!(
                "registration request for {registrar} written to {}",
                out.display()
            );
            ExitCode::SUCCESS
        }
        VehicleCmd::Present { input, out } => {
            let handled = agent.handle(&read_envelope(&input)?, &view, &mut rng, now)?;
            write_json(
                &out,
                handled.reply.as_ref().context("no presentation produced")?,
            )?;
            report(&handled.event)
        }
        VehicleCmd::Connect { provider, out } => {
            let env = agent.auth_request(&mut rng, &view, &provider, now)?;
            write_json(&out, &env)?;
            println!(
                "authorization request for {provider} written to {}",
                out.display()
            );
            ExitCode::SUCCESS
        }
        VehicleCmd::Receive { input } => {
            let handled = agent.handle(&read_envelope(&input)?, &view, &mut rng, now)?;
            report(&handled.event)
        }
        VehicleCmd::Rotate => {
            agent.party.rotate(&mut ledger, &mut rng)?;
            println!("rotated key of {}", agent.did());
            ExitCode::SUCCESS
        }
    };
    ctx.save(&Stored::Vehicle(agent))?;
    Ok(code)
}

pub fn sp(ctx: &Context, cmd: SpCmd) -> Result<ExitCode> {
    if let SpCmd::Init = cmd {
        ctx.ensure_new_wallet()?;
        let mut agent = ServiceProviderAgent::new(&mut ctx.keygen_rng());
        agent.provision(&mut ctx.open_ledger()?, &mut ctx.rng())?;
        ctx.save(&Stored::Provider(agent.clone()))?;
        println!("{}", agent.did());
        return Ok(ExitCode::SUCCESS);
    }
    let mut agent = ctx.provider()?;
    let ledger = ctx.open_ledger()?;
    let mut rng = ctx.rng();
    let view = ledger.view()?;
    let now = ledger.now();
    let code = match cmd {
        SpCmd::Init => unreachable!(),
        SpCmd::Verify {
            vehicle: Some(vehicle),
            attrs,
            out,
            ..
        } => {
            let env = agent.proof_request(&mut rng, &vehicle, attrs, now)?;
            write_json(&out, &env)?;
            println!("challenge for {vehicle} written to {}", out.display());
            ExitCode::SUCCESS
        }
        SpCmd::Verify {
            input: Some(input),
            out,
            ..
        } => {
            let handled = agent.handle(&read_envelope(&input)?, &view, &mut rng, now)?;
            if let Some(reply) = &handled.reply {
                write_json(&out, reply)?;
            }
            report(&handled.event)
        }
        SpCmd::Verify { .. } => {
            bail!("sp verify needs --vehicle (to challenge) or --in (to check a presentation)")
        }
        SpCmd::Authorize { input, out } => {
            let handled = agent.handle(&read_envelope(&input)?, &view, &mut rng, now)?;
            write_json(
                &out,
                handled
                    .reply
                    .as_ref()
                    .context("no authorization response produced")?,
            )?;
            report(&handled.event)
        }
    };
    ctx.save(&Stored::Provider(agent))?;
    Ok(code)
}

pub fn wallet(ctx: &Context) -> Result<ExitCode> {
    let summary = match ctx.load()? {
        Stored::Registrar(a) => json!({
            "role": "registrar",
            "did": a.did(),
            "schema": a.schema.as_ref().map(|s| s.id()),
            "cred_def": a.cred_def.as_ref().map(|d| d.id()),
            "issued": a.issued.len(),
        }),
        Stored::Vehicle(a) => json!({
            "role": "vehicle",
            "did": a.did(),
            "credential": a.credential.as_ref().map(|h| json!({
                "issuer": h.credential.issuer,
                "commitment_root": h.credential.commitment_root(),
                "attributes": h.claims.keys().collect::<Vec<_>>(),
            })),
            "channels": a.channels.keys().collect::<Vec<_>>(),
            "microledger_entries": a.microledger.len(),
        }),
        Stored::Provider(a) => json!({
            "role": "provider",
            "did": a.did(),
            "channels": a.channels.keys().collect::<Vec<_>>(),
            "microledger_entries": a.microledger.len(),
        }),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

fn digest(key: &str) -> Result<Digest> {
    key.parse()
        .map_err(|e| anyhow::anyhow!("{key:?} is not a digest: {e}"))
}

pub fn ledger(ctx: &Context, cmd: LedgerCmd) -> Result<ExitCode> {
    let ledger = ctx.open_ledger()?;
    let view = ledger.view()?;
    let found: Option<Value> = match cmd {
        LedgerCmd::Status => Some(json!({
            "chain_id": view.chain_id(),
            "height": view.height(),
            "head": view.head(),
            "state_root": view.state_root(),
            "time": view.time(),
            "nodes": view.nodes().len(),
            "registrars": view.registrars().collect::<Vec<_>>(),
        })),
        LedgerCmd::Query { kind, key } => match kind {
            QueryKind::Did => {
                let did: Did = key.parse().map_err(|e| anyhow::anyhow!("{key:?}: {e}"))?;
                view.did_document(&did).map(|d| json!(d))
            }
            QueryKind::Schema => match key.split_once('@') {
                Some((name, version)) => view.schema_by_name(name, version).map(|s| json!(s)),
                None => view.schema(&digest(&key)?).map(|s| json!(s)),
            },
            QueryKind::CredDef => view.cred_def(&digest(&key)?).map(|d| json!(d)),
            QueryKind::Credential => view.credential(&digest(&key)?).map(|c| json!(c)),
            QueryKind::Vin => {
                let tag = view.vin_tag(&key);
                Some(
                    json!({ "vin_tag": tag, "live_credentials": view.live_credentials_for_tag(&tag) }),
                )
            }
            QueryKind::Block => {
                let height: usize = key.parse().context("block key is a height")?;
                ledger.replicas()[0].chain().get(height).map(|b| json!(b))
            }
        },
    };
    match found {
        Some(v) => {
            println!("{}", serde_json::to_string_pretty(&v)?);
            Ok(ExitCode::SUCCESS)
        }
        None => {
            eprintln!("not found");
            Ok(ExitCode::FAILURE)
        }
    }
}
