use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context as _, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use vdkms::crypto::KdfParams;
use vdkms::embedded::EmbeddedLedger;
use vdkms::protocols::{
    load_agent, save_agent, Envelope, RegistrarAgent, ServiceProviderAgent, VehicleAgent,
};

use crate::Global;

const DEFAULT_LEDGER_DIR: &str = "vdkms-ledger";

/// What a wallet file holds.
#[derive(Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum Stored {
    Registrar(RegistrarAgent),
    Vehicle(VehicleAgent),
    Provider(ServiceProviderAgent),
}

impl Stored {
    pub fn role(&self) -> &'static str {
        match self {
            Stored::Registrar(_) => "registrar",
            Stored::Vehicle(_) => "vehicle",
            Stored::Provider(_) => "provider",
        }
    }
}

pub struct Context {
    pub global: Global,
}

impl Context {
    pub fn new(global: Global) -> Self {
        Context { global }
    }

    /// Seeded when `--seed` is given, so generated keys are reproducible.
    pub fn keygen_rng(&self) -> ChaCha20Rng {
        match self.global.seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        }
    }

    /// Always fresh: nonces must not repeat across invocations.
    pub fn rng(&self) -> ChaCha20Rng {
        ChaCha20Rng::from_entropy()
    }

    pub fn ledger_dir(&self) -> Result<PathBuf> {
        let spec = self.global.ledger.as_str();
        match spec.split_once(':') {
            None if spec == "embedded" => Ok(PathBuf::from(DEFAULT_LEDGER_DIR)),
            Some(("embedded", dir)) if !dir.is_empty() => Ok(PathBuf::from(dir)),
            _ => bail!("unsupported ledger endpoint {spec:?}: use `embedded` or `embedded:<dir>`"),
        }
    }

    pub fn open_ledger(&self) -> Result<EmbeddedLedger> {
        let dir = self.ledger_dir()?;
        if !EmbeddedLedger::exists(&dir) {
            bail!(
                "no ledger in {}; create one with `vdkms registrar init`",
                dir.display()
            );
        }
        EmbeddedLedger::open(&dir, unix_now())
            .with_context(|| format!("opening ledger in {}", dir.display()))
    }

    fn wallet_path(&self) -> Result<&Path> {
        self.global
            .wallet
            .as_deref()
            .ok_or_else(|| anyhow!("--wallet is required"))
    }

    fn passphrase(&self) -> Result<String> {
        let var = &self.global.passphrase_env;
        std::env::var(var).map_err(|_| anyhow!("passphrase variable {var} is not set"))
    }

    /// Fails before any ledger writes if the wallet file is already there.
    pub fn ensure_new_wallet(&self) -> Result<()> {
        let path = self.wallet_path()?;
        if path.exists() {
            bail!("{} already exists", path.display());
        }
        self.passphrase().map(|_| ())
    }

    pub fn load(&self) -> Result<Stored> {
        let path = self.wallet_path()?;
        load_agent(path, &self.passphrase()?)
            .with_context(|| format!("opening wallet {}", path.display()))
    }

    pub fn save(&self, agent: &Stored) -> Result<()> {
        let path = self.wallet_path()?;
        save_agent(
            &mut self.rng(),
            agent,
            path,
            &self.passphrase()?,
            KdfParams::default(),
        )
        .with_context(|| format!("writing wallet {}", path.display()))
    }

    pub fn registrar(&self) -> Result<RegistrarAgent> {
        match self.load()? {
            Stored::Registrar(a) => Ok(a),
            other => bail!("wallet belongs to a {}, not a registrar", other.role()),
        }
    }

    pub fn vehicle(&self) -> Result<VehicleAgent> {
        match self.load()? {
            Stored::Vehicle(a) => Ok(a),
            other => bail!("wallet belongs to a {}, not a vehicle", other.role()),
        }
    }

    pub fn provider(&self) -> Result<ServiceProviderAgent> {
        match self.load()? {
            Stored::Provider(a) => Ok(a),
            other => bail!(
                "wallet belongs to a {}, not a service provider",
                other.role()
            ),
        }
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&raw).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_envelope(path: &Path) -> Result<Envelope> {
    read_json(path)
}
