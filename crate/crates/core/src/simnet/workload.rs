use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{CryptoRng, Rng, RngCore};
use rand_distr::Exp;
use serde::{Deserialize, Serialize};

use super::{SimConfig, SimError, TxnClass, SIM_EPOCH_S};
use crate::credentials::vin::complete_vin;
use crate::credentials::{def_gen, issue_credential, schema_gen, Schema};
use crate::crypto::{Digest, KeyPair, PublicKey};
use crate::identity::{register_did, Did, KeyStore};
use crate::ledger::{Block, Genesis, LedgerState, LedgerView, NodeIdentity, Transaction, TxnStamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Injection {
    /// Milliseconds after the start of the run.
    pub at_ms: u64,
    pub class: TxnClass,
}

/// Poisson arrivals at `txn_rate_per_s` over the run, each tagged with a
/// class drawn from `txn_mix`.
pub fn workload<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Vec<Injection> {
    let mut out = Vec::new();
    if config.txn_rate_per_s <= 0.0 {
        return out;
    }
    let gap = Exp::new(config.txn_rate_per_s).expect("rate is positive");
    let classes = WeightedIndex::new(config.txn_mix).expect("mix validated");
    let end = (config.duration_s * 1000) as f64;
    let mut t = 0.0;
    loop {
        t += gap.sample(rng) * 1000.0;
        if t >= end {
            return out;
        }
        out.push(Injection {
            at_ms: t as u64,
            class: TxnClass::ALL[classes.sample(rng)],
        });
    }
}

const VEHICLE_ATTRIBUTES: [&str; 4] = ["VIN", "make", "model", "year"];

#[derive(Debug, Clone)]
struct Issuer {
    did: Did,
    keys: KeyStore,
    cred_def: Digest,
}

/// Actors that author workload transactions.
#[derive(Debug, Clone)]
pub(crate) struct Population {
    registrars: Vec<Issuer>,
    vehicles: Vec<(Did, PublicKey)>,
    next_schema: u64,
    next_vin: u64,
}

pub(crate) struct Bootstrap {
    pub population: Population,
    pub node_keys: Vec<KeyPair>,
    /// Genesis plus one block registering every pre-existing actor.
    pub chain: Vec<Block>,
}

fn vehicle_schema_names() -> Vec<String> {
    VEHICLE_ATTRIBUTES.iter().map(|s| s.to_string()).collect()
}

impl Population {
    pub fn bootstrap<R: RngCore + CryptoRng>(
        rng: &mut R,
        config: &SimConfig,
    ) -> Result<Bootstrap, SimError> {
        let node_keys: Vec<KeyPair> = config
            .nodes
            .node_ids
            .iter()
            .map(|_| KeyPair::generate(rng))
            .collect();
        let mut registrars = Vec::with_capacity(config.registrars);
        for _ in 0..config.registrars {
            let mut keys = KeyStore::new();
            let did = keys.create(rng);
            registrars.push(Issuer {
                did,
                keys,
                cred_def: Digest::ZERO,
            });
        }
        let genesis = Genesis {
            chain_id: format!("vdkms-sim-{}", config.seed),
            timestamp: SIM_EPOCH_S,
            registrars: registrars.iter().map(|r| r.did.clone()).collect(),
            nodes: config
                .nodes
                .node_ids
                .iter()
                .zip(&node_keys)
                .map(|(id, k)| NodeIdentity {
                    id: *id,
                    public_key: k.public_key(),
                })
                .collect(),
            vin_tag_key: Digest::random(rng),
        };
        let (state, block0) = LedgerState::genesis(&genesis);

        let stamp = |rng: &mut R| TxnStamp::new(rng, SIM_EPOCH_S);
        let fail = |e: &dyn std::fmt::Display| SimError::Bootstrap(e.to_string());
        let mut txns = Vec::new();
        for (i, r) in registrars.iter_mut().enumerate() {
            txns.push(register_did(&r.keys, &r.did, stamp(rng)).map_err(|e| fail(&e))?);
            let name = format!("vehicle-registration-{i}");
            let (schema, t) = schema_gen(
                &r.keys,
                &r.did,
                &name,
                "1.0",
                vehicle_schema_names(),
                stamp(rng),
            )
            .map_err(|e| fail(&e))?;
            txns.push(t);
            let (def, t) = def_gen(&r.keys, &r.did, &schema, stamp(rng)).map_err(|e| fail(&e))?;
            r.cred_def = def.id();
            txns.push(t);
        }
        let mut vehicles = Vec::with_capacity(config.vehicles);
        for i in 0..config.vehicles + config.providers {
            let mut keys = KeyStore::new();
            let did = keys.create(rng);
            txns.push(register_did(&keys, &did, stamp(rng)).map_err(|e| fail(&e))?);
            if i < config.vehicles {
                vehicles.push((
                    did.clone(),
                    keys.get(&did).map_err(|e| fail(&e))?.public_key(),
                ));
            }
        }
        let (block1, applied) = state.propose_block(txns, SIM_EPOCH_S);
        if let Some(o) = applied.outcomes.iter().find(|o| !o.accepted()) {
            return Err(SimError::Bootstrap(format!(
                "{:?} rejected: {:?}",
                o.kind, o.rejection
            )));
        }
        Ok(Bootstrap {
            population: Population {
                registrars,
                vehicles,
                next_schema: 0,
                next_vin: 0,
            },
            node_keys,
            chain: vec![block0, block1],
        })
    }

    /// Transactions for one injection. SCHEMA_DEF yields only the schema;
    /// the definition follows via [`Population::cred_def_for`] once it commits.
    pub fn build<R: RngCore + CryptoRng>(
        &mut self,
        rng: &mut R,
        class: TxnClass,
        view: &LedgerView,
        now_s: u64,
    ) -> Result<(Transaction, Option<FollowUp>), SimError> {
        let fail = |e: &dyn std::fmt::Display| SimError::Bootstrap(e.to_string());
        let stamp = TxnStamp::new(rng, now_s);
        match class {
            TxnClass::DidReg => {
                let mut keys = KeyStore::new();
                let did = keys.create(rng);
                Ok((
                    register_did(&keys, &did, stamp).map_err(|e| fail(&e))?,
                    None,
                ))
            }
            TxnClass::SchemaDef => {
                let r = rng.gen_range(0..self.registrars.len());
                self.next_schema += 1;
                let name = format!("fleet-schema-{}", self.next_schema);
                let issuer = &self.registrars[r];
                let (schema, txn) = schema_gen(
                    &issuer.keys,
                    &issuer.did,
                    &name,
                    "1.0",
                    vehicle_schema_names(),
                    stamp,
                )
                .map_err(|e| fail(&e))?;
                Ok((
                    txn,
                    Some(FollowUp {
                        registrar: r,
                        schema: Box::new(schema),
                    }),
                ))
            }
            TxnClass::CredReg => {
                let r = rng.gen_range(0..self.registrars.len());
                let (subject, subject_pk) =
                    self.vehicles[rng.gen_range(0..self.vehicles.len())].clone();
                self.next_vin += 1;
                let vin = complete_vin(&format!("1HGCM826{:08}", self.next_vin))
                    .expect("16 valid characters");
                let attributes: BTreeMap<String, String> = [
                    ("VIN", vin.as_str()),
                    ("make", "Honda"),
                    ("model", "Accord"),
                    ("year", "2021"),
                ]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect();
                let issuer = &self.registrars[r];
                let (_, txn) = issue_credential(
                    rng,
                    &issuer.keys,
                    &issuer.did,
                    view,
                    &issuer.cred_def,
                    &subject,
                    &subject_pk,
                    &attributes,
                    stamp,
                )
                .map_err(|e| fail(&e))?;
                Ok((txn, None))
            }
        }
    }

    pub fn cred_def_for<R: RngCore + CryptoRng>(
        &self,
        rng: &mut R,
        follow: &FollowUp,
        now_s: u64,
    ) -> Result<Transaction, SimError> {
        let issuer = &self.registrars[follow.registrar];
        def_gen(
            &issuer.keys,
            &issuer.did,
            &follow.schema,
            TxnStamp::new(rng, now_s),
        )
        .map(|(_, t)| t)
        .map_err(|e| SimError::Bootstrap(e.to_string()))
    }

    #[cfg(test)]
    pub fn vehicle_count(&self) -> usize {
        self.vehicles.len()
    }
}

/// The credential definition still owed for a committed schema.
#[derive(Debug, Clone)]
pub struct FollowUp {
    registrar: usize,
    schema: Box<Schema>,
}
