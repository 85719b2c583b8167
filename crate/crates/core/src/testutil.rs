//! Shared fixtures for unit tests: a single-writer chain that commits
//! transactions directly through `propose_block`.

use std::cell::Cell;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::credentials::{
    def_gen, issue_credential, schema_gen, vin::complete_vin, HeldCredential, VIN_ATTRIBUTE,
};
use crate::crypto::{Digest, KeyPair, Nonce};
use crate::identity::{register_did, Did, KeyStore};
use crate::ledger::{Block, Genesis, LedgerState, LedgerView, Rejection, Transaction, TxnStamp};

pub const T0: u64 = 1_700_000_000;

pub struct Chain {
    pub rng: ChaCha20Rng,
    pub keys: KeyStore,
    pub registrar: Did,
    pub state: LedgerState,
    pub blocks: Vec<Block>,
    pub now: u64,
    pub cred_def: Digest,
    counter: Cell<u64>,
}

impl Chain {
    /// Genesis with one registrar, then DID_REG + VIN schema + definition.
    pub fn new(seed: u64) -> Chain {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut keys = KeyStore::new();
        let registrar = keys.create(&mut rng);
        let genesis = Genesis {
            chain_id: "test".into(),
            timestamp: T0,
            registrars: vec![registrar.clone()],
            nodes: Vec::new(),
            vin_tag_key: Digest::of(b"vin-tag-key"),
        };
        let (state, g) = LedgerState::genesis(&genesis);
        let mut chain = Chain {
            rng,
            keys,
            registrar: registrar.clone(),
            state,
            blocks: vec![g],
            now: T0,
            cred_def: Digest::ZERO,
            counter: Cell::new(0),
        };
        let reg = register_did(&chain.keys, &registrar, chain.stamp()).unwrap();
        chain.commit_ok(vec![reg]);
        let attrs = ["VIN", "make", "model", "year"].map(String::from).to_vec();
        let (schema, st) = schema_gen(
            &chain.keys,
            &registrar,
            "vehicle-registration",
            "1.0",
            attrs,
            chain.stamp(),
        )
        .unwrap();
        chain.commit_ok(vec![st]);
        let (def, dt) = def_gen(&chain.keys, &registrar, &schema, chain.stamp()).unwrap();
        chain.commit_ok(vec![dt]);
        chain.cred_def = def.id();
        chain
    }

    /// Fresh stamp at the chain clock; nonces come from a counter so this
    /// can be called while other fields are borrowed.
    pub fn stamp(&self) -> TxnStamp {
        let n = self.counter.get() + 1;
        self.counter.set(n);
        let mut b = [0u8; 16];
        b.copy_from_slice(&Digest::of(&n.to_le_bytes()).0[..16]);
        TxnStamp {
            nonce: Nonce(b),
            timestamp: self.now,
        }
    }

    pub fn view(&self) -> LedgerView {
        self.state.snapshot()
    }

    pub fn tick(&mut self, secs: u64) {
        self.now += secs;
    }

    /// Commits a block and returns each transaction's rejection, if any.
    pub fn commit(&mut self, txns: Vec<Transaction>) -> Vec<Option<Rejection>> {
        let (block, applied) = self.state.propose_block(txns, self.now);
        self.state = applied.state;
        self.blocks.push(block);
        applied.outcomes.into_iter().map(|o| o.rejection).collect()
    }

    pub fn commit_ok(&mut self, txns: Vec<Transaction>) {
        for r in self.commit(txns) {
            assert_eq!(r, None);
        }
    }

    /// Registers a fresh public DID.
    pub fn new_did(&mut self) -> Did {
        let did = self.keys.create(&mut self.rng);
        let txn = register_did(&self.keys, &did, self.stamp()).unwrap();
        self.commit_ok(vec![txn]);
        did
    }

    pub fn key(&self, did: &Did) -> KeyPair {
        self.keys.get(did).unwrap().clone()
    }

    pub fn vin(&self, n: u64) -> String {
        complete_vin(&format!("1HGCM826{:08}", n)).unwrap()
    }

    pub fn attributes(vin: &str) -> BTreeMap<String, String> {
        [
            (VIN_ATTRIBUTE, vin),
            ("make", "Honda"),
            ("model", "Accord"),
            ("year", "2003"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    /// Registers a vehicle DID and issues it a committed VIN credential.
    pub fn vehicle_with_credential(&mut self, n: u64) -> (Did, HeldCredential) {
        let did = self.new_did();
        let vin = self.vin(n);
        let pk = self.key(&did).public_key();
        let stamp = self.stamp();
        let view = self.view();
        let (held, txn) = issue_credential(
            &mut self.rng,
            &self.keys,
            &self.registrar,
            &view,
            &self.cred_def,
            &did,
            &pk,
            &Self::attributes(&vin),
            stamp,
        )
        .unwrap();
        self.commit_ok(vec![txn]);
        (did, held)
    }
}
