use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::credentials::{issue_credential, revoke_credential, schema_gen};
use crate::crypto::{Digest, KeyPair};
use crate::identity::{register_did, revoke_did, rotate_key, Did, DidMethod};
use crate::testutil::Chain;

/// Builds a signed transaction of `kind` authored by `author`, with payloads
/// that would be valid if the author held the needed role.
fn txn_of_kind(c: &mut Chain, kind: TxnKind, author: &Did, subject: &Did) -> Transaction {
    let kp = c.key(author);
    let stamp = c.stamp();
    let body = match kind {
        TxnKind::DidReg => {
            let fresh = KeyPair::generate(&mut c.rng);
            let did = Did::from_public_key(&fresh.public_key(), DidMethod::Public);
            return Transaction::sign(
                TxnPayload::DidReg {
                    did: did.clone(),
                    public_key: fresh.public_key(),
                },
                did,
                &fresh,
                stamp,
            );
        }
        TxnKind::Schema => {
            let v = format!("v{}", c.rng.gen::<u32>());
            let s =
                crate::credentials::Schema::new("s", &v, vec!["VIN".into()], author.clone(), &kp)
                    .unwrap();
            TxnPayload::Schema(s)
        }
        TxnKind::CredDef => {
            let v = format!("v{}", c.rng.gen::<u32>());
            let (s, st) = schema_gen(
                &c.keys,
                &c.registrar,
                "d",
                &v,
                vec!["VIN".into()],
                c.stamp(),
            )
            .unwrap();
            c.commit_ok(vec![st]);
            TxnPayload::CredDef(crate::credentials::CredentialDefinition::new(
                &s,
                author.clone(),
                &kp,
            ))
        }
        TxnKind::CredReg => {
            // Issued by the real registrar, then re-signed by `author`.
            let n = c.rng.gen_range(0..10_000_000);
            let vin = c.vin(n);
            let view = c.view();
            let pk = c.key(subject).public_key();
            let (_, t) = issue_credential(
                &mut c.rng,
                &c.keys,
                &c.registrar,
                &view,
                &c.cred_def,
                subject,
                &pk,
                &Chain::attributes(&vin),
                stamp,
            )
            .unwrap();
            if *author == c.registrar {
                return t;
            }
            t.body
        }
        TxnKind::CredRevoke => {
            let n = c.rng.gen_range(0..10_000_000);
            let (_, held) = c.vehicle_with_credential(n);
            TxnPayload::CredRevoke {
                commitment_root: held.credential.commitment_root(),
            }
        }
        TxnKind::DidRevoke => {
            let victim = c.new_did();
            TxnPayload::DidRevoke { did: victim }
        }
        TxnKind::Rotate => {
            let fresh = KeyPair::generate(&mut c.rng);
            TxnPayload::Rotate {
                did: subject.clone(),
                new_public_key: fresh.public_key(),
            }
        }
    };
    Transaction::sign(body, author.clone(), &kp, stamp)
}

#[test]
fn permission_matrix() {
    let mut c = Chain::new(1);
    let vehicle = c.new_did();
    for kind in TxnKind::ALL {
        for role in ["registrar", "vehicle"] {
            let author = if role == "registrar" {
                c.registrar.clone()
            } else {
                vehicle.clone()
            };
            // ROTATE targets the author's own DID
            let subject = if kind == TxnKind::Rotate {
                author.clone()
            } else {
                vehicle.clone()
            };
            let txn = txn_of_kind(&mut c, kind, &author, &subject);
            let got = c.state.validate_txn(&txn, c.now);
            let allowed = match kind {
                TxnKind::DidReg | TxnKind::Rotate => true,
                _ => role == "registrar",
            };
            if allowed {
                assert_eq!(got, Ok(()), "{kind:?} by {role}");
            } else {
                assert_eq!(got, Err(Rejection::Permission), "{kind:?} by {role}");
            }
        }
    }
}

#[test]
fn rotate_of_someone_else_rejected() {
    let mut c = Chain::new(2);
    let a = c.new_did();
    let b = c.new_did();
    let kp = c.key(&a);
    let fresh = KeyPair::generate(&mut c.rng);
    let t = Transaction::sign(
        TxnPayload::Rotate {
            did: b,
            new_public_key: fresh.public_key(),
        },
        a,
        &kp,
        c.stamp(),
    );
    assert_eq!(c.state.validate_txn(&t, c.now), Err(Rejection::Permission));
}

#[test]
fn replayed_txn_rejected() {
    let mut c = Chain::new(3);
    let did = c.keys.create(&mut c.rng);
    let t = register_did(&c.keys, &did, c.stamp()).unwrap();
    c.commit_ok(vec![t.clone()]);
    assert_eq!(c.state.validate_txn(&t, c.now), Err(Rejection::Replay));
    // same nonce inside one block
    let d2 = c.keys.create(&mut c.rng);
    let t2 = register_did(&c.keys, &d2, c.stamp()).unwrap();
    assert_eq!(
        c.commit(vec![t2.clone(), t2]),
        vec![None, Some(Rejection::Replay)]
    );
}

#[test]
fn timestamp_window() {
    let mut c = Chain::new(4);
    for (offset, ok) in [
        (-301i64, false),
        (-300, true),
        (0, true),
        (300, true),
        (301, false),
    ] {
        let did = c.keys.create(&mut c.rng);
        let ts = (c.now as i64 + offset) as u64;
        let t = register_did(&c.keys, &did, TxnStamp::new(&mut c.rng, ts)).unwrap();
        let got = c.state.validate_txn(&t, c.now);
        assert_eq!(got.is_ok(), ok, "offset {offset}");
        if !ok {
            assert_eq!(got, Err(Rejection::StaleTimestamp));
        }
    }
}

#[test]
fn did_reg_must_be_self_certifying() {
    let mut c = Chain::new(5);
    let kp = KeyPair::generate(&mut c.rng);
    let other = KeyPair::generate(&mut c.rng);
    let did = Did::from_public_key(&kp.public_key(), DidMethod::Public);
    // payload key does not derive the DID
    let t = Transaction::sign(
        TxnPayload::DidReg {
            did: did.clone(),
            public_key: other.public_key(),
        },
        did.clone(),
        &kp,
        c.stamp(),
    );
    assert_eq!(c.state.validate_txn(&t, c.now), Err(Rejection::DidMismatch));
    // signed by the wrong key
    let t = Transaction::sign(
        TxnPayload::DidReg {
            did: did.clone(),
            public_key: kp.public_key(),
        },
        did.clone(),
        &other,
        c.stamp(),
    );
    assert_eq!(
        c.state.validate_txn(&t, c.now),
        Err(Rejection::BadSignature)
    );
    // peer DIDs stay off the ledger
    let peer = Did::from_public_key(&kp.public_key(), DidMethod::Peer);
    let t = Transaction::sign(
        TxnPayload::DidReg {
            did: peer.clone(),
            public_key: kp.public_key(),
        },
        peer,
        &kp,
        c.stamp(),
    );
    assert_eq!(
        c.state.validate_txn(&t, c.now),
        Err(Rejection::PeerDidOnLedger)
    );
    let t = Transaction::sign(
        TxnPayload::DidReg {
            did: did.clone(),
            public_key: kp.public_key(),
        },
        did,
        &kp,
        c.stamp(),
    );
    assert_eq!(c.state.validate_txn(&t, c.now), Ok(()));
    c.commit_ok(vec![t.clone()]);
    let mut again = t;
    again.nonce = crate::crypto::Nonce::random(&mut c.rng);
    again.author_signature = kp.sign(&again.signing_bytes());
    assert_eq!(
        c.state.validate_txn(&again, c.now),
        Err(Rejection::DuplicateDid)
    );
}

#[test]
fn duplicate_schema_rejected() {
    let mut c = Chain::new(6);
    let attrs = vec!["VIN".to_string(), "color".to_string()];
    let (_, t1) = schema_gen(&c.keys, &c.registrar, "x", "1", attrs.clone(), c.stamp()).unwrap();
    let (_, t2) = schema_gen(&c.keys, &c.registrar, "x", "1", attrs, c.stamp()).unwrap();
    assert_eq!(
        c.commit(vec![t1, t2]),
        vec![None, Some(Rejection::DuplicateSchema)]
    );
}

#[test]
fn query_before_and_after_commit() {
    let mut c = Chain::new(7);
    let (schema, t) = schema_gen(
        &c.keys,
        &c.registrar,
        "q",
        "1",
        vec!["VIN".into()],
        c.stamp(),
    )
    .unwrap();
    let before = c.view();
    assert!(before.schema(&schema.id()).is_none());
    c.commit_ok(vec![t]);
    assert_eq!(c.view().schema(&schema.id()), Some(&schema));
    // the old snapshot is unaffected
    assert!(before.schema(&schema.id()).is_none());
}

#[test]
fn duplicate_vin_in_one_block() {
    let mut c = Chain::new(8);
    let a = c.new_did();
    let b = c.new_did();
    let vin = c.vin(42);
    let view = c.view();
    let mut txns = Vec::new();
    for who in [&a, &b] {
        let pk = c.key(who).public_key();
        let stamp = c.stamp();
        let (_, t) = issue_credential(
            &mut c.rng,
            &c.keys,
            &c.registrar,
            &view,
            &c.cred_def,
            who,
            &pk,
            &Chain::attributes(&vin),
            stamp,
        )
        .unwrap();
        txns.push(t);
    }
    assert_eq!(c.commit(txns), vec![None, Some(Rejection::DuplicateVin)]);
    let tag = c.state.vin_tag(&vin);
    assert_eq!(c.state.live_credentials_for_tag(&tag), 1);
}

#[test]
fn vin_reusable_after_revocation() {
    let mut c = Chain::new(9);
    let (_, held) = c.vehicle_with_credential(7);
    let root = held.credential.commitment_root();
    let t = revoke_credential(&c.keys, &c.registrar, &c.view(), &root, c.stamp()).unwrap();
    c.commit_ok(vec![t.clone()]);
    assert!(c.state.credential(&root).unwrap().revoked);
    let mut again = t;
    again.nonce = crate::crypto::Nonce::random(&mut c.rng);
    again.author_signature = c.key(&c.registrar).sign(&again.signing_bytes());
    assert_eq!(
        c.state.validate_txn(&again, c.now),
        Err(Rejection::AlreadyRevoked)
    );
    c.vehicle_with_credential(7);
    let tag = c.state.vin_tag(&c.vin(7));
    assert_eq!(c.state.live_credentials_for_tag(&tag), 1);
}

#[test]
fn empty_block_keeps_root() {
    let mut c = Chain::new(10);
    let root = c.state.state_root();
    let h = c.state.height();
    c.commit(Vec::new());
    assert_eq!(c.state.state_root(), root);
    assert_eq!(c.state.height(), h + 1);
}

fn random_history(seed: u64) -> Chain {
    let mut c = Chain::new(seed);
    let mut vehicles = Vec::new();
    for i in 0..20 {
        c.tick(1);
        match i % 4 {
            0 => vehicles.push(c.new_did()),
            1 => {
                c.vehicle_with_credential(seed * 100 + i);
            }
            2 if !vehicles.is_empty() => {
                let v = vehicles.remove(0);
                let t = revoke_did(&c.keys, &c.registrar, &c.view(), &v, c.stamp()).unwrap();
                c.commit_ok(vec![t]);
            }
            _ => {
                let d = c.new_did();
                let fresh = KeyPair::generate(&mut c.rng);
                let t = rotate_key(&c.keys, &c.view(), &d, &fresh, c.stamp()).unwrap();
                c.commit_ok(vec![t]);
            }
        }
    }
    c
}

#[test]
fn dual_replay_matches() {
    for seed in 0..5 {
        let c = random_history(seed);
        let replica = LedgerState::replay(&c.blocks).unwrap();
        assert_eq!(replica.state_root(), c.state.state_root());
        assert_eq!(replica.head(), c.state.head());
        // 100 random queries agree
        let (a, b) = (c.view(), replica.snapshot());
        let dids: Vec<Did> = a.did_documents().map(|d| d.id.clone()).collect();
        let roots: Vec<Digest> = a.credentials().map(|(r, _)| *r).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let d = &dids[rng.gen_range(0..dids.len())];
            assert_eq!(a.did_document(d), b.did_document(d));
            let r = &roots[rng.gen_range(0..roots.len())];
            assert_eq!(a.credential(r), b.credential(r));
        }
    }
}

#[test]
fn root_is_independent_of_map_history() {
    // The incremental root must equal a root built from scratch over the
    // same final maps, which replay provides independently of the proposer.
    let c = random_history(11);
    let fresh = LedgerState::replay(&c.blocks).unwrap();
    assert_eq!(fresh.state_root(), c.state.state_root());
}

#[test]
fn historical_byte_change_breaks_chain() {
    let c = random_history(12);
    let hashes: Vec<Digest> = c.blocks.iter().map(Block::hash).collect();
    for h in 1..c.blocks.len() {
        if c.blocks[h].txns.is_empty() {
            continue;
        }
        let mut blocks = c.blocks.clone();
        blocks[h].txns[0].timestamp += 1;
        // every descendant digest changes once prev_hash links are recomputed
        for i in h..blocks.len() {
            if i > h {
                blocks[i].prev_hash = blocks[i - 1].hash();
            }
            assert_ne!(blocks[i].hash(), hashes[i]);
        }
        // and replay of the untouched tail fails on linkage or root
        let mut tampered = c.blocks.clone();
        tampered[h].txns[0].timestamp += 1;
        assert!(LedgerState::replay(&tampered).is_err());
    }
}

#[test]
fn apply_block_checks_linkage() {
    let mut c = Chain::new(13);
    let base = c.state.clone();
    c.commit(Vec::new());
    let good = c.blocks.last().unwrap().clone();
    let mut bad = good.clone();
    bad.prev_hash = Digest::ZERO;
    assert!(matches!(
        base.apply_block(&bad),
        Err(LedgerError::BrokenChain { .. })
    ));
    let mut bad = good.clone();
    bad.height += 1;
    assert!(matches!(
        base.apply_block(&bad),
        Err(LedgerError::HeightMismatch { .. })
    ));
    let mut bad = good.clone();
    bad.state_root = Digest::ZERO;
    assert!(matches!(
        base.apply_block(&bad),
        Err(LedgerError::StateRootMismatch { .. })
    ));
    assert!(base.apply_block(&good).is_ok());
}

#[test]
fn block_store_round_trip() {
    let c = random_history(14);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("blocks.bin");
    let mut store = BlockStore::open(&path).unwrap();
    for b in &c.blocks {
        store.append(b).unwrap();
    }
    drop(store);
    let store = BlockStore::open(&path).unwrap();
    assert_eq!(store.read_all().unwrap(), c.blocks);
    assert_eq!(store.replay().unwrap().state_root(), c.state.state_root());
}

#[test]
fn commitments_not_values_on_chain() {
    let mut c = Chain::new(15);
    let (_, held) = c.vehicle_with_credential(99);
    let vin = held.attribute("VIN").unwrap().to_string();
    for b in &c.blocks {
        let bytes = String::from_utf8(crate::crypto::to_canonical_bytes(b)).unwrap();
        assert!(!bytes.contains(&vin));
        assert!(!bytes.contains("Accord"));
    }
}

#[test]
fn identity_lifecycle_against_ledger() {
    let mut c = Chain::new(16);
    let did = c.new_did();
    let mut seen = vec![c.key(&did).public_key()];
    for _ in 0..5 {
        c.tick(10);
        let fresh = KeyPair::generate(&mut c.rng);
        let t = rotate_key(&c.keys, &c.view(), &did, &fresh, c.stamp()).unwrap();
        c.commit_ok(vec![t]);
        c.keys.insert(did.clone(), fresh.clone());
        seen.push(fresh.public_key());
        let doc = crate::identity::resolve(&c.view(), &did).unwrap();
        assert_eq!(doc.active_public_key, fresh.public_key());
    }
    let doc = crate::identity::resolve(&c.view(), &did).unwrap();
    let history: Vec<_> = doc.previous_keys.iter().map(|k| k.public_key).collect();
    assert_eq!(history, seen[..5]);

    // rotating back to a retired key is refused
    let t = Transaction::sign(
        TxnPayload::Rotate {
            did: did.clone(),
            new_public_key: seen[0],
        },
        did.clone(),
        &c.key(&did),
        c.stamp(),
    );
    assert_eq!(c.state.validate_txn(&t, c.now), Err(Rejection::KeyReuse));

    let t = revoke_did(&c.keys, &c.registrar, &c.view(), &did, c.stamp()).unwrap();
    c.commit_ok(vec![t]);
    assert!(crate::identity::resolve(&c.view(), &did).unwrap().revoked);
    let fresh = KeyPair::generate(&mut c.rng);
    assert!(rotate_key(&c.keys, &c.view(), &did, &fresh, c.stamp()).is_err());
    let forced = Transaction::sign(
        TxnPayload::Rotate {
            did: did.clone(),
            new_public_key: fresh.public_key(),
        },
        did.clone(),
        &c.key(&did),
        c.stamp(),
    );
    assert_eq!(
        c.state.validate_txn(&forced, c.now),
        Err(Rejection::RevokedAuthor)
    );
}

#[test]
fn resolve_rejects_peer_and_unknown() {
    let mut c = Chain::new(17);
    let kp = KeyPair::generate(&mut c.rng);
    let peer = Did::from_public_key(&kp.public_key(), DidMethod::Peer);
    assert!(matches!(
        crate::identity::resolve(&c.view(), &peer),
        Err(crate::identity::IdentityError::PeerDid(_))
    ));
    let unknown = Did::from_public_key(&kp.public_key(), DidMethod::Public);
    assert!(matches!(
        crate::identity::resolve(&c.view(), &unknown),
        Err(crate::identity::IdentityError::NotFound(_))
    ));
}
