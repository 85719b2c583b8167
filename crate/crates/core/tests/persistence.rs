use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use vdkms::crypto::KdfParams;
use vdkms::embedded::{EmbeddedConfig, EmbeddedLedger, LedgerClient};
use vdkms::protocols::{
    authorize, load_agent, register_vehicle, save_agent, RegistrarAgent, SchemaSpec,
    ServiceProviderAgent, VehicleAgent,
};

const T0: u64 = 1_700_000_000;

fn attributes() -> BTreeMap<String, String> {
    [
        ("VIN", "1HGCM82633A004352"),
        ("make", "Honda"),
        ("model", "Accord"),
        ("year", "2003"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

#[test]
fn reopened_ledger_and_wallets_continue_the_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let ledger_dir = dir.path().join("ledger");
    let mut rng = ChaCha20Rng::seed_from_u64(1);

    let mut registrar = RegistrarAgent::new(&mut rng);
    let cfg = EmbeddedConfig::new(4, vec![registrar.did().clone()], T0);
    let mut ledger = EmbeddedLedger::create(&mut rng, &cfg, &ledger_dir).unwrap();
    assert!(EmbeddedLedger::create(&mut rng, &cfg, &ledger_dir).is_err());
    registrar
        .provision(&mut ledger, &mut rng, &SchemaSpec::vehicle_registration())
        .unwrap();
    let mut vehicle = VehicleAgent::new(&mut rng);
    vehicle.provision(&mut ledger, &mut rng).unwrap();
    register_vehicle(
        &mut vehicle,
        &mut registrar,
        &mut ledger,
        &mut rng,
        attributes(),
    )
    .unwrap();
    let before = ledger.view().unwrap();
    let later = ledger.now() + 30;
    drop(ledger);

    let paths = [dir.path().join("r.wallet"), dir.path().join("v.wallet")];
    save_agent(&mut rng, &registrar, &paths[0], "pw", KdfParams::light()).unwrap();
    save_agent(&mut rng, &vehicle, &paths[1], "pw", KdfParams::light()).unwrap();
    assert!(load_agent::<VehicleAgent>(&paths[1], "not pw").is_err());
    let registrar: RegistrarAgent = load_agent(&paths[0], "pw").unwrap();
    let mut vehicle: VehicleAgent = load_agent(&paths[1], "pw").unwrap();
    assert_eq!(registrar.issued.len(), 1);
    assert!(vehicle.credential.is_some());

    let mut ledger = EmbeddedLedger::open(&ledger_dir, later).unwrap();
    let after = ledger.view().unwrap();
    assert_eq!(after.height(), before.height());
    assert_eq!(after.state_root(), before.state_root());
    assert_eq!(after.head(), before.head());
    assert!(ledger.now() >= later);

    let mut sp = ServiceProviderAgent::new(&mut rng);
    sp.provision(&mut ledger, &mut rng).unwrap();
    authorize(&mut vehicle, &mut sp, &ledger, &mut rng, vec!["VIN".into()]).unwrap();
    let height = ledger.view().unwrap().height();
    drop(ledger);
    assert_eq!(
        EmbeddedLedger::open(&ledger_dir, later)
            .unwrap()
            .view()
            .unwrap()
            .height(),
        height
    );
}

#[test]
fn a_truncated_block_store_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let mut registrar = RegistrarAgent::new(&mut rng);
    let cfg = EmbeddedConfig::new(4, vec![registrar.did().clone()], T0);
    let mut ledger = EmbeddedLedger::create(&mut rng, &cfg, dir.path()).unwrap();
    registrar
        .provision(&mut ledger, &mut rng, &SchemaSpec::vehicle_registration())
        .unwrap();
    let full = ledger.view().unwrap().height();
    drop(ledger);

    let blocks = dir.path().join("blocks.bin");
    let len = std::fs::metadata(&blocks).unwrap().len();
    let f = std::fs::OpenOptions::new()
        .write(true)
        .open(&blocks)
        .unwrap();
    f.set_len(len - 3).unwrap();
    drop(f);
    let err = EmbeddedLedger::open(dir.path(), T0)
        .err()
        .expect("truncated store must not open");
    assert!(err.to_string().contains("truncated"), "{err}");
    assert!(full > 0);
}
