use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::crypto::{KeyPair, Signature};
use crate::identity::{revoke_did, rotate_key};
use crate::testutil::Chain;

const ATTRS: [&str; 4] = ["VIN", "make", "model", "year"];

fn request(c: &mut Chain, attrs: &[&str]) -> ProofRequest {
    let verifier = c.registrar.clone();
    ProofRequest::new(
        &mut c.rng,
        attrs.iter().map(|s| s.to_string()).collect(),
        verifier,
        c.now,
    )
    .unwrap()
}

#[test]
fn every_disclosure_subset_verifies() {
    let mut c = Chain::new(100);
    let (did, held) = c.vehicle_with_credential(1);
    let kp = c.key(&did);
    let view = c.view();
    for mask in 1u32..16 {
        let attrs: Vec<&str> = (0..4)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| ATTRS[i])
            .collect();
        let req = request(&mut c, &attrs);
        let pres = proof_gen(&kp, &held, &req).unwrap();
        assert_eq!(pres.proof.revealed.len(), attrs.len());
        assert_eq!(pres.proof.hidden_commitments.len(), 4 - attrs.len());
        assert_eq!(
            verify_presentation(&view, &pres, &req, c.now),
            Ok(()),
            "mask {mask:04b}"
        );
    }
    // the empty request is refused on both sides
    let empty = ProofRequest {
        requested_attributes: Vec::new(),
        nonce: Nonce::random(&mut c.rng),
        verifier: c.registrar.clone(),
        issued_at: c.now,
    };
    assert!(proof_gen(&kp, &held, &empty).is_err());
}

#[test]
fn hidden_values_absent_from_presentation() {
    let mut c = Chain::new(101);
    let (did, held) = c.vehicle_with_credential(2);
    let req = request(&mut c, &["make"]);
    let pres = proof_gen(&c.key(&did), &held, &req).unwrap();
    let text = String::from_utf8(crate::crypto::to_canonical_bytes(&pres)).unwrap();
    assert!(!text.contains(held.attribute("VIN").unwrap()));
    assert!(!text.contains("Accord"));
    assert!(text.contains("Honda"));
}

#[test]
fn vin_validation_on_issue() {
    let mut c = Chain::new(102);
    let did = c.new_did();
    let pk = c.key(&did).public_key();
    let view = c.view();
    let mut bad = c.vin(5);
    let digit = bad.as_bytes()[8];
    let replacement = if digit == b'0' { "1" } else { "0" };
    bad.replace_range(8..9, replacement);
    let stamp = c.stamp();
    let err = issue_credential(
        &mut c.rng,
        &c.keys,
        &c.registrar,
        &view,
        &c.cred_def,
        &did,
        &pk,
        &Chain::attributes(&bad),
        stamp,
    )
    .unwrap_err();
    assert!(matches!(err, CredentialError::InvalidVin(_)));

    let mut no_vin = Chain::attributes(&c.vin(5));
    no_vin.remove(VIN_ATTRIBUTE);
    let stamp = c.stamp();
    let err = issue_credential(
        &mut c.rng,
        &c.keys,
        &c.registrar,
        &view,
        &c.cred_def,
        &did,
        &pk,
        &no_vin,
        stamp,
    )
    .unwrap_err();
    assert!(matches!(err, CredentialError::MissingVin));

    let mut extra = Chain::attributes(&c.vin(5));
    extra.insert("color".into(), "red".into());
    let stamp = c.stamp();
    let err = issue_credential(
        &mut c.rng,
        &c.keys,
        &c.registrar,
        &view,
        &c.cred_def,
        &did,
        &pk,
        &extra,
        stamp,
    )
    .unwrap_err();
    assert!(matches!(err, CredentialError::AttributeMismatch));

    c.vehicle_with_credential(9);
    let view = c.view();
    let stamp = c.stamp();
    let vin = c.vin(9);
    let err = issue_credential(
        &mut c.rng,
        &c.keys,
        &c.registrar,
        &view,
        &c.cred_def,
        &did,
        &pk,
        &Chain::attributes(&vin),
        stamp,
    )
    .unwrap_err();
    assert!(matches!(err, CredentialError::DuplicateVin));
}

#[test]
fn schema_attribute_rules() {
    let mut c = Chain::new(103);
    let kp = KeyPair::generate(&mut c.rng);
    let did = c.registrar.clone();
    assert!(matches!(
        Schema::new("s", "1", vec![], did.clone(), &kp),
        Err(CredentialError::EmptyAttributes)
    ));
    assert!(matches!(
        Schema::new("s", "1", vec!["a".into(), "a".into()], did.clone(), &kp),
        Err(CredentialError::DuplicateAttribute(_))
    ));
    assert!(matches!(
        Schema::new("s", "1", vec!["".into()], did, &kp),
        Err(CredentialError::InvalidAttribute(_))
    ));
}

/// One mutation per field the verifier must bind.
#[derive(Debug, Clone, Copy)]
enum Mutation {
    ClaimValue,
    ClaimSalt,
    HiddenCommitment,
    IssuerDid,
    SubjectDid,
    Nonce,
    HolderSignature,
    IssuerSignature,
    IssuedAt,
}

const MUTATIONS: [Mutation; 9] = [
    Mutation::ClaimValue,
    Mutation::ClaimSalt,
    Mutation::HiddenCommitment,
    Mutation::IssuerDid,
    Mutation::SubjectDid,
    Mutation::Nonce,
    Mutation::HolderSignature,
    Mutation::IssuerSignature,
    Mutation::IssuedAt,
];

fn flip_sig(rng: &mut ChaCha20Rng, s: &mut Signature) {
    let i = rng.gen_range(0..64);
    s.0[i] ^= 1 << rng.gen_range(0..8);
}

fn mutate(rng: &mut ChaCha20Rng, p: &mut Presentation, m: Mutation, other: &Did) -> bool {
    match m {
        Mutation::ClaimValue => {
            let Some((_, claim)) = p.proof.revealed.iter_mut().next() else {
                return false;
            };
            claim.value.push('X');
        }
        Mutation::ClaimSalt => {
            let Some((_, claim)) = p.proof.revealed.iter_mut().next() else {
                return false;
            };
            claim.salt.0[rng.gen_range(0..16)] ^= 1;
        }
        Mutation::HiddenCommitment => {
            let Some((_, d)) = p.proof.hidden_commitments.iter_mut().next() else {
                return false;
            };
            d.0[rng.gen_range(0..32)] ^= 1;
        }
        Mutation::IssuerDid => p.proof.credential.issuer = other.clone(),
        Mutation::SubjectDid => p.proof.credential.subject = other.clone(),
        Mutation::Nonce => p.challenge_nonce.0[rng.gen_range(0..16)] ^= 1,
        Mutation::HolderSignature => flip_sig(rng, &mut p.holder_signature),
        Mutation::IssuerSignature => flip_sig(rng, &mut p.proof.credential.issuer_signature),
        Mutation::IssuedAt => p.proof.credential.issued_at += 1,
    }
    true
}

#[test]
fn single_field_mutations_never_verify() {
    let mut c = Chain::new(104);
    let mut holders = Vec::new();
    for i in 0..10 {
        holders.push(c.vehicle_with_credential(1000 + i));
    }
    let bystander = c.new_did();
    let view = c.view();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let (mut honest, mut mutated) = (0, 0);
    for round in 0..1000 {
        let (did, held) = &holders[round % holders.len()];
        let k = rng.gen_range(1..4);
        let mut attrs = ATTRS.to_vec();
        for _ in 0..(4 - k) {
            attrs.remove(rng.gen_range(0..attrs.len()));
        }
        let req = request(&mut c, &attrs);
        let pres = proof_gen(&c.key(did), held, &req).unwrap();
        assert_eq!(verify_presentation(&view, &pres, &req, c.now), Ok(()));
        honest += 1;
        for m in MUTATIONS {
            let other = if matches!(m, Mutation::IssuerDid) {
                &holders[(round + 1) % holders.len()].0
            } else {
                &bystander
            };
            let mut bad = pres.clone();
            if mutate(&mut rng, &mut bad, m, other) {
                assert!(
                    verify_presentation(&view, &bad, &req, c.now).is_err(),
                    "{m:?} accepted"
                );
                mutated += 1;
            }
        }
    }
    assert_eq!(honest, 1000);
    assert!(mutated >= 7000);
}

#[test]
fn challenge_book_rejects_replay() {
    let mut c = Chain::new(105);
    let (did, held) = c.vehicle_with_credential(3);
    let view = c.view();
    let mut book = ChallengeBook::new();
    let req = book
        .issue(&mut c.rng, vec!["VIN".into()], c.registrar.clone(), c.now)
        .unwrap();
    let pres = proof_gen(&c.key(&did), &held, &req).unwrap();
    assert_eq!(book.check(&view, &req.nonce, &pres, c.now), Ok(()));
    assert_eq!(
        book.check(&view, &req.nonce, &pres, c.now),
        Err(VerifyFailure::Replay)
    );
    // an answer to a nonce that was never issued
    let stray =
        ProofRequest::new(&mut c.rng, vec!["VIN".into()], c.registrar.clone(), c.now).unwrap();
    let pres = proof_gen(&c.key(&did), &held, &stray).unwrap();
    assert_eq!(
        book.check(&view, &stray.nonce, &pres, c.now),
        Err(VerifyFailure::NonceMismatch)
    );
}

#[test]
fn stale_request_expires() {
    let mut c = Chain::new(106);
    let (did, held) = c.vehicle_with_credential(4);
    let req = request(&mut c, &["VIN"]);
    let pres = proof_gen(&c.key(&did), &held, &req).unwrap();
    let view = c.view();
    assert_eq!(
        verify_presentation(&view, &pres, &req, c.now + FRESHNESS_WINDOW_S),
        Ok(())
    );
    assert_eq!(
        verify_presentation(&view, &pres, &req, c.now + FRESHNESS_WINDOW_S + 1),
        Err(VerifyFailure::Expired)
    );
}

#[test]
fn revocation_outcomes() {
    let mut c = Chain::new(107);
    let (did, held) = c.vehicle_with_credential(5);
    let root = held.credential.commitment_root();
    let req = request(&mut c, &["VIN"]);
    let pres = proof_gen(&c.key(&did), &held, &req).unwrap();
    let before = c.view();
    let t = revoke_credential(&c.keys, &c.registrar, &before, &root, c.stamp()).unwrap();
    c.commit_ok(vec![t]);
    // verdicts are per snapshot
    assert_eq!(verify_presentation(&before, &pres, &req, c.now), Ok(()));
    assert_eq!(
        verify_presentation(&c.view(), &pres, &req, c.now),
        Err(VerifyFailure::RevokedCredential)
    );

    let (did2, held2) = c.vehicle_with_credential(6);
    let t = revoke_did(&c.keys, &c.registrar, &c.view(), &did2, c.stamp()).unwrap();
    c.commit_ok(vec![t]);
    let req = request(&mut c, &["VIN"]);
    let pres = proof_gen(&c.key(&did2), &held2, &req).unwrap();
    assert_eq!(
        verify_presentation(&c.view(), &pres, &req, c.now),
        Err(VerifyFailure::RevokedSubject)
    );
}

#[test]
fn retired_key_presentations_fail_after_rotation() {
    let mut c = Chain::new(108);
    let (did, held) = c.vehicle_with_credential(8);
    let old = c.key(&did);
    let fresh = KeyPair::generate(&mut c.rng);
    let t = rotate_key(&c.keys, &c.view(), &did, &fresh, c.stamp()).unwrap();
    c.tick(5);
    c.commit_ok(vec![t]);
    let req = request(&mut c, &["VIN"]);
    let stale = proof_gen(&old, &held, &req).unwrap();
    assert_eq!(
        verify_presentation(&c.view(), &stale, &req, c.now),
        Err(VerifyFailure::InvalidHolderSignature)
    );
    let ok = proof_gen(&fresh, &held, &req).unwrap();
    assert_eq!(verify_presentation(&c.view(), &ok, &req, c.now), Ok(()));
}

#[test]
fn issuer_rotation_keeps_old_credentials_valid() {
    let mut c = Chain::new(109);
    let (did, held) = c.vehicle_with_credential(10);
    c.tick(5);
    let fresh = KeyPair::generate(&mut c.rng);
    let registrar = c.registrar.clone();
    let t = rotate_key(&c.keys, &c.view(), &registrar, &fresh, c.stamp()).unwrap();
    c.commit_ok(vec![t]);
    let req = request(&mut c, &["VIN", "year"]);
    let pres = proof_gen(&c.key(&did), &held, &req).unwrap();
    assert_eq!(verify_presentation(&c.view(), &pres, &req, c.now), Ok(()));
}

#[test]
fn credentials_are_not_transferable() {
    let mut c = Chain::new(110);
    let holders: Vec<_> = (0..10)
        .map(|i| c.vehicle_with_credential(2000 + i))
        .collect();
    let view = c.view();
    for (i, (_, held)) in holders.iter().enumerate() {
        for (j, (signer, _)) in holders.iter().enumerate() {
            let req = request(&mut c, &["VIN"]);
            let pres = proof_gen(&c.key(signer), held, &req).unwrap();
            let got = verify_presentation(&view, &pres, &req, c.now);
            if i == j {
                assert_eq!(got, Ok(()));
            } else {
                assert_eq!(got, Err(VerifyFailure::InvalidHolderSignature));
            }
        }
    }
}

#[test]
fn untrusted_issuer_rejected() {
    // A holder who swaps in a different issuer and re-signs still fails:
    // the definition's issuer and the registrar set come from the ledger.
    let mut c = Chain::new(111);
    let (did, held) = c.vehicle_with_credential(11);
    let other = c.new_did();
    let req = request(&mut c, &["VIN"]);
    let holder = c.key(&did);
    let mut pres = proof_gen(&holder, &held, &req).unwrap();
    pres.proof.credential.issuer = other;
    pres.holder_signature =
        holder.sign(&Presentation::holder_signing_bytes(&pres.proof, &req.nonce));
    assert_eq!(
        verify_presentation(&c.view(), &pres, &req, c.now),
        Err(VerifyFailure::UntrustedIssuer)
    );
}

#[test]
fn held_credential_serde_round_trip() {
    let mut c = Chain::new(112);
    let (_, held) = c.vehicle_with_credential(12);
    let bytes = crate::crypto::to_canonical_bytes(&held);
    let back: HeldCredential = crate::crypto::from_canonical_bytes(&bytes).unwrap();
    assert_eq!(back, held);
}
