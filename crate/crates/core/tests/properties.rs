use std::collections::HashSet;
use std::sync::Arc;

use proptest::prelude::*;

use miso::crypto::{
    derive_client_id, derive_multi_uid, derive_pre_uid, derive_tag, derive_uid, encode_fields, prf, PrfKey, RawUserId,
    Salt,
};
use miso::enclave::{verify_attestation, Enclave, Platform, SealMode};

fn key(bytes: [u8; 32]) -> PrfKey {
    PrfKey::from_bytes(bytes)
}

/// Every list of at most three fields, each at most three symbols from {a, b}.
fn small_lists() -> Vec<Vec<Vec<u8>>> {
    let mut words: Vec<Vec<u8>> = vec![vec![]];
    for len in 1..=3 {
        for bits in 0..(1u32 << len) {
            words.push(
                (0..len)
                    .map(|i| if bits & (1 << i) != 0 { b'b' } else { b'a' })
                    .collect(),
            );
        }
    }
    let mut lists = vec![vec![]];
    let mut frontier: Vec<Vec<Vec<u8>>> = vec![vec![]];
    for _ in 0..3 {
        let mut next = Vec::new();
        for l in &frontier {
            for w in &words {
                let mut l = l.clone();
                l.push(w.clone());
                next.push(l);
            }
        }
        lists.extend(next.iter().cloned());
        frontier = next;
    }
    lists
}

#[test]
fn encode_fields_injective_exhaustive() {
    let lists = small_lists();
    assert_eq!(lists.len(), 1 + 15 + 15 * 15 + 15 * 15 * 15);
    let mut seen = HashSet::new();
    for l in &lists {
        assert!(seen.insert(encode_fields(l).unwrap()), "collision for {l:?}");
    }
}

#[test]
fn splice_does_not_collide() {
    assert_ne!(
        encode_fields(["ali", "ce1"]).unwrap(),
        encode_fields(["alice", "1"]).unwrap()
    );
}

#[test]
fn derive_uid_monobit() {
    let k = PrfKey::generate().unwrap();
    let mut ones = 0u64;
    let n = 10_000;
    for i in 0..n {
        let raw = RawUserId::new("idp-a", format!("user-{i}"));
        let salt = Salt::generate().unwrap();
        let out = derive_uid(&k, &raw, "cid", &salt);
        ones += out.iter().map(|b| b.count_ones() as u64).sum::<u64>();
    }
    let frac = ones as f64 / (n as f64 * 256.0);
    assert!((0.49..=0.51).contains(&frac), "fraction of ones {frac}");
}

#[test]
fn seal_nonces_unique() {
    let dir = tempfile::tempdir().unwrap();
    let platform = Arc::new(Platform::generate().unwrap());
    let e = Enclave::install(platform, b"prog", "signer", SealMode::MrEnclave, dir.path()).unwrap();
    let mut nonces = HashSet::new();
    for _ in 0..10_000 {
        assert!(nonces.insert(e.seal("l", b"x").unwrap().nonce));
    }
}

#[test]
fn attestation_single_byte_tampers_fail() {
    use rand::{Rng, SeedableRng};
    let dir = tempfile::tempdir().unwrap();
    let platform = Arc::new(Platform::generate().unwrap());
    let e = Enclave::install(platform.clone(), b"prog", "signer", SealMode::MrEnclave, dir.path()).unwrap();
    let report = e.attest(&[9u8; 32]).unwrap();
    let pk = platform.tee_public_key();
    let m = e.measurement();
    assert!(verify_attestation(&pk, &report, &m));
    let mut rng = rand::rngs::StdRng::seed_from_u64(1);
    for _ in 0..1000 {
        let mut r = report.clone();
        let delta: u8 = rng.random_range(1..=255);
        match rng.random_range(0..3) {
            0 => {
                let i = rng.random_range(0..r.measurement.len());
                r.measurement[i] ^= delta;
            }
            1 => {
                let i = rng.random_range(0..r.payload.len());
                r.payload[i] ^= delta;
            }
            _ => {
                let i = rng.random_range(0..r.signature.len());
                r.signature[i] ^= delta;
            }
        }
        assert!(!verify_attestation(&pk, &r, &m));
        // Also when the verifier is told to expect the tampered measurement.
        assert!(!verify_attestation(&pk, &r, &r.measurement));
    }
}

fn raw_strategy() -> impl Strategy<Value = RawUserId> {
    ("[a-z-]{1,8}", "[ -~]{0,16}").prop_map(|(i, u)| RawUserId::new(i, u))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn encode_fields_injective_random(
        a in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..6), 0..5),
        b in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..6), 0..5),
    ) {
        prop_assert_eq!(a == b, encode_fields(&a).unwrap() == encode_fields(&b).unwrap());
    }

    #[test]
    fn derivations_are_pure(k in any::<[u8; 32]>(), raw in raw_strategy(), cid in "[0-9a-f]{0,64}", s in any::<[u8; 32]>(), n in any::<[u8; 32]>()) {
        let k = key(k);
        let salt = Salt(s);
        prop_assert_eq!(derive_pre_uid(&k, &raw, &cid), derive_pre_uid(&k, &raw, &cid));
        prop_assert_eq!(derive_uid(&k, &raw, &cid, &salt), derive_uid(&k, &raw, &cid, &salt));
        prop_assert_eq!(derive_tag(&k, &raw), derive_tag(&k, &raw));
        let raws = [raw.clone(), RawUserId::new("idp-z", "z")];
        prop_assert_eq!(derive_multi_uid(&k, &raws, &cid, &salt), derive_multi_uid(&k, &raws, &cid, &salt));
        prop_assert_eq!(derive_client_id(&n, &cid), derive_client_id(&n, &cid));
    }

    #[test]
    fn prf_key_bit_flip_changes_output(k in any::<[u8; 32]>(), bit in 0usize..256, msg in prop::collection::vec(any::<u8>(), 0..64)) {
        let mut flipped = k;
        flipped[bit / 8] ^= 1 << (bit % 8);
        prop_assert_ne!(prf(&key(k), &msg), prf(&key(flipped), &msg));
    }

    #[test]
    fn idp_namespacing_separates_equal_uids(k in any::<[u8; 32]>(), uid in "[a-z0-9]{1,12}") {
        let k = key(k);
        let a = RawUserId::new("idp-a", uid.clone());
        let b = RawUserId::new("idp-b", uid);
        prop_assert_ne!(derive_tag(&k, &a), derive_tag(&k, &b));
        prop_assert_ne!(derive_pre_uid(&k, &a, "cid"), derive_pre_uid(&k, &b, "cid"));
    }

    #[test]
    fn seal_round_trip(pt in prop::collection::vec(any::<u8>(), 0..512), label in "[a-z_]{1,16}", signer_mode in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let mode = if signer_mode { SealMode::MrSigner } else { SealMode::MrEnclave };
        let platform = Arc::new(Platform::generate().unwrap());
        let e = Enclave::install(platform, b"prog", "signer", mode, dir.path()).unwrap();
        let blob = e.seal(&label, &pt).unwrap();
        prop_assert_eq!(e.unseal(&label, &blob).unwrap(), pt);
        let other_label = format!("{label}x");
        prop_assert!(e.unseal(&other_label, &blob).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn mrenclave_isolation(d1 in prop::collection::vec(any::<u8>(), 1..32), d2 in prop::collection::vec(any::<u8>(), 1..32)) {
        prop_assume!(d1 != d2);
        let dir = tempfile::tempdir().unwrap();
        let platform = Arc::new(Platform::generate().unwrap());
        let a = Enclave::install(platform.clone(), &d1, "signer", SealMode::MrEnclave, dir.path()).unwrap();
        let b = Enclave::install(platform, &d2, "signer", SealMode::MrEnclave, dir.path()).unwrap();
        let blob = a.seal("t", b"secret").unwrap();
        prop_assert!(b.unseal("t", &blob).is_err());
    }
}
