//! Sealed persistent tables. Every mutation rewrites `<label>.sealed`
//! atomically while the table lock is held, so the file always matches
//! memory.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::crypto::{Digest32, Salt};
use crate::enclave::{Enclave, EnclaveError};

pub const LABEL_PRF_KEY: &str = "prf_key";
pub const LABEL_SERVER_KEY: &str = "server_key";
pub const LABEL_RP_REGISTRY: &str = "rp_registry";
pub const LABEL_IDP_CREDENTIALS: &str = "idp_credentials";
pub const LABEL_SALTS: &str = "salt_table";
pub const LABEL_TAGS: &str = "tag_table";
pub const LABEL_POLICIES: &str = "policies";

pub const ALL_LABELS: [&str; 7] = [
    LABEL_PRF_KEY,
    LABEL_SERVER_KEY,
    LABEL_RP_REGISTRY,
    LABEL_IDP_CREDENTIALS,
    LABEL_SALTS,
    LABEL_TAGS,
    LABEL_POLICIES,
];

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error("sealed table {label} holds malformed data: {message}")]
    Decode { label: &'static str, message: String },
    #[error(transparent)]
    Crypto(#[from] crate::crypto::CryptoError),
}

/// A value of type `T` mirrored into a sealed file.
#[derive(Debug)]
pub struct SealedTable<T> {
    label: &'static str,
    enclave: Enclave,
    value: Mutex<T>,
}

impl<T: Serialize + DeserializeOwned + Default> SealedTable<T> {
    pub fn open(enclave: &Enclave, label: &'static str) -> Result<Self, StoreError> {
        let value = match enclave.unseal_from_file(label)? {
            Some(bytes) => serde_json::from_slice(&bytes).map_err(|e| StoreError::Decode {
                label,
                message: e.to_string(),
            })?,
            None => T::default(),
        };
        Ok(Self {
            label,
            enclave: enclave.clone(),
            value: Mutex::new(value),
        })
    }

    pub fn read<R>(&self, f: impl FnOnce(&T) -> R) -> R {
        f(&self.value.lock().expect("sealed table poisoned"))
    }

    /// Applies `f` to a copy and commits it only if `f` succeeds and the
    /// sealed write succeeds.
    pub fn update<R, E>(&self, f: impl FnOnce(&mut T) -> Result<R, E>) -> Result<R, E>
    where
        T: Clone,
        E: From<StoreError>,
    {
        let mut guard = self.value.lock().expect("sealed table poisoned");
        let mut next = guard.clone();
        let out = f(&mut next)?;
        let bytes = serde_json::to_vec(&next).expect("table serializes");
        self.enclave
            .seal_to_file(self.label, &bytes)
            .map_err(|e| E::from(StoreError::from(e)))?;
        *guard = next;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpRegistration {
    pub client_secret: String,
    pub redirect_uri: String,
    #[serde(default)]
    pub client_name: String,
}

pub type RpRegistry = BTreeMap<String, RpRegistration>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdpCredential {
    pub client_id: String,
    pub client_secret: String,
}

pub type IdpCredentials = BTreeMap<String, IdpCredential>;

/// pre_uid → salt.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SaltTable(#[serde(with = "hex_map")] pub BTreeMap<Digest32, Digest32>);

impl SealedTable<SaltTable> {
    /// Returns the salt for `pre_uid`, creating it on first use. Concurrent
    /// callers for the same key all observe the first writer's salt.
    pub fn get_or_create(&self, pre_uid: &Digest32) -> Result<Salt, StoreError> {
        if let Some(s) = self.read(|t| t.0.get(pre_uid).copied()) {
            return Ok(Salt(s));
        }
        self.update(|t| {
            if let Some(s) = t.0.get(pre_uid) {
                return Ok(Salt(*s));
            }
            let salt = Salt::generate()?;
            t.0.insert(*pre_uid, salt.0);
            Ok::<_, StoreError>(salt)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagRecord {
    #[serde(with = "hex_set")]
    pub tags: BTreeSet<Digest32>,
    pub n: usize,
    pub m: usize,
    pub cid_rp: String,
    #[serde(with = "hex::serde")]
    pub uid_blinded: Digest32,
}

impl TagRecord {
    pub fn overlap(&self, presented: &BTreeSet<Digest32>) -> usize {
        self.tags.intersection(presented).count()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TagTable(pub Vec<TagRecord>);

/// Outcome of matching presented tags against the records of one RP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TagMatch {
    Matched(Digest32),
    Ambiguous,
    BelowThreshold,
    Unknown,
}

impl TagTable {
    pub fn lookup(&self, cid_rp: &str, presented: &BTreeSet<Digest32>) -> TagMatch {
        let mut matched = None;
        let mut partial = false;
        for r in self.0.iter().filter(|r| r.cid_rp == cid_rp) {
            let k = r.overlap(presented);
            if k >= r.m {
                if matched.is_some() {
                    return TagMatch::Ambiguous;
                }
                matched = Some(r.uid_blinded);
            } else if k > 0 {
                partial = true;
            }
        }
        match (matched, partial) {
            (Some(uid), _) => TagMatch::Matched(uid),
            (None, true) => TagMatch::BelowThreshold,
            (None, false) => TagMatch::Unknown,
        }
    }
}

/// Policy key (hex) + cid_rp → allowed attribute names.
pub type PolicyTable = BTreeMap<String, BTreeSet<String>>;

pub fn policy_key(account: &Digest32, cid_rp: &str) -> String {
    format!("{}:{cid_rp}", hex::encode(account))
}

mod hex_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::crypto::Digest32;

    pub fn serialize<S: Serializer>(m: &BTreeMap<Digest32, Digest32>, s: S) -> Result<S::Ok, S::Error> {
        m.iter()
            .map(|(k, v)| (hex::encode(k), hex::encode(v)))
            .collect::<BTreeMap<_, _>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Digest32, Digest32>, D::Error> {
        let raw = BTreeMap::<String, String>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| Ok((super::parse_digest(&k)?, super::parse_digest(&v)?)))
            .collect()
    }
}

mod hex_set {
    use std::collections::BTreeSet;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::crypto::Digest32;

    pub fn serialize<S: Serializer>(set: &BTreeSet<Digest32>, s: S) -> Result<S::Ok, S::Error> {
        set.iter().map(hex::encode).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeSet<Digest32>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| super::parse_digest(s))
            .collect()
    }
}

fn parse_digest<E: serde::de::Error>(s: &str) -> Result<Digest32, E> {
    let mut out = [0u8; 32];
    hex::decode_to_slice(s, &mut out).map_err(E::custom)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::enclave::{Platform, SealMode};

    fn enclave(dir: &std::path::Path) -> Enclave {
        let p = Arc::new(Platform::from_secrets([7; 32], [9; 32]));
        Enclave::install(p, b"miso-mixer-v1", "miso-dev", SealMode::MrEnclave, dir).unwrap()
    }

    #[test]
    fn salts_persist_and_are_insert_once() {
        let dir = tempfile::tempdir().unwrap();
        let e = enclave(dir.path());
        let t = SealedTable::<SaltTable>::open(&e, LABEL_SALTS).unwrap();
        let a = t.get_or_create(&[1; 32]).unwrap();
        assert_eq!(t.get_or_create(&[1; 32]).unwrap().0, a.0);
        assert_ne!(t.get_or_create(&[2; 32]).unwrap().0, a.0);
        let reopened = SealedTable::<SaltTable>::open(&e, LABEL_SALTS).unwrap();
        assert_eq!(reopened.get_or_create(&[1; 32]).unwrap().0, a.0);
    }

    #[test]
    fn concurrent_first_writer_wins() {
        let dir = tempfile::tempdir().unwrap();
        let t = Arc::new(SealedTable::<SaltTable>::open(&enclave(dir.path()), LABEL_SALTS).unwrap());
        let salts: Vec<_> = (0..8)
            .map(|_| {
                let t = t.clone();
                std::thread::spawn(move || t.get_or_create(&[3; 32]).unwrap().0)
            })
            .map(|h| h.join().unwrap())
            .collect();
        assert!(salts.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn tag_lookup() {
        let rec = |tags: &[u8], uid: u8| TagRecord {
            tags: tags.iter().map(|t| [*t; 32]).collect(),
            n: tags.len(),
            m: 2,
            cid_rp: "rp".into(),
            uid_blinded: [uid; 32],
        };
        let set = |tags: &[u8]| tags.iter().map(|t| [*t; 32]).collect::<BTreeSet<_>>();
        let mut table = TagTable(vec![rec(&[1, 2, 3], 10)]);
        assert_eq!(table.lookup("rp", &set(&[1, 3])), TagMatch::Matched([10; 32]));
        assert_eq!(table.lookup("rp", &set(&[3])), TagMatch::BelowThreshold);
        assert_eq!(table.lookup("rp", &set(&[4, 5])), TagMatch::Unknown);
        assert_eq!(table.lookup("other", &set(&[1, 2])), TagMatch::Unknown);
        table.0.push(rec(&[1, 2, 6], 11));
        assert_eq!(table.lookup("rp", &set(&[1, 2])), TagMatch::Ambiguous);
    }

    #[test]
    fn failed_update_leaves_table_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let t = SealedTable::<PolicyTable>::open(&enclave(dir.path()), LABEL_POLICIES).unwrap();
        let r: Result<(), StoreError> = t.update(|p| {
            p.insert("k".into(), BTreeSet::new());
            Err(StoreError::Decode {
                label: "x",
                message: "boom".into(),
            })
        });
        assert!(r.is_err());
        assert!(t.read(|p| p.is_empty()));
    }
}
