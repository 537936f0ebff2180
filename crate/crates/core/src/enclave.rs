//! Software stand-in for an attested-execution platform.
//!
//! A [`Platform`] plays the role of the TEE hardware: it owns the platform
//! signing key used for attestation and a master secret from which sealing
//! keys are derived. Programs are installed into it and receive an
//! [`EnclaveIdentity`] whose measurement is the SHA-256 of the program
//! descriptor.
//!
//! Sealing keys are `PRF(master, encode([mode, identity, label]))` where the
//! identity is the measurement (MRENCLAVE) or the signer id (MRSIGNER). The
//! AEAD is ChaCha20-Poly1305 with a random 96-bit nonce and the label as
//! associated data.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};

use crate::crypto::{self, encode_fields, gen_secret, prf, Digest32, PrfKey};

pub const NONCE_LEN: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum EnclaveError {
    #[error("unknown enclave id {0}")]
    UnknownEnclave(u64),
    #[error("program descriptor is empty")]
    EmptyDescriptor,
    #[error("sealed blob failed authentication")]
    SealTamper,
    #[error("malformed sealed blob: {0}")]
    MalformedBlob(&'static str),
    #[error("malformed platform secret file {0}")]
    MalformedPlatform(PathBuf),
    #[error(transparent)]
    Crypto(#[from] crypto::CryptoError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EnclaveError + '_ {
    move |source| EnclaveError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which identity a sealing key is bound to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SealMode {
    #[serde(rename = "mrenclave")]
    MrEnclave,
    #[serde(rename = "mrsigner")]
    MrSigner,
}

impl SealMode {
    pub fn to_byte(self) -> u8 {
        match self {
            SealMode::MrEnclave => 0x01,
            SealMode::MrSigner => 0x02,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x01 => Some(SealMode::MrEnclave),
            0x02 => Some(SealMode::MrSigner),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SealMode::MrEnclave => "mrenclave",
            SealMode::MrSigner => "mrsigner",
        }
    }
}

impl std::str::FromStr for SealMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mrenclave" => Ok(SealMode::MrEnclave),
            "mrsigner" => Ok(SealMode::MrSigner),
            other => Err(format!("unknown seal mode {other:?}")),
        }
    }
}

impl fmt::Display for SealMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EnclaveId(pub u64);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnclaveIdentity {
    pub measurement: Digest32,
    pub signer_id: Digest32,
    pub eid: EnclaveId,
}

/// Platform signature binding a measurement to a payload (the server key).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationReport {
    #[serde(with = "hex::serde")]
    pub measurement: Digest32,
    #[serde(with = "hex::serde")]
    pub payload: Vec<u8>,
    #[serde(with = "hex::serde")]
    pub signature: Vec<u8>,
}

impl AttestationReport {
    fn signed_message(measurement: &[u8], payload: &[u8]) -> Vec<u8> {
        encode_fields([measurement, payload]).expect("attestation fields fit a u32 length")
    }
}

/// True iff the signature verifies under `pk_tee` and the report carries the
/// expected measurement. Malformed input yields false.
pub fn verify_attestation(pk_tee: &[u8], report: &AttestationReport, expected_measurement: &[u8]) -> bool {
    let Ok(pk_bytes) = <[u8; 32]>::try_from(pk_tee) else {
        return false;
    };
    let Ok(pk) = VerifyingKey::from_bytes(&pk_bytes) else {
        return false;
    };
    let Ok(sig) = Signature::from_slice(&report.signature) else {
        return false;
    };
    if !crypto::ct_eq(&report.measurement, expected_measurement) {
        return false;
    }
    let msg = AttestationReport::signed_message(&report.measurement, &report.payload);
    pk.verify(&msg, &sig).is_ok()
}

/// Authenticated ciphertext bound to an enclave identity.
///
/// On disk: `mode (1 byte) ‖ nonce (12 bytes) ‖ ciphertext ‖ tag (16 bytes)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedBlob {
    pub mode: SealMode,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

impl SealedBlob {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + NONCE_LEN + self.ciphertext.len());
        out.push(self.mode.to_byte());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnclaveError> {
        // mode + nonce + poly1305 tag
        if bytes.len() < 1 + NONCE_LEN + 16 {
            return Err(EnclaveError::MalformedBlob("too short"));
        }
        let mode = SealMode::from_byte(bytes[0]).ok_or(EnclaveError::MalformedBlob("mode byte"))?;
        let nonce = bytes[1..1 + NONCE_LEN].try_into().expect("slice length checked");
        Ok(Self {
            mode,
            nonce,
            ciphertext: bytes[1 + NONCE_LEN..].to_vec(),
        })
    }
}

/// The simulated TEE platform: attestation key, sealing root, enclave registry.
pub struct Platform {
    tee_key: SigningKey,
    seal_root: PrfKey,
    enclaves: Mutex<HashMap<EnclaveId, EnclaveIdentity>>,
    next_eid: AtomicU64,
}

impl fmt::Debug for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Platform")
            .field("pk_tee", &hex::encode(self.tee_public_key()))
            .finish_non_exhaustive()
    }
}

impl Platform {
    pub fn generate() -> Result<Self, EnclaveError> {
        let seal = gen_secret()?;
        let sign = gen_secret()?;
        Ok(Self::from_secrets(seal, sign))
    }

    pub fn from_secrets(seal_root: [u8; 32], tee_seed: [u8; 32]) -> Self {
        Self {
            tee_key: SigningKey::from_bytes(&tee_seed),
            seal_root: PrfKey::from_bytes(seal_root),
            enclaves: Mutex::new(HashMap::new()),
            next_eid: AtomicU64::new(1),
        }
    }

    /// Loads the per-host secret file (64 bytes: sealing root then platform
    /// signing seed), creating it on first use.
    pub fn load_or_create(path: &Path) -> Result<Self, EnclaveError> {
        match fs::read(path) {
            Ok(bytes) => {
                if bytes.len() != 64 {
                    return Err(EnclaveError::MalformedPlatform(path.to_path_buf()));
                }
                let seal = bytes[..32].try_into().expect("length checked");
                let sign = bytes[32..].try_into().expect("length checked");
                Ok(Self::from_secrets(seal, sign))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let platform = Self::generate()?;
                let mut bytes = Vec::with_capacity(64);
                bytes.extend_from_slice(platform.seal_root.as_bytes());
                bytes.extend_from_slice(&platform.tee_key.to_bytes());
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(io_err(parent))?;
                }
                write_atomic(path, &bytes)?;
                Ok(platform)
            }
            Err(e) => Err(io_err(path)(e)),
        }
    }

    /// `getpk()`: the platform verification key.
    pub fn tee_public_key(&self) -> [u8; 32] {
        self.tee_key.verifying_key().to_bytes()
    }

    pub fn install(&self, program_descriptor: &[u8], signer_name: &str) -> Result<EnclaveIdentity, EnclaveError> {
        if program_descriptor.is_empty() {
            return Err(EnclaveError::EmptyDescriptor);
        }
        let identity = EnclaveIdentity {
            measurement: crypto::sha256(program_descriptor),
            signer_id: crypto::sha256(signer_name.as_bytes()),
            eid: EnclaveId(self.next_eid.fetch_add(1, Ordering::Relaxed)),
        };
        self.enclaves
            .lock()
            .expect("enclave registry poisoned")
            .insert(identity.eid, identity.clone());
        Ok(identity)
    }

    fn identity(&self, eid: EnclaveId) -> Result<EnclaveIdentity, EnclaveError> {
        self.enclaves
            .lock()
            .expect("enclave registry poisoned")
            .get(&eid)
            .cloned()
            .ok_or(EnclaveError::UnknownEnclave(eid.0))
    }

    pub fn attest(&self, eid: EnclaveId, payload: &[u8]) -> Result<AttestationReport, EnclaveError> {
        let identity = self.identity(eid)?;
        let msg = AttestationReport::signed_message(&identity.measurement, payload);
        Ok(AttestationReport {
            measurement: identity.measurement,
            payload: payload.to_vec(),
            signature: self.tee_key.sign(&msg).to_bytes().to_vec(),
        })
    }

    fn sealing_cipher(&self, identity: &EnclaveIdentity, label: &str, mode: SealMode) -> ChaCha20Poly1305 {
        let bound: &[u8] = match mode {
            SealMode::MrEnclave => &identity.measurement,
            SealMode::MrSigner => &identity.signer_id,
        };
        let input = encode_fields([mode.as_str().as_bytes(), bound, label.as_bytes()])
            .expect("sealing fields fit a u32 length");
        let key = prf(&self.seal_root, &input);
        ChaCha20Poly1305::new(Key::from_slice(&key))
    }

    pub fn seal(
        &self,
        eid: EnclaveId,
        label: &str,
        plaintext: &[u8],
        mode: SealMode,
    ) -> Result<SealedBlob, EnclaveError> {
        let identity = self.identity(eid)?;
        let cipher = self.sealing_cipher(&identity, label, mode);
        let mut nonce = [0u8; NONCE_LEN];
        nonce.copy_from_slice(&gen_secret()?[..NONCE_LEN]);
        let ciphertext = cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: plaintext,
                    aad: label.as_bytes(),
                },
            )
            .expect("ChaCha20-Poly1305 encryption is infallible for in-memory buffers");
        Ok(SealedBlob {
            mode,
            nonce,
            ciphertext,
        })
    }

    pub fn unseal(
        &self,
        eid: EnclaveId,
        label: &str,
        blob: &SealedBlob,
        mode: SealMode,
    ) -> Result<Vec<u8>, EnclaveError> {
        let identity = self.identity(eid)?;
        if blob.mode != mode {
            return Err(EnclaveError::SealTamper);
        }
        let cipher = self.sealing_cipher(&identity, label, mode);
        cipher
            .decrypt(
                Nonce::from_slice(&blob.nonce),
                Payload {
                    msg: &blob.ciphertext,
                    aad: label.as_bytes(),
                },
            )
            .map_err(|_| EnclaveError::SealTamper)
    }
}

/// An installed program bound to its platform, with a state directory for
/// `<label>.sealed` files.
#[derive(Clone)]
pub struct Enclave {
    platform: Arc<Platform>,
    identity: EnclaveIdentity,
    mode: SealMode,
    state_dir: PathBuf,
}

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave")
            .field("measurement", &hex::encode(self.identity.measurement))
            .field("mode", &self.mode)
            .field("state_dir", &self.state_dir)
            .finish()
    }
}

impl Enclave {
    pub fn install(
        platform: Arc<Platform>,
        program_descriptor: &[u8],
        signer_name: &str,
        mode: SealMode,
        state_dir: impl Into<PathBuf>,
    ) -> Result<Self, EnclaveError> {
        let identity = platform.install(program_descriptor, signer_name)?;
        Ok(Self {
            platform,
            identity,
            mode,
            state_dir: state_dir.into(),
        })
    }

    pub fn identity(&self) -> &EnclaveIdentity {
        &self.identity
    }

    pub fn measurement(&self) -> Digest32 {
        self.identity.measurement
    }

    pub fn mode(&self) -> SealMode {
        self.mode
    }

    pub fn platform(&self) -> &Arc<Platform> {
        &self.platform
    }

    pub fn attest(&self, payload: &[u8]) -> Result<AttestationReport, EnclaveError> {
        self.platform.attest(self.identity.eid, payload)
    }

    pub fn seal(&self, label: &str, plaintext: &[u8]) -> Result<SealedBlob, EnclaveError> {
        self.platform.seal(self.identity.eid, label, plaintext, self.mode)
    }

    pub fn unseal(&self, label: &str, blob: &SealedBlob) -> Result<Vec<u8>, EnclaveError> {
        self.platform.unseal(self.identity.eid, label, blob, self.mode)
    }

    pub fn sealed_path(&self, label: &str) -> PathBuf {
        self.state_dir.join(format!("{label}.sealed"))
    }

    /// Seals and atomically replaces `<label>.sealed`.
    pub fn seal_to_file(&self, label: &str, plaintext: &[u8]) -> Result<(), EnclaveError> {
        let blob = self.seal(label, plaintext)?;
        fs::create_dir_all(&self.state_dir).map_err(io_err(&self.state_dir))?;
        write_atomic(&self.sealed_path(label), &blob.to_bytes())
    }

    /// `Ok(None)` when the file does not exist yet.
    pub fn unseal_from_file(&self, label: &str) -> Result<Option<Vec<u8>>, EnclaveError> {
        let path = self.sealed_path(label);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let blob = SealedBlob::from_bytes(&bytes).map_err(|_| EnclaveError::SealTamper)?;
        self.unseal(label, &blob).map(Some)
    }
}

/// Write to a sibling temp file then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EnclaveError> {
    let tmp = path.with_extension(format!(
        "tmp.{}.{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[cfg(test)]
mod tests {
    use super::*;

    fn platform() -> Platform {
        Platform::from_secrets([7; 32], [9; 32])
    }

    #[test]
    fn measurement_golden() {
        let p = platform();
        let a = p.install(b"miso-mixer-v1", "miso-dev").unwrap();
        let b = p.install(b"miso-mixer-v1", "miso-dev").unwrap();
        // sha256 computed with Python hashlib
        assert_eq!(
            hex::encode(a.measurement),
            "1fa29cbaeae27a7566254a6427e9f36930efab9d9dee6f0a99fd171154dd9f90"
        );
        assert_eq!(
            hex::encode(a.signer_id),
            "840d7034fc1a98d558e495fa0db29cc1eec5ed2aa220a417b7b25cb52bf95842"
        );
        assert_eq!(a.measurement, b.measurement);
        assert_ne!(a.eid, b.eid);
        let c = p.install(b"miso-mixer-v2", "miso-dev").unwrap();
        assert_ne!(a.measurement, c.measurement);
        assert!(matches!(p.install(b"", "x"), Err(EnclaveError::EmptyDescriptor)));
    }

    #[test]
    fn attest_round_trip_and_rejections() {
        let p = platform();
        let id = p.install(b"prog", "signer").unwrap();
        let pk = p.tee_public_key();
        let report = p.attest(id.eid, b"server-key").unwrap();
        assert!(verify_attestation(&pk, &report, &id.measurement));
        assert!(!verify_attestation(&pk, &report, &[0; 32]));

        let mut flipped = report.clone();
        flipped.payload[0] ^= 1;
        assert!(!verify_attestation(&pk, &flipped, &id.measurement));

        let mut zeroed = report.clone();
        zeroed.signature = vec![0; 64];
        assert!(!verify_attestation(&pk, &zeroed, &id.measurement));

        let mut short = report;
        short.signature.truncate(10);
        assert!(!verify_attestation(&pk, &short, &id.measurement));
        assert!(!verify_attestation(&pk[..5], &short, &id.measurement));

        assert!(matches!(
            p.attest(EnclaveId(999), b"x"),
            Err(EnclaveError::UnknownEnclave(999))
        ));
    }

    #[test]
    fn seal_modes() {
        let p = platform();
        let a = p.install(b"prog-a", "signer").unwrap();
        let b = p.install(b"prog-b", "signer").unwrap();
        let a2 = p.install(b"prog-a", "signer").unwrap();

        let blob = p.seal(a.eid, "prf_key", b"secret", SealMode::MrEnclave).unwrap();
        assert_eq!(
            p.unseal(a2.eid, "prf_key", &blob, SealMode::MrEnclave).unwrap(),
            b"secret"
        );
        assert!(matches!(
            p.unseal(b.eid, "prf_key", &blob, SealMode::MrEnclave),
            Err(EnclaveError::SealTamper)
        ));
        assert!(matches!(
            p.unseal(a.eid, "other", &blob, SealMode::MrEnclave),
            Err(EnclaveError::SealTamper)
        ));
        assert!(matches!(
            p.unseal(a.eid, "prf_key", &blob, SealMode::MrSigner),
            Err(EnclaveError::SealTamper)
        ));

        let signer_blob = p.seal(a.eid, "x", b"shared", SealMode::MrSigner).unwrap();
        assert_eq!(
            p.unseal(b.eid, "x", &signer_blob, SealMode::MrSigner).unwrap(),
            b"shared"
        );

        let mut tampered = blob.clone();
        tampered.ciphertext[0] ^= 0x80;
        assert!(matches!(
            p.unseal(a.eid, "prf_key", &tampered, SealMode::MrEnclave),
            Err(EnclaveError::SealTamper)
        ));
    }

    #[test]
    fn blob_layout() {
        let blob = SealedBlob {
            mode: SealMode::MrSigner,
            nonce: [3; NONCE_LEN],
            ciphertext: vec![0xaa; 20],
        };
        let bytes = blob.to_bytes();
        assert_eq!(bytes[0], 0x02);
        assert_eq!(&bytes[1..13], &[3; 12]);
        assert_eq!(SealedBlob::from_bytes(&bytes).unwrap(), blob);
        assert!(SealedBlob::from_bytes(&bytes[..20]).is_err());
        let mut bad = bytes;
        bad[0] = 0x07;
        assert!(SealedBlob::from_bytes(&bad).is_err());
    }

    #[test]
    fn platform_file_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("platform.key");
        let a = Platform::load_or_create(&path).unwrap();
        let b = Platform::load_or_create(&path).unwrap();
        assert_eq!(a.tee_public_key(), b.tee_public_key());
        fs::write(&path, b"short").unwrap();
        assert!(matches!(
            Platform::load_or_create(&path),
            Err(EnclaveError::MalformedPlatform(_))
        ));
    }

    #[test]
    fn sealed_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = Arc::new(platform());
        let e = Enclave::install(p.clone(), b"prog", "s", SealMode::MrEnclave, dir.path()).unwrap();
        assert!(e.unseal_from_file("salts").unwrap().is_none());
        e.seal_to_file("salts", b"table").unwrap();
        assert_eq!(e.unseal_from_file("salts").unwrap().unwrap(), b"table");
        assert!(dir.path().join("salts.sealed").exists());

        let mut bytes = fs::read(e.sealed_path("salts")).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(e.sealed_path("salts"), bytes).unwrap();
        assert!(matches!(e.unseal_from_file("salts"), Err(EnclaveError::SealTamper)));
    }
}
