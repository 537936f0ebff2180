//! The mixer: an OAuth 2.0 authorization server toward relying parties and a
//! client toward identity providers, running inside a simulated enclave.
//!
//! Raw IdP user identifiers never leave this module. Relying parties see
//! only `uid_blinded`, a PRF image keyed by a sealed secret and salted per
//! user, and whatever attributes the user's disclosure policy allows.

mod flow;
pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::routing::{get, post};
use axum::Router;
use ed25519_dalek::SigningKey;
use serde::{Deserialize, Serialize};

use crate::backchannel::BackChannel;
use crate::clock::{self, SharedClock};
use crate::config::{ConfigError, KvConfig};
use crate::crypto::{self, Digest32, PrfKey};
use crate::enclave::{AttestationReport, Enclave, EnclaveError, Platform, SealMode};
use crate::grants::GrantStore;
use crate::oauth::RegistrationRequest;
use crate::server::{self, ServeError, ServiceHandle};
use crate::tap::{self, Tap};

pub use flow::{
    canonical_idp_list, default_threshold, LoginSession, MixerIdentity, Phase, PolicyResponse, SessionMode,
};
use store::{IdpCredential, IdpCredentials, PolicyTable, RpRegistry, SaltTable, SealedTable, StoreError, TagTable};

pub const DEFAULT_PROGRAM: &str = "miso-mixer-v1";
pub const DEFAULT_SIGNER: &str = "miso-dev";
pub const SESSION_COOKIE: &str = "mixer_sid";

#[derive(Debug, thiserror::Error)]
pub enum MixerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("TLS termination is not supported; set plaintext = true")]
    TlsUnsupported,
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("IdP {idp}: {message}")]
    IdpRegistration { idp: String, message: String },
    #[error(transparent)]
    Serve(#[from] ServeError),
}

/// Endpoints and (optional) static credentials for one upstream IdP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdpEndpoint {
    pub auth_url: String,
    pub token_url: String,
    pub res_url: String,
    pub register_url: Option<String>,
    pub client_id: Option<String>,
    pub client_secret: Option<String>,
}

/// Deliberate protocol breakage used by the harness negative controls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// Forward the RP's client id to the IdP in the authorization redirect.
    pub leak_rp_client_id: bool,
    /// Replace the PRF image with the raw uid bytes.
    pub identity_blinding: bool,
}

#[derive(Clone, Debug)]
pub struct MixerConfig {
    pub listen_addr: SocketAddr,
    pub public_url: String,
    pub state_dir: PathBuf,
    pub platform_key: PathBuf,
    pub seal_mode: SealMode,
    pub program: String,
    pub signer: String,
    pub name: String,
    pub allow_loopback_http: bool,
    pub default_idp: Option<String>,
    pub idps: BTreeMap<String, IdpEndpoint>,
    pub faults: Faults,
}

impl MixerConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self, MixerError> {
        let plaintext = kv.flag("plaintext")?;
        if !plaintext || kv.get("tls_cert").is_some() || kv.get("tls_key").is_some() {
            return Err(MixerError::TlsUnsupported);
        }
        let listen_addr: SocketAddr = kv
            .parsed("listen_addr")?
            .ok_or_else(|| ConfigError::Missing("listen_addr".into()))?;
        let state_dir = PathBuf::from(kv.require("state_dir")?);
        let mut idps: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for (rest, value) in kv.with_prefix("idp.") {
            let (id, field) = rest.rsplit_once('.').ok_or_else(|| ConfigError::Invalid {
                key: format!("idp.{rest}"),
                message: "expected idp.<id>.<field>".into(),
            })?;
            idps.entry(id.to_owned())
                .or_default()
                .insert(field.to_owned(), value.to_owned());
        }
        let idps = idps
            .into_iter()
            .map(|(id, mut f)| {
                let mut need = |k: &str| f.remove(k).ok_or_else(|| ConfigError::Missing(format!("idp.{id}.{k}")));
                let ep = IdpEndpoint {
                    auth_url: need("auth_url")?,
                    token_url: need("token_url")?,
                    res_url: need("res_url")?,
                    register_url: f.remove("register_url"),
                    client_id: f.remove("client_id"),
                    client_secret: f.remove("client_secret"),
                };
                if let Some(unknown) = f.keys().next() {
                    return Err(ConfigError::Invalid {
                        key: format!("idp.{id}.{unknown}"),
                        message: "unknown IdP field".into(),
                    });
                }
                Ok((id, ep))
            })
            .collect::<Result<BTreeMap<_, _>, ConfigError>>()?;
        let default_idp = kv.get("default_idp").map(str::to_owned);
        if let Some(d) = &default_idp {
            if !idps.contains_key(d) {
                return Err(ConfigError::Invalid {
                    key: "default_idp".into(),
                    message: format!("{d} is not a configured IdP"),
                }
                .into());
            }
        }
        Ok(Self {
            public_url: kv
                .get("public_url")
                .map(|s| s.trim_end_matches('/').to_owned())
                .unwrap_or_else(|| format!("http://{listen_addr}")),
            platform_key: kv
                .get("platform_key")
                .map(PathBuf::from)
                .unwrap_or_else(|| state_dir.join("platform.key")),
            seal_mode: kv.parsed("seal_mode")?.unwrap_or(SealMode::MrEnclave),
            program: kv.get("program").unwrap_or(DEFAULT_PROGRAM).to_owned(),
            signer: kv.get("signer").unwrap_or(DEFAULT_SIGNER).to_owned(),
            name: kv.get("name").unwrap_or("MISO mixer").to_owned(),
            allow_loopback_http: kv.parsed("allow_loopback_http")?.unwrap_or(true),
            faults: Faults {
                leak_rp_client_id: kv.flag("debug.leak_rp_client_id")?,
                identity_blinding: kv.flag("debug.identity_blinding")?,
            },
            listen_addr,
            state_dir,
            default_idp,
            idps,
        })
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("listen_addr", self.listen_addr)
            .set("public_url", &self.public_url)
            .set("state_dir", self.state_dir.display())
            .set("platform_key", self.platform_key.display())
            .set("seal_mode", self.seal_mode)
            .set("program", &self.program)
            .set("signer", &self.signer)
            .set("name", &self.name)
            .set("allow_loopback_http", self.allow_loopback_http)
            .set("plaintext", true);
        if let Some(d) = &self.default_idp {
            kv.set("default_idp", d);
        }
        if self.faults.leak_rp_client_id {
            kv.set("debug.leak_rp_client_id", true);
        }
        if self.faults.identity_blinding {
            kv.set("debug.identity_blinding", true);
        }
        for (id, ep) in &self.idps {
            kv.set(format!("idp.{id}.auth_url"), &ep.auth_url)
                .set(format!("idp.{id}.token_url"), &ep.token_url)
                .set(format!("idp.{id}.res_url"), &ep.res_url);
            if let Some(v) = &ep.register_url {
                kv.set(format!("idp.{id}.register_url"), v);
            }
            if let Some(v) = &ep.client_id {
                kv.set(format!("idp.{id}.client_id"), v);
            }
            if let Some(v) = &ep.client_secret {
                kv.set(format!("idp.{id}.client_secret"), v);
            }
        }
        kv
    }

    pub fn callback_url(&self) -> String {
        format!("{}/callback", self.public_url)
    }
}

/// Attestation document served at `GET /attestation`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationDocument {
    #[serde(with = "hex::serde")]
    pub pk_server: Vec<u8>,
    #[serde(with = "hex::serde")]
    pub measurement: Digest32,
    #[serde(with = "hex::serde")]
    pub signature: Vec<u8>,
}

impl AttestationDocument {
    pub fn report(&self) -> AttestationReport {
        AttestationReport {
            measurement: self.measurement,
            payload: self.pk_server.clone(),
            signature: self.signature.clone(),
        }
    }
}

/// What the RP can redeem: the blinded identifier plus disclosed attributes.
#[derive(Clone, Debug)]
pub(crate) struct RpGrant {
    uid_blinded: Digest32,
    attributes: BTreeMap<String, String>,
}

#[derive(Debug)]
pub(crate) struct ResolvedIdp {
    endpoint: IdpEndpoint,
    credential: IdpCredential,
}

#[derive(Debug, Default)]
pub(crate) struct Sessions {
    by_id: HashMap<String, LoginSession>,
    by_state: HashMap<String, String>,
}

#[derive(Debug)]
pub(crate) struct MixerState {
    config: MixerConfig,
    enclave: Enclave,
    prf_key: PrfKey,
    attestation: AttestationDocument,
    idps: BTreeMap<String, ResolvedIdp>,
    rps: SealedTable<RpRegistry>,
    salts: SealedTable<SaltTable>,
    tags: SealedTable<TagTable>,
    policies: SealedTable<PolicyTable>,
    sessions: Mutex<Sessions>,
    grants: GrantStore<RpGrant>,
    upstream: BackChannel,
    clock: SharedClock,
    tap: Option<Tap>,
}

#[derive(Default)]
pub struct MixerOptions {
    pub clock: Option<SharedClock>,
    pub tap: Option<Tap>,
    /// Shared platform for in-process stacks; otherwise loaded from
    /// `platform_key`.
    pub platform: Option<Arc<Platform>>,
}

/// A running-capable mixer instance.
#[derive(Clone, Debug)]
pub struct Mixer {
    state: Arc<MixerState>,
}

impl Mixer {
    /// Installs the enclave, unseals (or creates) long-term secrets, and
    /// makes sure the mixer holds client credentials at every IdP.
    pub async fn init(config: MixerConfig, opts: MixerOptions) -> Result<Self, MixerError> {
        let platform = match opts.platform {
            Some(p) => p,
            None => Arc::new(Platform::load_or_create(&config.platform_key)?),
        };
        let enclave = Enclave::install(
            platform,
            config.program.as_bytes(),
            &config.signer,
            config.seal_mode,
            &config.state_dir,
        )?;
        let prf_key = load_or_seal(&enclave, store::LABEL_PRF_KEY, || {
            Ok(PrfKey::generate()?.as_bytes().to_vec())
        })?;
        let prf_key = PrfKey::try_from_slice(&prf_key).map_err(|_| EnclaveError::SealTamper)?;
        let server_seed = load_or_seal(&enclave, store::LABEL_SERVER_KEY, || Ok(crypto::gen_secret()?.to_vec()))?;
        let server_seed: [u8; 32] = server_seed.try_into().map_err(|_| EnclaveError::SealTamper)?;
        let pk_server = SigningKey::from_bytes(&server_seed).verifying_key().to_bytes().to_vec();
        let report = enclave.attest(&pk_server)?;
        let attestation = AttestationDocument {
            pk_server,
            measurement: report.measurement,
            signature: report.signature,
        };

        let upstream = BackChannel::new(opts.tap.clone());
        let creds_table = SealedTable::<IdpCredentials>::open(&enclave, store::LABEL_IDP_CREDENTIALS)?;
        let mut idps = BTreeMap::new();
        for (id, ep) in &config.idps {
            let credential = match (&ep.client_id, &ep.client_secret) {
                (Some(client_id), Some(client_secret)) => IdpCredential {
                    client_id: client_id.clone(),
                    client_secret: client_secret.clone(),
                },
                _ => match creds_table.read(|t| t.get(id).cloned()) {
                    Some(c) => c,
                    None => {
                        let c = register_at_idp(&upstream, id, ep, &config).await?;
                        creds_table.update(|t| {
                            t.insert(id.clone(), c.clone());
                            Ok::<_, StoreError>(())
                        })?;
                        c
                    }
                },
            };
            idps.insert(
                id.clone(),
                ResolvedIdp {
                    endpoint: ep.clone(),
                    credential,
                },
            );
        }

        let clock = opts.clock.unwrap_or_else(clock::system);
        Ok(Self {
            state: Arc::new(MixerState {
                rps: SealedTable::open(&enclave, store::LABEL_RP_REGISTRY)?,
                salts: SealedTable::open(&enclave, store::LABEL_SALTS)?,
                tags: SealedTable::open(&enclave, store::LABEL_TAGS)?,
                policies: SealedTable::open(&enclave, store::LABEL_POLICIES)?,
                sessions: Mutex::default(),
                grants: GrantStore::new(clock.clone()),
                config,
                enclave,
                prf_key,
                attestation,
                idps,
                upstream,
                clock,
                tap: opts.tap,
            }),
        })
    }

    pub fn config(&self) -> &MixerConfig {
        &self.state.config
    }

    pub fn measurement(&self) -> Digest32 {
        self.state.enclave.measurement()
    }

    pub fn tee_public_key(&self) -> [u8; 32] {
        self.state.enclave.platform().tee_public_key()
    }

    pub fn attestation(&self) -> &AttestationDocument {
        &self.state.attestation
    }

    pub fn tap(&self) -> Option<&Tap> {
        self.state.tap.as_ref()
    }

    /// The mixer's client id at `idp`.
    pub fn idp_client_id(&self, idp: &str) -> Option<&str> {
        self.state.idps.get(idp).map(|r| r.credential.client_id.as_str())
    }

    pub fn idp_ids(&self) -> impl Iterator<Item = &str> {
        self.state.idps.keys().map(String::as_str)
    }

    pub fn registered_rps(&self) -> usize {
        self.state.rps.read(|r| r.len())
    }

    /// Debug rendering of every live login session.
    pub fn debug_sessions(&self) -> String {
        format!(
            "{:?}",
            self.state.sessions.lock().expect("session store poisoned").by_id
        )
    }

    /// Concatenated plaintext of every sealed file, for leak scans.
    pub fn debug_unsealed(&self) -> Result<Vec<u8>, EnclaveError> {
        let mut out = Vec::new();
        for label in store::ALL_LABELS {
            if let Some(bytes) = self.state.enclave.unseal_from_file(label)? {
                out.extend_from_slice(&bytes);
                out.push(b'\n');
            }
        }
        Ok(out)
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/register", post(flow::register))
            .route("/attestation", get(flow::attestation))
            .route("/auth_mixer", get(flow::auth))
            .route("/callback", get(flow::callback))
            .route("/token_mixer", post(flow::token))
            .route("/res_mixer", get(flow::resource))
            .route("/policy", post(flow::set_policy))
            .route("/healthz", get(server::healthz))
            .with_state(self.state.clone())
            .layer(axum::middleware::from_fn_with_state(
                self.state.tap.clone(),
                tap::capture,
            ))
    }

    pub async fn serve(&self, listener: tokio::net::TcpListener) -> ServiceHandle {
        ServiceHandle::spawn(listener, self.router())
    }
}

fn load_or_seal(
    enclave: &Enclave,
    label: &str,
    fresh: impl FnOnce() -> Result<Vec<u8>, crypto::CryptoError>,
) -> Result<Vec<u8>, MixerError> {
    if let Some(bytes) = enclave.unseal_from_file(label)? {
        return Ok(bytes);
    }
    let bytes = fresh().map_err(EnclaveError::from)?;
    enclave.seal_to_file(label, &bytes)?;
    Ok(bytes)
}

async fn register_at_idp(
    upstream: &BackChannel,
    id: &str,
    ep: &IdpEndpoint,
    config: &MixerConfig,
) -> Result<IdpCredential, MixerError> {
    let err = |message: String| MixerError::IdpRegistration {
        idp: id.to_owned(),
        message,
    };
    let url = ep
        .register_url
        .as_deref()
        .ok_or_else(|| err("no client credentials and no register_url configured".into()))?;
    let body = upstream
        .post_json(
            url,
            &RegistrationRequest {
                redirect_uri: config.callback_url(),
                client_name: Some(config.name.clone()),
            },
        )
        .await
        .map_err(|e| err(e.to_string()))?;
    serde_json::from_value(body).map_err(|e| err(format!("bad registration response: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv() -> KvConfig {
        KvConfig::parse(
            "listen_addr = 127.0.0.1:0\nstate_dir = /tmp/m\nplaintext = true\n\
             idp.idp-a.auth_url = http://a/auth_IdP\nidp.idp-a.token_url = http://a/token_IdP\n\
             idp.idp-a.res_url = http://a/res_IdP\nidp.idp-a.client_id = c\nidp.idp-a.client_secret = s\n",
        )
        .unwrap()
    }

    #[test]
    fn config_round_trip() {
        let c = MixerConfig::from_kv(&kv()).unwrap();
        assert_eq!(c.seal_mode, SealMode::MrEnclave);
        assert_eq!(c.idps["idp-a"].client_id.as_deref(), Some("c"));
        let again = MixerConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(again.idps, c.idps);
        assert_eq!(again.platform_key, c.platform_key);
    }

    #[test]
    fn tls_and_unknown_fields_rejected() {
        let mut k = kv();
        k.set("plaintext", false);
        assert!(matches!(MixerConfig::from_kv(&k), Err(MixerError::TlsUnsupported)));
        let mut k = kv();
        k.set("idp.idp-a.colour", "red");
        assert!(MixerConfig::from_kv(&k).is_err());
        let mut k = kv();
        k.set("default_idp", "idp-z");
        assert!(MixerConfig::from_kv(&k).is_err());
    }
}
