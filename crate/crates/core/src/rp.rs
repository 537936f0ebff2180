//! A demo relying party. In MISO mode it talks to the mixer, pinning the
//! mixer's attested key on first use; in baseline mode the same code talks
//! OAuth 2.0 straight to an IdP.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backchannel::BackChannel;
use crate::clock::{self, SharedClock};
use crate::config::{ConfigError, KvConfig};
use crate::crypto::{self, ct_eq};
use crate::enclave::{verify_attestation, write_atomic, EnclaveError};
use crate::mixer::AttestationDocument;
use crate::oauth::{
    cookie_value, found, with_query, CallbackQuery, ErrorCode, OAuthError, RegistrationRequest, RegistrationResponse,
    TokenResponse, SESSION_LIFETIME_SECS,
};
use crate::server::{self, ServeError, ServiceHandle};
use crate::tap::{self, Tap};

pub const SESSION_COOKIE: &str = "rp_sid";
const PINNED_FILE: &str = "pinned_mixer.json";
const CREDENTIALS_FILE: &str = "credentials.json";
const ACCOUNTS_FILE: &str = "accounts.json";

#[derive(Debug, thiserror::Error)]
pub enum RpError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("mixer attestation rejected: {0}")]
    AttestationFailed(String),
    #[error("pinned mixer {field} changed (pinned {pinned}, presented {presented}); re-pin required")]
    RepinRequired {
        field: &'static str,
        pinned: String,
        presented: String,
    },
    #[error("registration failed: {0}")]
    Registration(String),
    #[error("{path}: {message}")]
    State { path: PathBuf, message: String },
    #[error(transparent)]
    Serve(#[from] ServeError),
}

#[derive(Clone, Debug)]
pub struct RpConfig {
    pub rp_id: String,
    pub listen_addr: SocketAddr,
    pub public_url: String,
    pub state_dir: PathBuf,
    /// Mixer base URL in MISO mode, IdP base URL in baseline mode.
    pub provider_url: String,
    pub baseline_mode: bool,
    /// Account descriptor for baseline logins.
    pub baseline_idp: String,
    pub expected_measurement: Option<[u8; 32]>,
    pub tee_public_key: Option<[u8; 32]>,
    pub client_id: Option<String>,
    pub client_secret: Option<String>,
}

fn hex32(kv: &KvConfig, key: &str) -> Result<Option<[u8; 32]>, ConfigError> {
    kv.get(key)
        .map(|v| {
            let mut out = [0u8; 32];
            hex::decode_to_slice(v, &mut out).map_err(|e| ConfigError::Invalid {
                key: key.to_owned(),
                message: e.to_string(),
            })?;
            Ok(out)
        })
        .transpose()
}

impl RpConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let listen_addr: SocketAddr = kv
            .parsed("listen_addr")?
            .ok_or_else(|| ConfigError::Missing("listen_addr".into()))?;
        let baseline_mode = kv.flag("baseline_mode")?;
        let provider_url = if baseline_mode {
            kv.require("idp_url")?
        } else {
            kv.require("mixer_url")?
        };
        let expected_measurement = hex32(kv, "expected_measurement")?;
        let tee_public_key = hex32(kv, "tee_public_key")?;
        if !baseline_mode && (expected_measurement.is_none() || tee_public_key.is_none()) {
            return Err(ConfigError::Missing(
                "expected_measurement and tee_public_key (required unless baseline_mode)".into(),
            ));
        }
        Ok(Self {
            rp_id: kv.require("rp_id")?.to_owned(),
            public_url: kv
                .get("public_url")
                .map(|s| s.trim_end_matches('/').to_owned())
                .unwrap_or_else(|| format!("http://{listen_addr}")),
            state_dir: PathBuf::from(kv.require("state_dir")?),
            provider_url: provider_url.trim_end_matches('/').to_owned(),
            baseline_idp: kv.get("baseline_idp").unwrap_or("idp").to_owned(),
            client_id: kv.get("client_id").map(str::to_owned),
            client_secret: kv.get("client_secret").map(str::to_owned),
            listen_addr,
            baseline_mode,
            expected_measurement,
            tee_public_key,
        })
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("rp_id", &self.rp_id)
            .set("listen_addr", self.listen_addr)
            .set("public_url", &self.public_url)
            .set("state_dir", self.state_dir.display())
            .set("baseline_mode", self.baseline_mode)
            .set("baseline_idp", &self.baseline_idp)
            .set(
                if self.baseline_mode { "idp_url" } else { "mixer_url" },
                &self.provider_url,
            );
        if let Some(m) = &self.expected_measurement {
            kv.set("expected_measurement", hex::encode(m));
        }
        if let Some(k) = &self.tee_public_key {
            kv.set("tee_public_key", hex::encode(k));
        }
        if let Some(v) = &self.client_id {
            kv.set("client_id", v);
        }
        if let Some(v) = &self.client_secret {
            kv.set("client_secret", v);
        }
        kv
    }

    pub fn callback_url(&self) -> String {
        format!("{}/cb", self.public_url)
    }

    fn endpoint(&self, which: &str) -> String {
        let path = match (self.baseline_mode, which) {
            (true, "auth") => "/auth_IdP",
            (true, "token") => "/token_IdP",
            (true, "res") => "/res_IdP",
            (false, "auth") => "/auth_mixer",
            (false, "token") => "/token_mixer",
            (false, "res") => "/res_mixer",
            (_, "register") => "/register",
            _ => unreachable!("unknown endpoint {which}"),
        };
        format!("{}{path}", self.provider_url)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinnedMixer {
    #[serde(with = "hex::serde")]
    pub pk_server: Vec<u8>,
    #[serde(with = "hex::serde")]
    pub measurement: [u8; 32],
    pub pinned_at: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpCredentials {
    pub client_id: String,
    pub client_secret: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpAccount {
    pub local_account_id: u64,
    pub descriptor: String,
    pub sub: String,
    pub first_login: i64,
    pub last_login: i64,
}

/// Body of `GET /me`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeResponse {
    pub account_id: u64,
    pub descriptor: String,
    pub sub: String,
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug)]
struct PendingLogin {
    state: String,
    descriptor: String,
}

#[derive(Debug, Default)]
struct BrowserSession {
    pending: Option<PendingLogin>,
    me: Option<MeResponse>,
    created_at: i64,
}

#[derive(Debug, Default)]
struct Accounts {
    by_key: BTreeMap<String, RpAccount>,
    next_id: u64,
}

#[derive(Debug)]
struct RpState {
    config: RpConfig,
    credentials: RpCredentials,
    pinned: Option<PinnedMixer>,
    sessions: Mutex<HashMap<String, BrowserSession>>,
    accounts: Mutex<Accounts>,
    backchannel: BackChannel,
    clock: SharedClock,
    tap: Option<Tap>,
}

#[derive(Default)]
pub struct RpOptions {
    pub clock: Option<SharedClock>,
    pub tap: Option<Tap>,
}

#[derive(Clone, Debug)]
pub struct RpDemo {
    state: Arc<RpState>,
}

fn state_err(path: &Path, e: impl std::fmt::Display) -> RpError {
    RpError::State {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, RpError> {
    match std::fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| state_err(path, e)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(state_err(path, e)),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RpError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| state_err(dir, e))?;
    }
    let bytes = serde_json::to_vec_pretty(value).expect("state serializes");
    write_atomic(path, &bytes).map_err(|e: EnclaveError| state_err(path, e))
}

impl RpDemo {
    /// Verifies and pins the mixer (MISO mode), then registers once.
    pub async fn bootstrap(config: RpConfig, opts: RpOptions) -> Result<Self, RpError> {
        let backchannel = BackChannel::new(opts.tap.clone());
        let clock = opts.clock.unwrap_or_else(clock::system);
        let pinned = if config.baseline_mode {
            None
        } else {
            Some(pin_mixer(&config, &backchannel, clock.now()).await?)
        };

        let creds_path = config.state_dir.join(CREDENTIALS_FILE);
        let credentials = match (&config.client_id, &config.client_secret) {
            (Some(id), Some(secret)) => RpCredentials {
                client_id: id.clone(),
                client_secret: secret.clone(),
            },
            _ => match read_json::<RpCredentials>(&creds_path)? {
                Some(c) => c,
                None => {
                    let body = backchannel
                        .post_json(
                            &config.endpoint("register"),
                            &RegistrationRequest {
                                redirect_uri: config.callback_url(),
                                client_name: Some(config.rp_id.clone()),
                            },
                        )
                        .await
                        .map_err(|e| RpError::Registration(e.to_string()))?;
                    let reg: RegistrationResponse =
                        serde_json::from_value(body).map_err(|e| RpError::Registration(e.to_string()))?;
                    let c = RpCredentials {
                        client_id: reg.client_id,
                        client_secret: reg.client_secret,
                    };
                    write_json(&creds_path, &c)?;
                    c
                }
            },
        };

        let accounts_path = config.state_dir.join(ACCOUNTS_FILE);
        let stored: Vec<RpAccount> = read_json(&accounts_path)?.unwrap_or_default();
        let accounts = Accounts {
            next_id: stored.iter().map(|a| a.local_account_id + 1).max().unwrap_or(1),
            by_key: stored
                .into_iter()
                .map(|a| (account_key(&a.descriptor, &a.sub), a))
                .collect(),
        };

        Ok(Self {
            state: Arc::new(RpState {
                config,
                credentials,
                pinned,
                sessions: Mutex::default(),
                accounts: Mutex::new(accounts),
                backchannel,
                clock,
                tap: opts.tap,
            }),
        })
    }

    pub fn config(&self) -> &RpConfig {
        &self.state.config
    }

    pub fn client_id(&self) -> &str {
        &self.state.credentials.client_id
    }

    pub fn credentials(&self) -> &RpCredentials {
        &self.state.credentials
    }

    pub fn pinned(&self) -> Option<&PinnedMixer> {
        self.state.pinned.as_ref()
    }

    pub fn tap(&self) -> Option<&Tap> {
        self.state.tap.as_ref()
    }

    pub fn accounts(&self) -> Vec<RpAccount> {
        self.state
            .accounts
            .lock()
            .expect("account table poisoned")
            .by_key
            .values()
            .cloned()
            .collect()
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/login", get(login))
            .route("/cb", get(callback))
            .route("/me", get(me))
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

async fn pin_mixer(config: &RpConfig, backchannel: &BackChannel, now: i64) -> Result<PinnedMixer, RpError> {
    let fail = |m: String| RpError::AttestationFailed(m);
    let (Some(expected), Some(pk_tee)) = (config.expected_measurement, config.tee_public_key) else {
        return Err(fail("expected_measurement and tee_public_key are required".into()));
    };
    let body = backchannel
        .get_json(&format!("{}/attestation", config.provider_url))
        .await
        .map_err(|e| fail(e.to_string()))?;
    let doc: AttestationDocument = serde_json::from_value(body).map_err(|e| fail(e.to_string()))?;
    let report = doc.report();
    if !verify_attestation(&pk_tee, &report, &report.measurement) {
        return Err(fail("signature does not verify under the platform key".into()));
    }
    let path = config.state_dir.join(PINNED_FILE);
    if let Some(pin) = read_json::<PinnedMixer>(&path)? {
        if pin.measurement != doc.measurement {
            return Err(RpError::RepinRequired {
                field: "measurement",
                pinned: hex::encode(pin.measurement),
                presented: hex::encode(doc.measurement),
            });
        }
        if pin.pk_server != doc.pk_server {
            return Err(RpError::RepinRequired {
                field: "pk_server",
                pinned: hex::encode(&pin.pk_server),
                presented: hex::encode(&doc.pk_server),
            });
        }
        return Ok(pin);
    }
    if doc.measurement != expected {
        return Err(fail(format!(
            "measurement {} differs from expected {}",
            hex::encode(doc.measurement),
            hex::encode(expected)
        )));
    }
    let pin = PinnedMixer {
        pk_server: doc.pk_server,
        measurement: doc.measurement,
        pinned_at: now,
    };
    write_json(&path, &pin)?;
    Ok(pin)
}

fn account_key(descriptor: &str, sub: &str) -> String {
    format!("{descriptor}|{sub}")
}

#[derive(Debug, Deserialize)]
struct LoginQuery {
    idp_list: Option<String>,
    m: Option<String>,
}

fn server_error() -> OAuthError {
    OAuthError::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::ServerError)
}

async fn login(
    State(s): State<Arc<RpState>>,
    headers: HeaderMap,
    Query(q): Query<LoginQuery>,
) -> Result<Response, OAuthError> {
    let state_rp = crypto::gen_token().map_err(|_| server_error())?;
    let c = &s.config;
    let idp_list = q
        .idp_list
        .as_deref()
        .map(crate::mixer::canonical_idp_list)
        .unwrap_or_default();
    let m = q.m.as_deref().map(str::trim).filter(|m| !m.is_empty());
    let descriptor = if c.baseline_mode {
        c.baseline_idp.clone()
    } else if idp_list.len() > 1 || m.is_some() {
        "multi".to_owned()
    } else {
        idp_list.first().cloned().unwrap_or_else(|| "default".to_owned())
    };
    let callback = c.callback_url();
    let joined = idp_list.join(",");
    let mut pairs = vec![
        ("response_type", "code"),
        ("client_id", s.credentials.client_id.as_str()),
        ("redirect_uri", callback.as_str()),
        ("state", state_rp.as_str()),
    ];
    if !c.baseline_mode {
        if !idp_list.is_empty() {
            pairs.push(("idp_list", joined.as_str()));
        }
        if let Some(m) = m {
            pairs.push(("m", m));
        }
    }
    let location = with_query(&c.endpoint("auth"), pairs);

    let now = s.clock.now();
    let existing = cookie_value(&headers, SESSION_COOKIE).map(str::to_owned);
    let sid = {
        let mut sessions = s.sessions.lock().expect("session store poisoned");
        if sessions.len() % 256 == 255 {
            sessions.retain(|_, b| b.created_at + SESSION_LIFETIME_SECS > now);
        }
        let sid = match existing.filter(|sid| sessions.contains_key(sid)) {
            Some(sid) => sid,
            None => crypto::gen_token().map_err(|_| server_error())?,
        };
        let entry = sessions.entry(sid.clone()).or_default();
        entry.created_at = now;
        entry.pending = Some(PendingLogin {
            state: state_rp.clone(),
            descriptor,
        });
        sid
    };
    let mut resp = found(&location);
    let cookie = format!("{SESSION_COOKIE}={sid}; Path=/; HttpOnly; SameSite=Lax");
    resp.headers_mut().insert(
        header::SET_COOKIE,
        HeaderValue::from_str(&cookie).map_err(|_| server_error())?,
    );
    Ok(resp)
}

#[derive(Debug, Deserialize)]
struct ProviderIdentity {
    sub: Option<String>,
    uid: Option<String>,
    #[serde(default)]
    attributes: BTreeMap<String, String>,
}

async fn callback(
    State(s): State<Arc<RpState>>,
    headers: HeaderMap,
    Query(q): Query<CallbackQuery>,
) -> Result<Response, OAuthError> {
    let csrf = OAuthError::new(StatusCode::FORBIDDEN, ErrorCode::InvalidState);
    let sid = cookie_value(&headers, SESSION_COOKIE).ok_or(csrf)?.to_owned();
    let presented = q.state.as_deref().ok_or(csrf)?;
    let pending = {
        let mut sessions = s.sessions.lock().expect("session store poisoned");
        let b = sessions.get_mut(&sid).ok_or(csrf)?;
        match b.pending.take() {
            Some(p) if ct_eq(p.state.as_bytes(), presented.as_bytes()) => p,
            other => {
                b.pending = other;
                return Err(csrf);
            }
        }
    };
    if q.error.is_some() {
        return Err(OAuthError::unauthorized(ErrorCode::AccessDenied));
    }
    let code = q
        .code
        .as_deref()
        .ok_or(OAuthError::bad_request(ErrorCode::InvalidRequest))?;
    let c = &s.config;
    let callback = c.callback_url();
    let form = [
        ("grant_type", "authorization_code"),
        ("code", code),
        ("redirect_uri", callback.as_str()),
        ("client_id", s.credentials.client_id.as_str()),
        ("client_secret", s.credentials.client_secret.as_str()),
    ];
    let upstream = |e: crate::backchannel::BackChannelError| {
        tracing::warn!(rp = %c.rp_id, error = %e, "login exchange failed");
        OAuthError::new(StatusCode::BAD_GATEWAY, ErrorCode::UpstreamError)
    };
    let body = s
        .backchannel
        .post_form(&c.endpoint("token"), &form)
        .await
        .map_err(upstream)?;
    let token: TokenResponse =
        serde_json::from_value(body).map_err(|_| OAuthError::new(StatusCode::BAD_GATEWAY, ErrorCode::UpstreamError))?;
    let body = s
        .backchannel
        .get_bearer(&c.endpoint("res"), &token.access_token)
        .await
        .map_err(upstream)?;
    let identity: ProviderIdentity =
        serde_json::from_value(body).map_err(|_| OAuthError::new(StatusCode::BAD_GATEWAY, ErrorCode::UpstreamError))?;
    let sub = identity
        .sub
        .or(identity.uid)
        .filter(|s| !s.is_empty())
        .ok_or(OAuthError::new(StatusCode::BAD_GATEWAY, ErrorCode::UpstreamError))?;

    let now = s.clock.now();
    let account_id = {
        let mut accounts = s.accounts.lock().expect("account table poisoned");
        let key = account_key(&pending.descriptor, &sub);
        if let Some(a) = accounts.by_key.get_mut(&key) {
            a.last_login = now;
            a.local_account_id
        } else {
            let id = accounts.next_id;
            accounts.next_id += 1;
            accounts.by_key.insert(
                key,
                RpAccount {
                    local_account_id: id,
                    descriptor: pending.descriptor.clone(),
                    sub: sub.clone(),
                    first_login: now,
                    last_login: now,
                },
            );
            let all: Vec<_> = accounts.by_key.values().cloned().collect();
            if let Err(e) = write_json(&c.state_dir.join(ACCOUNTS_FILE), &all) {
                tracing::error!(error = %e, "persisting accounts failed");
                return Err(server_error());
            }
            id
        }
    };
    if let Some(b) = s.sessions.lock().expect("session store poisoned").get_mut(&sid) {
        b.me = Some(MeResponse {
            account_id,
            descriptor: pending.descriptor,
            sub,
            attributes: identity.attributes,
        });
    }
    Ok(found("/me"))
}

async fn me(State(s): State<Arc<RpState>>, headers: HeaderMap) -> Response {
    let me = cookie_value(&headers, SESSION_COOKIE).and_then(|sid| {
        let sessions = s.sessions.lock().expect("session store poisoned");
        sessions.get(sid).and_then(|b| b.me.clone())
    });
    match me {
        Some(me) => Json(me).into_response(),
        None => OAuthError::unauthorized(ErrorCode::LoginRequired).into_response(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let kv = KvConfig::parse(
            "rp_id = rp-0\nlisten_addr = 127.0.0.1:0\nstate_dir = /tmp/rp\nmixer_url = http://127.0.0.1:1/\n\
             expected_measurement = 1fa29cbaeae27a7566254a6427e9f36930efab9d9dee6f0a99fd171154dd9f90\n\
             tee_public_key = 0000000000000000000000000000000000000000000000000000000000000000\n",
        )
        .unwrap();
        let c = RpConfig::from_kv(&kv).unwrap();
        assert_eq!(c.endpoint("auth"), "http://127.0.0.1:1/auth_mixer");
        let again = RpConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(again.expected_measurement, c.expected_measurement);
        assert_eq!(again.provider_url, c.provider_url);
    }

    #[test]
    fn miso_mode_requires_trust_anchors() {
        let kv = KvConfig::parse("rp_id = r\nlisten_addr = 127.0.0.1:0\nstate_dir = /tmp/rp\nmixer_url = http://x\n")
            .unwrap();
        assert!(RpConfig::from_kv(&kv).is_err());
        let kv = KvConfig::parse(
            "rp_id = r\nlisten_addr = 127.0.0.1:0\nstate_dir = /tmp/rp\nbaseline_mode = true\nidp_url = http://x\n",
        )
        .unwrap();
        let c = RpConfig::from_kv(&kv).unwrap();
        assert_eq!(c.endpoint("token"), "http://x/token_IdP");
    }
}
