//! A plain OAuth 2.0 authorization-code identity provider.
//!
//! Users and pre-registered clients come from a TOML fixtures file; clients
//! registered at runtime through `POST /register` are kept in
//! `<state_dir>/clients.json` so they survive restarts.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Form, Json, Router};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::clock::{self, SharedClock};
use crate::config::{ConfigError, KvConfig};
use crate::crypto::{self, b64url};
use crate::enclave::write_atomic;
use crate::grants::{check_secret, GrantStore};
use crate::oauth::{
    bearer_token, found, with_query, AuthorizationRequest, ErrorCode, OAuthError, RegistrationRequest,
    RegistrationResponse, TokenRequest, TokenResponse,
};
use crate::server::{self, ServeError, ServiceHandle};
use crate::tap::{self, Tap};

pub const DEFAULT_PBKDF2_ITERATIONS: u32 = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum IdpError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot read fixtures {path}: {source}")]
    FixturesRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad fixtures file {path}: {source}")]
    FixturesParse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("duplicate {what} {value:?} in fixtures")]
    Duplicate { what: &'static str, value: String },
    #[error("client store {path}: {message}")]
    ClientStore { path: PathBuf, message: String },
    #[error(transparent)]
    Crypto(#[from] crypto::CryptoError),
    #[error(transparent)]
    Serve(#[from] ServeError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureUser {
    pub username: String,
    pub password: String,
    pub uid: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdpClient {
    pub client_id: String,
    pub client_secret: String,
    pub redirect_uri: String,
    #[serde(default)]
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fixtures {
    #[serde(default)]
    pub pbkdf2_iterations: Option<u32>,
    #[serde(default)]
    pub users: Vec<FixtureUser>,
    #[serde(default)]
    pub clients: Vec<IdpClient>,
}

impl Fixtures {
    pub fn load(path: &Path) -> Result<Self, IdpError> {
        let text = std::fs::read_to_string(path).map_err(|source| IdpError::FixturesRead {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| IdpError::FixturesParse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("fixtures serialize to TOML")
    }
}

/// Salted PBKDF2-HMAC-SHA256 password record.
#[derive(Clone)]
struct PasswordHash {
    iterations: u32,
    salt: [u8; 16],
    hash: [u8; 32],
}

impl PasswordHash {
    fn new(password: &str, iterations: u32) -> Result<Self, crypto::CryptoError> {
        let mut salt = [0u8; 16];
        salt.copy_from_slice(&crypto::gen_secret()?[..16]);
        let mut hash = [0u8; 32];
        pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), &salt, iterations, &mut hash);
        Ok(Self { iterations, salt, hash })
    }

    fn verify(&self, password: &str) -> bool {
        let mut hash = [0u8; 32];
        pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), &self.salt, self.iterations, &mut hash);
        crypto::ct_eq(&hash, &self.hash)
    }
}

impl std::fmt::Debug for PasswordHash {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "pbkdf2-sha256${}$<redacted>", self.iterations)
    }
}

#[derive(Clone, Debug)]
pub struct IdpUser {
    pub uid: String,
    pub username: String,
    password: PasswordHash,
    pub attributes: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct IdpConfig {
    pub idp_id: String,
    pub display_name: String,
    pub listen_addr: SocketAddr,
    pub public_url: String,
    pub state_dir: Option<PathBuf>,
    pub fixtures: PathBuf,
    pub auto_consent: bool,
}

impl IdpConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let idp_id = kv.require("idp_id")?.to_owned();
        let listen_addr: SocketAddr = kv
            .parsed("listen_addr")?
            .ok_or_else(|| ConfigError::Missing("listen_addr".into()))?;
        Ok(Self {
            display_name: kv.get("display_name").unwrap_or(&idp_id).to_owned(),
            public_url: kv
                .get("public_url")
                .map(|s| s.trim_end_matches('/').to_owned())
                .unwrap_or_else(|| format!("http://{listen_addr}")),
            state_dir: kv.get("state_dir").map(PathBuf::from),
            fixtures: PathBuf::from(kv.require("fixtures")?),
            auto_consent: kv.flag("auto_consent")?,
            idp_id,
            listen_addr,
        })
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("idp_id", &self.idp_id)
            .set("display_name", &self.display_name)
            .set("listen_addr", self.listen_addr)
            .set("public_url", &self.public_url)
            .set("fixtures", self.fixtures.display())
            .set("auto_consent", self.auto_consent);
        if let Some(dir) = &self.state_dir {
            kv.set("state_dir", dir.display());
        }
        kv
    }
}

#[derive(Debug)]
struct IdpState {
    idp_id: String,
    display_name: String,
    auto_consent: bool,
    users: HashMap<String, IdpUser>,
    by_uid: HashMap<String, String>,
    clients: RwLock<HashMap<String, IdpClient>>,
    clients_path: Option<PathBuf>,
    grants: GrantStore<String>,
    tap: Option<Tap>,
}

/// A mock identity provider instance.
#[derive(Clone, Debug)]
pub struct IdpMock {
    state: Arc<IdpState>,
}

#[derive(Default)]
pub struct IdpOptions {
    pub clock: Option<SharedClock>,
    pub tap: Option<Tap>,
}

impl IdpMock {
    pub fn new(config: &IdpConfig, fixtures: Fixtures, opts: IdpOptions) -> Result<Self, IdpError> {
        let iterations = fixtures.pbkdf2_iterations.unwrap_or(DEFAULT_PBKDF2_ITERATIONS).max(1);
        let mut users = HashMap::new();
        let mut by_uid = HashMap::new();
        for u in fixtures.users {
            if u.uid.is_empty() {
                return Err(IdpError::Duplicate {
                    what: "empty uid for user",
                    value: u.username,
                });
            }
            if by_uid.insert(u.uid.clone(), u.username.clone()).is_some() {
                return Err(IdpError::Duplicate {
                    what: "uid",
                    value: u.uid,
                });
            }
            let user = IdpUser {
                password: PasswordHash::new(&u.password, iterations)?,
                uid: u.uid,
                username: u.username.clone(),
                attributes: u.attributes,
            };
            if users.insert(u.username.clone(), user).is_some() {
                return Err(IdpError::Duplicate {
                    what: "username",
                    value: u.username,
                });
            }
        }
        let mut clients: HashMap<_, _> = fixtures.clients.into_iter().map(|c| (c.client_id.clone(), c)).collect();
        let clients_path = config.state_dir.as_ref().map(|d| d.join("clients.json"));
        if let Some(path) = &clients_path {
            match std::fs::read(path) {
                Ok(bytes) => {
                    let stored: Vec<IdpClient> = serde_json::from_slice(&bytes).map_err(|e| IdpError::ClientStore {
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
                    clients.extend(stored.into_iter().map(|c| (c.client_id.clone(), c)));
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => {
                    return Err(IdpError::ClientStore {
                        path: path.clone(),
                        message: e.to_string(),
                    })
                }
            }
        }
        Ok(Self {
            state: Arc::new(IdpState {
                idp_id: config.idp_id.clone(),
                display_name: config.display_name.clone(),
                auto_consent: config.auto_consent,
                users,
                by_uid,
                clients: RwLock::new(clients),
                clients_path,
                grants: GrantStore::new(opts.clock.unwrap_or_else(clock::system)),
                tap: opts.tap,
            }),
        })
    }

    pub fn from_config(config: &IdpConfig, opts: IdpOptions) -> Result<Self, IdpError> {
        let fixtures = Fixtures::load(&config.fixtures)?;
        Self::new(config, fixtures, opts)
    }

    pub fn idp_id(&self) -> &str {
        &self.state.idp_id
    }

    pub fn tap(&self) -> Option<&Tap> {
        self.state.tap.as_ref()
    }

    pub fn user(&self, username: &str) -> Option<&IdpUser> {
        self.state.users.get(username)
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/auth_IdP", get(auth_page).post(auth_submit))
            .route("/token_IdP", post(token))
            .route("/res_IdP", get(resource))
            .route("/register", post(register))
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

impl IdpState {
    fn client_for(&self, req: &AuthorizationRequest) -> Result<IdpClient, OAuthError> {
        let client_id = req
            .client_id
            .as_deref()
            .ok_or(OAuthError::bad_request(ErrorCode::InvalidRequest))?;
        let client = self
            .clients
            .read()
            .expect("client registry poisoned")
            .get(client_id)
            .cloned()
            .ok_or(OAuthError::unauthorized(ErrorCode::InvalidClient))?;
        if req.redirect_uri.as_deref() != Some(client.redirect_uri.as_str()) {
            return Err(OAuthError::bad_request(ErrorCode::InvalidRedirectUri));
        }
        if req.response_type.as_deref() != Some("code") {
            return Err(OAuthError::bad_request(ErrorCode::UnsupportedResponseType));
        }
        Ok(client)
    }

    fn persist_clients(&self, clients: &HashMap<String, IdpClient>) -> Result<(), String> {
        let Some(path) = &self.clients_path else {
            return Ok(());
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
        let mut list: Vec<_> = clients.values().cloned().collect();
        list.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        let bytes = serde_json::to_vec_pretty(&list).map_err(|e| e.to_string())?;
        write_atomic(path, &bytes).map_err(|e| e.to_string())
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

async fn auth_page(State(s): State<Arc<IdpState>>, Query(req): Query<AuthorizationRequest>) -> Response {
    let client = match s.client_for(&req) {
        Ok(c) => c,
        Err(e) => return e.into_response(),
    };
    let hidden = [
        ("response_type", req.response_type.as_deref().unwrap_or_default()),
        ("client_id", client.client_id.as_str()),
        ("redirect_uri", client.redirect_uri.as_str()),
        ("state", req.state.as_deref().unwrap_or_default()),
    ]
    .iter()
    .map(|(k, v)| format!(r#"<input type="hidden" name="{k}" value="{}">"#, escape(v)))
    .collect::<String>();
    let requester = if client.name.is_empty() {
        &client.client_id
    } else {
        &client.name
    };
    Html(format!(
        r#"<!doctype html>
<html><head><title>Sign in to {idp}</title></head>
<body>
<h1>{idp}</h1>
<p class="requester"><strong>{requester}</strong> requests access to your identifier.</p>
<form method="post" action="/auth_IdP">
{hidden}
<label>Username <input name="username" autocomplete="username"></label>
<label>Password <input name="password" type="password" autocomplete="current-password"></label>
<button name="consent" value="grant">Allow</button>
<button name="consent" value="deny">Deny</button>
</form>
</body></html>
"#,
        idp = escape(&s.display_name),
        requester = escape(requester),
    ))
    .into_response()
}

#[derive(Debug, Deserialize)]
struct AuthSubmit {
    #[serde(flatten)]
    request: AuthorizationRequest,
    username: Option<String>,
    password: Option<String>,
    consent: Option<String>,
}

async fn auth_submit(State(s): State<Arc<IdpState>>, Form(form): Form<AuthSubmit>) -> Response {
    let client = match s.client_for(&form.request) {
        Ok(c) => c,
        Err(e) => return e.into_response(),
    };
    let state = form.request.state.as_deref().unwrap_or_default();
    let granted = match form.consent.as_deref() {
        Some("deny") => false,
        Some("grant") => true,
        None if s.auto_consent => true,
        _ => return OAuthError::bad_request(ErrorCode::InvalidRequest).into_response(),
    };
    if !granted {
        let mut pairs = vec![("error", "access_denied")];
        if !state.is_empty() {
            pairs.push(("state", state));
        }
        return found(&with_query(&client.redirect_uri, pairs));
    }
    let user = form
        .username
        .as_deref()
        .and_then(|u| s.users.get(u))
        .filter(|u| u.password.verify(form.password.as_deref().unwrap_or_default()));
    let Some(user) = user else {
        return OAuthError::unauthorized(ErrorCode::InvalidCredentials).into_response();
    };
    match s
        .grants
        .issue_code(&client.client_id, &client.redirect_uri, user.uid.clone())
    {
        Ok(code) => {
            let mut pairs = vec![("code", code.as_str())];
            if !state.is_empty() {
                pairs.push(("state", state));
            }
            found(&with_query(&client.redirect_uri, pairs))
        }
        Err(e) => e.into_response(),
    }
}

async fn token(State(s): State<Arc<IdpState>>, Form(req): Form<TokenRequest>) -> Response {
    let result = (|| {
        if req.grant_type.as_deref() != Some("authorization_code") {
            return Err(OAuthError::bad_request(ErrorCode::UnsupportedGrantType));
        }
        let client_id = req
            .client_id
            .as_deref()
            .ok_or(OAuthError::unauthorized(ErrorCode::InvalidClient))?;
        let client = s
            .clients
            .read()
            .expect("client registry poisoned")
            .get(client_id)
            .cloned()
            .ok_or(OAuthError::unauthorized(ErrorCode::InvalidClient))?;
        check_secret(&client.client_secret, req.client_secret.as_deref())?;
        let code = req
            .code
            .as_deref()
            .ok_or(OAuthError::bad_request(ErrorCode::InvalidRequest))?;
        let token = s
            .grants
            .redeem_code(code, &client.client_id, req.redirect_uri.as_deref().unwrap_or_default())?;
        Ok(TokenResponse::bearer(token))
    })();
    match result {
        Ok(t) => ([(axum::http::header::CACHE_CONTROL, "no-store")], Json(t)).into_response(),
        Err(e) => e.into_response(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IdpIdentity {
    pub uid: String,
    pub attributes: BTreeMap<String, String>,
}

async fn resource(State(s): State<Arc<IdpState>>, headers: HeaderMap) -> Response {
    let uid = match bearer_token(&headers)
        .ok_or(OAuthError::unauthorized(ErrorCode::InvalidToken))
        .and_then(|t| s.grants.resource(t))
    {
        Ok(uid) => uid,
        Err(e) => return e.into_response(),
    };
    let user = s.by_uid.get(&uid).and_then(|name| s.users.get(name));
    match user {
        Some(u) => Json(IdpIdentity {
            uid: u.uid.clone(),
            attributes: u.attributes.clone(),
        })
        .into_response(),
        None => OAuthError::unauthorized(ErrorCode::InvalidToken).into_response(),
    }
}

fn valid_redirect(uri: &str) -> bool {
    url::Url::parse(uri)
        .map(|u| matches!(u.scheme(), "http" | "https") && u.host().is_some() && u.fragment().is_none())
        .unwrap_or(false)
}

async fn register(State(s): State<Arc<IdpState>>, Json(req): Json<RegistrationRequest>) -> Response {
    if !valid_redirect(&req.redirect_uri) {
        return OAuthError::bad_request(ErrorCode::InvalidRedirectUri).into_response();
    }
    let (client_id, client_secret) = match (crypto::gen_secret(), crypto::gen_token()) {
        (Ok(id), Ok(secret)) => (format!("{}-{}", s.idp_id, &b64url(&id)[..22]), secret),
        _ => return OAuthError::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::ServerError).into_response(),
    };
    let client = IdpClient {
        client_id: client_id.clone(),
        client_secret: client_secret.clone(),
        redirect_uri: req.redirect_uri,
        name: req.client_name.unwrap_or_default(),
    };
    let mut clients = s.clients.write().expect("client registry poisoned");
    clients.insert(client_id.clone(), client);
    if let Err(e) = s.persist_clients(&clients) {
        tracing::error!(error = %e, "persisting IdP clients failed");
        return OAuthError::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::ServerError).into_response();
    }
    (
        StatusCode::CREATED,
        Json(RegistrationResponse {
            client_id,
            client_secret,
        }),
    )
        .into_response()
}
