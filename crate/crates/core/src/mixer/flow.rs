//! The nested login flow: RP → mixer → IdP(s) → mixer → RP.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::{Form, Json};
use serde::{Deserialize, Serialize};

use super::store::{policy_key, StoreError, TagMatch, TagRecord};
use super::{MixerState, RpGrant, SESSION_COOKIE};
use crate::crypto::{self, ct_eq, Digest32, RawUserId};
use crate::grants::check_secret;
use crate::oauth::{
    bearer_token, cookie_value, found, with_query, CallbackQuery, ErrorCode, OAuthError, RegistrationRequest,
    RegistrationResponse, TokenRequest, TokenResponse, SESSION_LIFETIME_SECS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    Single,
    Multi { m: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// A state_mixer is outstanding at the current IdP.
    AwaitIdpAuth,
    /// The callback was accepted; token and resource calls are in flight.
    AwaitNextIdp,
    Finalized,
    Failed,
}

/// Per-login state. Upstream access tokens are never stored here.
#[derive(Clone, Debug)]
pub struct LoginSession {
    pub cid_rp: String,
    pub redirect_uri: String,
    pub state_rp: String,
    pub mode: SessionMode,
    pub idp_list: Vec<String>,
    pub next_idp: usize,
    pub state_mixer: Option<String>,
    pub raws: Vec<RawUserId>,
    pub attributes: BTreeMap<String, String>,
    pub phase: Phase,
    /// The identity disclosure policies are keyed by, known once finalized.
    pub account: Option<Digest32>,
    pub created_at: i64,
}

const PURGE_EVERY: usize = 256;

impl From<StoreError> for OAuthError {
    fn from(e: StoreError) -> Self {
        tracing::error!(error = %e, "sealed store failure");
        server_error()
    }
}

fn server_error() -> OAuthError {
    OAuthError::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::ServerError)
}

fn upstream_error() -> OAuthError {
    OAuthError::new(StatusCode::BAD_GATEWAY, ErrorCode::UpstreamError)
}

fn no_store<T: IntoResponse>(body: T) -> Response {
    ([(header::CACHE_CONTROL, "no-store")], body).into_response()
}

/// Splits, trims, deduplicates and sorts a comma-separated IdP list.
pub fn canonical_idp_list(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

pub fn default_threshold(n: usize) -> usize {
    n.saturating_sub(1).max(1)
}

pub(super) async fn register(
    State(s): State<Arc<MixerState>>,
    Json(req): Json<RegistrationRequest>,
) -> Result<Response, OAuthError> {
    if !acceptable_redirect(&req.redirect_uri, s.config.allow_loopback_http) {
        return Err(OAuthError::bad_request(ErrorCode::InvalidRedirectUri));
    }
    let nonce = crypto::gen_secret().map_err(|_| server_error())?;
    let client_id = crypto::derive_client_id(&nonce, &req.redirect_uri);
    let client_secret = crypto::gen_token().map_err(|_| server_error())?;
    let reg = super::store::RpRegistration {
        client_secret: client_secret.clone(),
        redirect_uri: req.redirect_uri,
        client_name: req.client_name.unwrap_or_default(),
    };
    s.rps.update(|t| {
        t.insert(client_id.clone(), reg);
        Ok::<_, OAuthError>(())
    })?;
    Ok((
        StatusCode::CREATED,
        Json(RegistrationResponse {
            client_id,
            client_secret,
        }),
    )
        .into_response())
}

fn acceptable_redirect(uri: &str, allow_loopback_http: bool) -> bool {
    let Ok(u) = url::Url::parse(uri) else {
        return false;
    };
    if u.fragment().is_some() {
        return false;
    }
    match (u.scheme(), u.host()) {
        ("https", Some(_)) => true,
        ("http", Some(url::Host::Domain(d))) => allow_loopback_http && d == "localhost",
        ("http", Some(url::Host::Ipv4(ip))) => allow_loopback_http && ip.is_loopback(),
        ("http", Some(url::Host::Ipv6(ip))) => allow_loopback_http && ip.is_loopback(),
        _ => false,
    }
}

pub(super) async fn attestation(State(s): State<Arc<MixerState>>) -> Response {
    Json(s.attestation.clone()).into_response()
}

#[derive(Debug, Deserialize)]
pub(super) struct AuthQuery {
    response_type: Option<String>,
    client_id: Option<String>,
    redirect_uri: Option<String>,
    state: Option<String>,
    idp_list: Option<String>,
    m: Option<String>,
}

pub(super) async fn auth(State(s): State<Arc<MixerState>>, Query(q): Query<AuthQuery>) -> Result<Response, OAuthError> {
    let cid_rp = q.client_id.ok_or(OAuthError::bad_request(ErrorCode::InvalidRequest))?;
    let reg = s
        .rps
        .read(|t| t.get(&cid_rp).cloned())
        .ok_or(OAuthError::unauthorized(ErrorCode::InvalidClient))?;
    if q.redirect_uri.as_deref() != Some(reg.redirect_uri.as_str()) {
        return Err(OAuthError::bad_request(ErrorCode::InvalidRedirectUri));
    }
    if q.response_type.as_deref() != Some("code") {
        return Err(OAuthError::bad_request(ErrorCode::UnsupportedResponseType));
    }
    let mut idp_list = q.idp_list.as_deref().map(canonical_idp_list).unwrap_or_default();
    if idp_list.is_empty() {
        let fallback = s.config.default_idp.clone().or_else(|| s.idps.keys().next().cloned());
        idp_list.extend(fallback);
    }
    if idp_list.is_empty() || idp_list.iter().any(|id| !s.idps.contains_key(id)) {
        return Err(OAuthError::bad_request(ErrorCode::UnknownIdp));
    }
    let n = idp_list.len();
    let m = match q.m.as_deref().map(str::trim).filter(|m| !m.is_empty()) {
        Some(raw) => Some(
            raw.parse::<usize>()
                .ok()
                .filter(|m| *m >= 1)
                .ok_or(OAuthError::bad_request(ErrorCode::InvalidRequest))?,
        ),
        None => None,
    };
    if m.is_some_and(|m| m > n) {
        return Err(OAuthError::bad_request(ErrorCode::ThresholdNotMet));
    }
    let mode = if n > 1 || m.is_some() {
        SessionMode::Multi {
            m: m.unwrap_or_else(|| default_threshold(n)),
        }
    } else {
        SessionMode::Single
    };

    let sid = crypto::gen_token().map_err(|_| server_error())?;
    let state_mixer = crypto::gen_token().map_err(|_| server_error())?;
    let now = s.clock.now();
    let location = s.idp_redirect(&idp_list[0], &state_mixer, &cid_rp);
    {
        let mut sessions = s.sessions.lock().expect("session store poisoned");
        if sessions.by_id.len() % PURGE_EVERY == PURGE_EVERY - 1 {
            let cutoff = now - SESSION_LIFETIME_SECS;
            sessions.by_id.retain(|_, ls| ls.created_at > cutoff);
            let live = std::mem::take(&mut sessions.by_state);
            sessions.by_state = live
                .into_iter()
                .filter(|(_, sid)| sessions.by_id.contains_key(sid))
                .collect();
        }
        sessions.by_state.insert(state_mixer.clone(), sid.clone());
        sessions.by_id.insert(
            sid.clone(),
            LoginSession {
                cid_rp,
                redirect_uri: reg.redirect_uri,
                state_rp: q.state.unwrap_or_default(),
                mode,
                idp_list,
                next_idp: 0,
                state_mixer: Some(state_mixer),
                raws: Vec::new(),
                attributes: BTreeMap::new(),
                phase: Phase::AwaitIdpAuth,
                account: None,
                created_at: now,
            },
        );
    }
    let mut resp = found(&location);
    let cookie = format!("{SESSION_COOKIE}={sid}; Path=/; HttpOnly; SameSite=Lax");
    resp.headers_mut().insert(
        header::SET_COOKIE,
        HeaderValue::from_str(&cookie).map_err(|_| server_error())?,
    );
    Ok(resp)
}

impl MixerState {
    fn idp_redirect(&self, idp: &str, state_mixer: &str, cid_rp: &str) -> String {
        let r = &self.idps[idp];
        let callback = self.config.callback_url();
        let mut pairs = vec![
            ("response_type", "code"),
            ("client_id", r.credential.client_id.as_str()),
            ("redirect_uri", callback.as_str()),
            ("state", state_mixer),
        ];
        if self.config.faults.leak_rp_client_id {
            pairs.push(("rp_client_id", cid_rp));
        }
        with_query(&r.endpoint.auth_url, pairs)
    }

    fn expired(&self, ls: &LoginSession) -> bool {
        ls.created_at + SESSION_LIFETIME_SECS <= self.clock.now()
    }

    fn fail_session(&self, sid: &str) {
        if let Some(ls) = self.sessions.lock().expect("session store poisoned").by_id.get_mut(sid) {
            ls.phase = Phase::Failed;
        }
    }

    /// Exchanges an IdP code for a token, fetches the user, and drops the
    /// token before returning.
    async fn fetch_identity(&self, idp: &str, code: &str) -> Result<(RawUserId, BTreeMap<String, String>), OAuthError> {
        let r = &self.idps[idp];
        let callback = self.config.callback_url();
        let form = [
            ("grant_type", "authorization_code"),
            ("code", code),
            ("redirect_uri", callback.as_str()),
            ("client_id", r.credential.client_id.as_str()),
            ("client_secret", r.credential.client_secret.as_str()),
        ];
        let body = self
            .upstream
            .post_form(&r.endpoint.token_url, &form)
            .await
            .map_err(|e| {
                tracing::warn!(idp, error = %e, "IdP token exchange failed");
                upstream_error()
            })?;
        let token_mixer: TokenResponse = serde_json::from_value(body).map_err(|_| upstream_error())?;
        let body = self
            .upstream
            .get_bearer(&r.endpoint.res_url, &token_mixer.access_token)
            .await
            .map_err(|e| {
                tracing::warn!(idp, error = %e, "IdP resource fetch failed");
                upstream_error()
            })?;
        drop(token_mixer);
        let identity: crate::idp::IdpIdentity = serde_json::from_value(body).map_err(|_| upstream_error())?;
        if identity.uid.is_empty() {
            return Err(upstream_error());
        }
        Ok((RawUserId::new(idp, identity.uid), identity.attributes))
    }

    fn blind_single(&self, raw: &RawUserId, cid_rp: &str) -> Result<(Digest32, Digest32), OAuthError> {
        let pre_uid = crypto::derive_pre_uid(&self.prf_key, raw, cid_rp);
        let salt = self.salts.get_or_create(&pre_uid)?;
        let uid = if self.config.faults.identity_blinding {
            identity_image(raw)
        } else {
            crypto::derive_uid(&self.prf_key, raw, cid_rp, &salt)
        };
        Ok((uid, pre_uid))
    }

    /// Phase II if the presented tags reach some record's threshold for this
    /// RP, otherwise phase I enrollment.
    fn blind_multi(&self, raws: &[RawUserId], cid_rp: &str, m: usize) -> Result<Digest32, OAuthError> {
        let presented: BTreeSet<Digest32> = raws.iter().map(|r| crypto::derive_tag(&self.prf_key, r)).collect();
        let decide = |found: TagMatch| match found {
            TagMatch::Matched(uid) => Ok(Some(uid)),
            TagMatch::Ambiguous => Err(OAuthError::new(StatusCode::CONFLICT, ErrorCode::AmbiguousMatch)),
            TagMatch::BelowThreshold => Err(OAuthError::new(StatusCode::FORBIDDEN, ErrorCode::ThresholdNotMet)),
            TagMatch::Unknown => Ok(None),
        };
        if let Some(uid) = decide(self.tags.read(|t| t.lookup(cid_rp, &presented)))? {
            return Ok(uid);
        }
        if raws.len() < m {
            return Err(OAuthError::new(StatusCode::FORBIDDEN, ErrorCode::ThresholdNotMet));
        }
        self.tags.update(|t| {
            // Re-check under the lock: a concurrent login may have enrolled.
            if let Some(uid) = decide(t.lookup(cid_rp, &presented))? {
                return Ok(uid);
            }
            let pre = crypto::derive_multi_pre_uid(&self.prf_key, raws, cid_rp);
            let salt = self.salts.get_or_create(&pre)?;
            let uid = if self.config.faults.identity_blinding {
                identity_image(&raws[0])
            } else {
                crypto::derive_multi_uid(&self.prf_key, raws, cid_rp, &salt)
            };
            t.0.push(TagRecord {
                tags: presented.clone(),
                n: raws.len(),
                m,
                cid_rp: cid_rp.to_owned(),
                uid_blinded: uid,
            });
            Ok(uid)
        })
    }
}

/// Negative control: the raw uid zero-padded to 32 bytes, same for every RP.
fn identity_image(raw: &RawUserId) -> Digest32 {
    let mut out = [0u8; 32];
    let b = raw.uid.as_bytes();
    let n = b.len().min(32);
    out[..n].copy_from_slice(&b[..n]);
    out
}

pub(super) async fn callback(
    State(s): State<Arc<MixerState>>,
    Query(q): Query<CallbackQuery>,
) -> Result<Response, OAuthError> {
    let invalid_state = OAuthError::bad_request(ErrorCode::InvalidState);
    let state = q.state.as_deref().ok_or(invalid_state)?;
    let (sid, idp, rp_uri, state_rp) = {
        let mut sessions = s.sessions.lock().expect("session store poisoned");
        let sid = sessions.by_state.remove(state).ok_or(invalid_state)?;
        let expired = match sessions.by_id.get(&sid) {
            Some(ls) => s.expired(ls),
            None => return Err(invalid_state),
        };
        if expired {
            sessions.by_id.remove(&sid);
            return Err(invalid_state);
        }
        let ls = sessions.by_id.get_mut(&sid).expect("checked above");
        let pending = ls.state_mixer.take();
        if ls.phase != Phase::AwaitIdpAuth || !pending.is_some_and(|p| ct_eq(p.as_bytes(), state.as_bytes())) {
            ls.phase = Phase::Failed;
            return Err(invalid_state);
        }
        ls.phase = Phase::AwaitNextIdp;
        (
            sid,
            ls.idp_list[ls.next_idp].clone(),
            ls.redirect_uri.clone(),
            ls.state_rp.clone(),
        )
    };

    if let Some(err) = q.error.as_deref() {
        s.fail_session(&sid);
        let code = if err == "access_denied" {
            "access_denied"
        } else {
            "upstream_error"
        };
        let mut pairs = vec![("error", code)];
        if !state_rp.is_empty() {
            pairs.push(("state", state_rp.as_str()));
        }
        return Ok(found(&with_query(&rp_uri, pairs)));
    }
    let Some(code) = q.code.as_deref() else {
        s.fail_session(&sid);
        return Err(OAuthError::bad_request(ErrorCode::InvalidRequest));
    };
    let (raw, attributes) = match s.fetch_identity(&idp, code).await {
        Ok(v) => v,
        Err(e) => {
            s.fail_session(&sid);
            return Err(e);
        }
    };

    let (mode, raws, cid_rp, attributes) = {
        let mut sessions = s.sessions.lock().expect("session store poisoned");
        let ls = sessions.by_id.get_mut(&sid).ok_or(invalid_state)?;
        ls.raws.push(raw);
        for (k, v) in attributes {
            ls.attributes.entry(k).or_insert(v);
        }
        ls.next_idp += 1;
        if ls.next_idp < ls.idp_list.len() {
            let next = crypto::gen_token().map_err(|_| server_error())?;
            let location = s.idp_redirect(&ls.idp_list[ls.next_idp], &next, &ls.cid_rp);
            ls.state_mixer = Some(next.clone());
            ls.phase = Phase::AwaitIdpAuth;
            sessions.by_state.insert(next, sid);
            return Ok(found(&location));
        }
        (ls.mode, ls.raws.clone(), ls.cid_rp.clone(), ls.attributes.clone())
    };

    let blinded = match mode {
        SessionMode::Single => s.blind_single(&raws[0], &cid_rp),
        SessionMode::Multi { m } => s.blind_multi(&raws, &cid_rp, m).map(|uid| (uid, uid)),
    };
    let (uid_blinded, account) = match blinded {
        Ok(v) => v,
        Err(e) => {
            s.fail_session(&sid);
            return Err(e);
        }
    };
    let allowed = s
        .policies
        .read(|p| p.get(&policy_key(&account, &cid_rp)).cloned())
        .unwrap_or_default();
    let disclosed = attributes.into_iter().filter(|(k, _)| allowed.contains(k)).collect();
    let code_rp = s.grants.issue_code(
        &cid_rp,
        &rp_uri,
        RpGrant {
            uid_blinded,
            attributes: disclosed,
        },
    )?;
    if let Some(ls) = s.sessions.lock().expect("session store poisoned").by_id.get_mut(&sid) {
        ls.phase = Phase::Finalized;
        ls.account = Some(account);
    }
    let mut pairs = vec![("code", code_rp.as_str())];
    if !state_rp.is_empty() {
        pairs.push(("state", state_rp.as_str()));
    }
    Ok(found(&with_query(&rp_uri, pairs)))
}

pub(super) async fn token(
    State(s): State<Arc<MixerState>>,
    Form(req): Form<TokenRequest>,
) -> Result<Response, OAuthError> {
    if req.grant_type.as_deref() != Some("authorization_code") {
        return Err(OAuthError::bad_request(ErrorCode::UnsupportedGrantType));
    }
    let client_id = req
        .client_id
        .as_deref()
        .ok_or(OAuthError::unauthorized(ErrorCode::InvalidClient))?;
    let reg = s
        .rps
        .read(|t| t.get(client_id).cloned())
        .ok_or(OAuthError::unauthorized(ErrorCode::InvalidClient))?;
    check_secret(&reg.client_secret, req.client_secret.as_deref())?;
    let code = req
        .code
        .as_deref()
        .ok_or(OAuthError::bad_request(ErrorCode::InvalidRequest))?;
    let token = s
        .grants
        .redeem_code(code, client_id, req.redirect_uri.as_deref().unwrap_or_default())?;
    Ok(no_store(Json(TokenResponse::bearer(token))))
}

/// Body of `GET /res_mixer`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerIdentity {
    pub sub: String,
    pub attributes: BTreeMap<String, String>,
}

pub(super) async fn resource(State(s): State<Arc<MixerState>>, headers: HeaderMap) -> Result<Response, OAuthError> {
    let token = bearer_token(&headers).ok_or(OAuthError::unauthorized(ErrorCode::InvalidToken))?;
    let grant = s.grants.resource(token)?;
    Ok(no_store(Json(MixerIdentity {
        sub: hex::encode(grant.uid_blinded),
        attributes: grant.attributes,
    })))
}

#[derive(Debug, Deserialize)]
pub(super) struct PolicyForm {
    client_id: Option<String>,
    #[serde(default)]
    attributes: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PolicyResponse {
    pub client_id: String,
    pub attributes: BTreeSet<String>,
}

/// Records which attributes may flow to one RP. The caller proves account
/// ownership with the cookie of a session that finished its IdP logins.
pub(super) async fn set_policy(
    State(s): State<Arc<MixerState>>,
    headers: HeaderMap,
    Form(form): Form<PolicyForm>,
) -> Result<Response, OAuthError> {
    let login_required = OAuthError::unauthorized(ErrorCode::LoginRequired);
    let sid = cookie_value(&headers, SESSION_COOKIE).ok_or(login_required)?;
    let (account, cid_rp, known) = {
        let sessions = s.sessions.lock().expect("session store poisoned");
        let ls = sessions.by_id.get(sid).ok_or(login_required)?;
        match (ls.phase, ls.account) {
            (Phase::Finalized, Some(account)) if !s.expired(ls) => (
                account,
                ls.cid_rp.clone(),
                ls.attributes.keys().cloned().collect::<BTreeSet<_>>(),
            ),
            _ => return Err(login_required),
        }
    };
    if form.client_id.as_deref().is_some_and(|c| c != cid_rp) {
        return Err(OAuthError::bad_request(ErrorCode::InvalidRequest));
    }
    let attributes: BTreeSet<String> = form
        .attributes
        .split(',')
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(str::to_owned)
        .collect();
    if !attributes.is_subset(&known) {
        return Err(OAuthError::bad_request(ErrorCode::UnknownAttribute));
    }
    let key = policy_key(&account, &cid_rp);
    let stored = attributes.clone();
    s.policies.update(|p| {
        p.insert(key, stored);
        Ok::<_, OAuthError>(())
    })?;
    Ok(no_store(Json(PolicyResponse {
        client_id: cid_rp,
        attributes,
    })))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idp_list_canonical() {
        assert_eq!(
            canonical_idp_list(" idp-c,idp-a,,idp-c ,idp-b"),
            ["idp-a", "idp-b", "idp-c"]
        );
        assert!(canonical_idp_list(" , ").is_empty());
    }

    #[test]
    fn thresholds() {
        assert_eq!(default_threshold(1), 1);
        assert_eq!(default_threshold(2), 1);
        assert_eq!(default_threshold(3), 2);
    }

    #[test]
    fn redirect_acceptance() {
        assert!(acceptable_redirect("https://rp.example/cb", false));
        assert!(acceptable_redirect("http://127.0.0.1:8080/cb", true));
        assert!(acceptable_redirect("http://localhost/cb", true));
        assert!(!acceptable_redirect("http://127.0.0.1:8080/cb", false));
        assert!(!acceptable_redirect("http://rp.example/cb", true));
        assert!(!acceptable_redirect("not a url", true));
    }
}
