//! Authorization codes and bearer tokens for an OAuth 2.0 authorization
//! server. Codes are single-use and short-lived; tokens expire after an hour.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::clock::SharedClock;
use crate::crypto::{self, ct_eq};
use crate::oauth::{ErrorCode, OAuthError, CODE_LIFETIME_SECS, TOKEN_LIFETIME_SECS};

#[derive(Clone, Debug)]
struct CodeGrant<T> {
    client_id: String,
    redirect_uri: String,
    payload: T,
    expires_at: i64,
}

#[derive(Clone, Debug)]
struct TokenGrant<T> {
    payload: T,
    expires_at: i64,
}

const PURGE_EVERY: usize = 256;

#[derive(Debug)]
pub struct GrantStore<T> {
    codes: Mutex<HashMap<String, CodeGrant<T>>>,
    tokens: Mutex<HashMap<String, TokenGrant<T>>>,
    clock: SharedClock,
}

impl<T: Clone> GrantStore<T> {
    pub fn new(clock: SharedClock) -> Self {
        Self {
            codes: Mutex::default(),
            tokens: Mutex::default(),
            clock,
        }
    }

    pub fn issue_code(&self, client_id: &str, redirect_uri: &str, payload: T) -> Result<String, OAuthError> {
        let code = crypto::gen_token().map_err(|_| server_error())?;
        let now = self.clock.now();
        let mut codes = self.codes.lock().expect("code store poisoned");
        if codes.len() % PURGE_EVERY == PURGE_EVERY - 1 {
            codes.retain(|_, g| g.expires_at > now);
        }
        codes.insert(
            code.clone(),
            CodeGrant {
                client_id: client_id.to_owned(),
                redirect_uri: redirect_uri.to_owned(),
                payload,
                expires_at: now + CODE_LIFETIME_SECS,
            },
        );
        Ok(code)
    }

    /// Consumes `code` and issues an access token. The caller has already
    /// authenticated `client_id`.
    pub fn redeem_code(&self, code: &str, client_id: &str, redirect_uri: &str) -> Result<String, OAuthError> {
        let invalid = OAuthError::bad_request(ErrorCode::InvalidGrant);
        let now = self.clock.now();
        let grant = {
            let mut codes = self.codes.lock().expect("code store poisoned");
            let Some(grant) = codes.get(code) else {
                return Err(invalid);
            };
            if grant.expires_at <= now {
                codes.remove(code);
                return Err(invalid);
            }
            if !ct_eq(grant.client_id.as_bytes(), client_id.as_bytes()) || grant.redirect_uri != redirect_uri {
                return Err(invalid);
            }
            codes.remove(code).expect("present under lock")
        };
        let token = crypto::gen_token().map_err(|_| server_error())?;
        let mut tokens = self.tokens.lock().expect("token store poisoned");
        if tokens.len() % PURGE_EVERY == PURGE_EVERY - 1 {
            tokens.retain(|_, g| g.expires_at > now);
        }
        tokens.insert(
            token.clone(),
            TokenGrant {
                payload: grant.payload,
                expires_at: now + TOKEN_LIFETIME_SECS,
            },
        );
        Ok(token)
    }

    pub fn resource(&self, token: &str) -> Result<T, OAuthError> {
        let invalid = OAuthError::unauthorized(ErrorCode::InvalidToken);
        let now = self.clock.now();
        let mut tokens = self.tokens.lock().expect("token store poisoned");
        match tokens.get(token) {
            Some(g) if g.expires_at > now => Ok(g.payload.clone()),
            Some(_) => {
                tokens.remove(token);
                Err(invalid)
            }
            None => Err(invalid),
        }
    }

    pub fn live_codes(&self) -> usize {
        self.codes.lock().expect("code store poisoned").len()
    }
}

fn server_error() -> OAuthError {
    OAuthError::new(axum::http::StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::ServerError)
}

/// Checks a presented client secret in constant time.
pub fn check_secret(expected: &str, presented: Option<&str>) -> Result<(), OAuthError> {
    match presented {
        Some(p) if ct_eq(expected.as_bytes(), p.as_bytes()) => Ok(()),
        _ => Err(OAuthError::unauthorized(ErrorCode::InvalidClient)),
    }
}
