//! RFC 6749 wire shapes shared by every authorization server in the crate.

use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

pub const CODE_LIFETIME_SECS: i64 = 600;
pub const TOKEN_LIFETIME_SECS: i64 = 3600;
pub const SESSION_LIFETIME_SECS: i64 = 900;

/// Error codes returned as `{"error": "<code>"}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    InvalidRequest,
    InvalidClient,
    InvalidGrant,
    UnauthorizedClient,
    UnsupportedGrantType,
    UnsupportedResponseType,
    InvalidRedirectUri,
    InvalidToken,
    AccessDenied,
    InvalidState,
    UnknownIdp,
    ThresholdNotMet,
    AmbiguousMatch,
    UnknownAttribute,
    LoginRequired,
    InvalidCredentials,
    UpstreamError,
    ServerError,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::InvalidRequest => "invalid_request",
            ErrorCode::InvalidClient => "invalid_client",
            ErrorCode::InvalidGrant => "invalid_grant",
            ErrorCode::UnauthorizedClient => "unauthorized_client",
            ErrorCode::UnsupportedGrantType => "unsupported_grant_type",
            ErrorCode::UnsupportedResponseType => "unsupported_response_type",
            ErrorCode::InvalidRedirectUri => "invalid_redirect_uri",
            ErrorCode::InvalidToken => "invalid_token",
            ErrorCode::AccessDenied => "access_denied",
            ErrorCode::InvalidState => "invalid_state",
            ErrorCode::UnknownIdp => "unknown_idp",
            ErrorCode::ThresholdNotMet => "threshold_not_met",
            ErrorCode::AmbiguousMatch => "ambiguous_match",
            ErrorCode::UnknownAttribute => "unknown_attribute",
            ErrorCode::LoginRequired => "login_required",
            ErrorCode::InvalidCredentials => "invalid_credentials",
            ErrorCode::UpstreamError => "upstream_error",
            ErrorCode::ServerError => "server_error",
        }
    }
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorCode,
}

/// An error response: status plus OAuth error JSON.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OAuthError {
    pub status: StatusCode,
    pub code: ErrorCode,
}

impl OAuthError {
    pub const fn new(status: StatusCode, code: ErrorCode) -> Self {
        Self { status, code }
    }

    pub const fn bad_request(code: ErrorCode) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code)
    }

    pub const fn unauthorized(code: ErrorCode) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, code)
    }
}

impl std::fmt::Display for OAuthError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}", self.status.as_u16(), self.code)
    }
}

impl std::error::Error for OAuthError {}

impl IntoResponse for OAuthError {
    fn into_response(self) -> Response {
        let mut resp = (self.status, Json(ErrorBody { error: self.code })).into_response();
        if self.status == StatusCode::UNAUTHORIZED {
            resp.headers_mut()
                .insert(header::WWW_AUTHENTICATE, header::HeaderValue::from_static("Bearer"));
        }
        resp.headers_mut()
            .insert(header::CACHE_CONTROL, header::HeaderValue::from_static("no-store"));
        resp
    }
}

/// Authorization request as it appears in the query string.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AuthorizationRequest {
    pub response_type: Option<String>,
    pub client_id: Option<String>,
    pub redirect_uri: Option<String>,
    pub state: Option<String>,
}

/// `application/x-www-form-urlencoded` token request.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TokenRequest {
    pub grant_type: Option<String>,
    pub code: Option<String>,
    pub redirect_uri: Option<String>,
    pub client_id: Option<String>,
    pub client_secret: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenResponse {
    pub access_token: String,
    pub token_type: String,
    pub expires_in: i64,
}

impl TokenResponse {
    pub fn bearer(access_token: String) -> Self {
        Self {
            access_token,
            token_type: "Bearer".to_owned(),
            expires_in: TOKEN_LIFETIME_SECS,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegistrationRequest {
    pub redirect_uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_name: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationResponse {
    pub client_id: String,
    pub client_secret: String,
}

/// Redirect query on the way back to a client: either a code or an error.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CallbackQuery {
    pub code: Option<String>,
    pub state: Option<String>,
    pub error: Option<String>,
}

/// The bearer token from an `Authorization` header, if well-formed.
pub fn bearer_token(headers: &HeaderMap) -> Option<&str> {
    let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = value.split_once(' ')?;
    scheme
        .eq_ignore_ascii_case("bearer")
        .then_some(token.trim())
        .filter(|t| !t.is_empty())
}

/// Value of cookie `name` from the request headers.
pub fn cookie_value<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers
        .get_all(header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .filter_map(|pair| pair.trim().split_once('='))
        .find(|(k, _)| *k == name)
        .map(|(_, v)| v)
}

/// `302 Found` to `location`.
pub fn found(location: &str) -> Response {
    (
        StatusCode::FOUND,
        [
            (header::LOCATION, location.to_owned()),
            (header::CACHE_CONTROL, "no-store".to_owned()),
        ],
    )
        .into_response()
}

/// Appends query pairs to `base`, preserving any existing query.
pub fn with_query<'a>(base: &str, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    match url::Url::parse(base) {
        Ok(mut u) => {
            {
                let mut q = u.query_pairs_mut();
                for (k, v) in pairs {
                    q.append_pair(k, v);
                }
            }
            u.into()
        }
        Err(_) => {
            let mut s = base.to_owned();
            let mut sep = if base.contains('?') { '&' } else { '?' };
            for (k, v) in pairs {
                s.push(sep);
                s.push_str(&url::form_urlencoded::byte_serialize(k.as_bytes()).collect::<String>());
                s.push('=');
                s.push_str(&url::form_urlencoded::byte_serialize(v.as_bytes()).collect::<String>());
                sep = '&';
            }
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bearer_parsing() {
        let mut h = HeaderMap::new();
        assert!(bearer_token(&h).is_none());
        h.insert(header::AUTHORIZATION, "Bearer abc".parse().unwrap());
        assert_eq!(bearer_token(&h), Some("abc"));
        h.insert(header::AUTHORIZATION, "Basic abc".parse().unwrap());
        assert!(bearer_token(&h).is_none());
        h.insert(header::AUTHORIZATION, "bearer ".parse().unwrap());
        assert!(bearer_token(&h).is_none());
    }

    #[test]
    fn query_building() {
        assert_eq!(
            with_query("https://rp.test/cb", [("code", "a b"), ("state", "s")]),
            "https://rp.test/cb?code=a+b&state=s"
        );
        assert_eq!(
            with_query("https://rp.test/cb?x=1", [("code", "c")]),
            "https://rp.test/cb?x=1&code=c"
        );
    }

    #[test]
    fn error_json_shape() {
        let body = serde_json::to_string(&ErrorBody {
            error: ErrorCode::ThresholdNotMet,
        })
        .unwrap();
        assert_eq!(body, r#"{"error":"threshold_not_met"}"#);
    }
}
