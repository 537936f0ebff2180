#![allow(dead_code)]

use std::path::Path;

use serde_json::Value;
use url::Url;

use miso::harness::{Agent, LoginRequest};
use miso::stack::{Stack, StackOptions};

/// Fast fixture hashing; tests care about protocol behavior, not KDF cost.
pub fn options(dir: &Path) -> StackOptions {
    let mut opts = StackOptions::new(dir);
    opts.pbkdf2_iterations = 1;
    opts
}

pub async fn stack(dir: &Path) -> Stack {
    Stack::up(options(dir)).await.expect("stack up")
}

pub fn query(url: &Url, key: &str) -> Option<String> {
    url.query_pairs().find(|(k, _)| k == key).map(|(_, v)| v.into_owned())
}

/// Drives a login until the mixer redirects back to RP `rp`, returning the
/// agent (holding the mixer session cookie) and the callback URL.
pub async fn capture_rp_callback(stack: &Stack, rp: usize, user: usize) -> (Agent, Url) {
    let users = stack.users();
    let agent = Agent::new();
    let cb = stack.rp(rp).config().callback_url();
    let url = agent
        .login_until(&LoginRequest::new(stack.rp_url(rp), &users[user]).idps("idp-a"), &cb)
        .await
        .expect("login reaches the RP callback");
    (agent, url)
}

pub struct Redeem<'a> {
    pub client_id: &'a str,
    pub client_secret: &'a str,
    pub code: &'a str,
    pub redirect_uri: &'a str,
}

pub async fn token_mixer(stack: &Stack, r: &Redeem<'_>) -> (u16, Value) {
    let resp = reqwest::Client::new()
        .post(format!("{}/token_mixer", stack.mixer_url()))
        .form(&[
            ("grant_type", "authorization_code"),
            ("code", r.code),
            ("redirect_uri", r.redirect_uri),
            ("client_id", r.client_id),
            ("client_secret", r.client_secret),
        ])
        .send()
        .await
        .expect("token request");
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap_or_default())
}

pub async fn res_mixer(stack: &Stack, token: &str) -> (u16, Value) {
    let resp = reqwest::Client::new()
        .get(format!("{}/res_mixer", stack.mixer_url()))
        .bearer_auth(token)
        .send()
        .await
        .expect("resource request");
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap_or_default())
}

/// Redeems a fresh code_rp for RP `rp` using its real credentials.
pub async fn fresh_code(stack: &Stack, rp: usize, user: usize) -> String {
    let (_, url) = capture_rp_callback(stack, rp, user).await;
    query(&url, "code").expect("code_rp in callback")
}

pub fn redeem_for<'a>(stack: &'a Stack, rp: usize, code: &'a str, cb: &'a str) -> Redeem<'a> {
    let creds = stack.rp(rp).credentials();
    Redeem {
        client_id: &creds.client_id,
        client_secret: &creds.client_secret,
        code,
        redirect_uri: cb,
    }
}

pub fn error_of(v: &Value) -> &str {
    v.get("error").and_then(Value::as_str).unwrap_or("")
}

/// GET without following redirects.
pub async fn get_raw(url: &str) -> reqwest::Response {
    miso::backchannel::http_client().get(url).send().await.expect("request")
}
