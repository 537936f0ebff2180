//! A headless browser: follows redirects, keeps per-origin cookies, and
//! fills in the IdP login and consent form.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use reqwest::header::{COOKIE, LOCATION, SET_COOKIE};
use reqwest::{Method, StatusCode};
use serde::Serialize;
use url::Url;

use crate::backchannel::http_client;
use crate::rp::MeResponse;
use crate::stack::UserFixture;

const MAX_STEPS: usize = 24;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum Consent {
    #[default]
    Grant,
    Deny,
}

#[derive(Clone, Debug)]
pub struct LoginRequest<'a> {
    pub rp_url: &'a str,
    pub user: &'a UserFixture,
    pub idp_list: Option<&'a str>,
    pub m: Option<usize>,
    pub consent: Consent,
}

impl<'a> LoginRequest<'a> {
    pub fn new(rp_url: &'a str, user: &'a UserFixture) -> Self {
        Self {
            rp_url,
            user,
            idp_list: None,
            m: None,
            consent: Consent::Grant,
        }
    }

    pub fn idps(mut self, idp_list: &'a str) -> Self {
        self.idp_list = Some(idp_list);
        self
    }

    pub fn threshold(mut self, m: usize) -> Self {
        self.m = Some(m);
        self
    }

    pub fn consent(mut self, consent: Consent) -> Self {
        self.consent = consent;
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LoginSuccess {
    pub me: MeResponse,
    pub steps: usize,
    #[serde(with = "millis")]
    pub elapsed: Duration,
}

/// Where a login stopped: the request index in the redirect chain, the URL,
/// the HTTP status, and the OAuth error code (or a short description).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, thiserror::Error)]
#[error("step {step} ({url}) answered {status}: {error}")]
pub struct LoginFailure {
    pub step: usize,
    pub url: String,
    pub status: u16,
    pub error: String,
}

mod millis {
    use std::time::Duration;

    pub fn serialize<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1000.0)
    }
}

enum Driven {
    Done(LoginSuccess),
    Stopped(Url),
}

/// One simulated user agent. Cookies are scoped to scheme, host and port.
#[derive(Debug)]
pub struct Agent {
    client: reqwest::Client,
    jar: Mutex<HashMap<String, HashMap<String, String>>>,
}

impl Default for Agent {
    fn default() -> Self {
        Self::new()
    }
}

fn origin(u: &Url) -> String {
    u.origin().ascii_serialization()
}

impl Agent {
    pub fn new() -> Self {
        Self::with_client(http_client())
    }

    /// Shares a connection pool with other agents; cookies stay separate.
    pub fn with_client(client: reqwest::Client) -> Self {
        Self {
            client,
            jar: Mutex::default(),
        }
    }

    pub fn cookie(&self, url: &str, name: &str) -> Option<String> {
        let u = Url::parse(url).ok()?;
        self.jar
            .lock()
            .expect("jar poisoned")
            .get(&origin(&u))?
            .get(name)
            .cloned()
    }

    /// Sends one request with this agent's cookies and stores any it sets.
    pub async fn send(
        &self,
        method: Method,
        url: &Url,
        form: Option<&[(String, String)]>,
    ) -> Result<reqwest::Response, reqwest::Error> {
        let mut req = self.client.request(method, url.as_str());
        let cookies = self
            .jar
            .lock()
            .expect("jar poisoned")
            .get(&origin(url))
            .map(|c| c.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("; "));
        if let Some(c) = cookies.filter(|c| !c.is_empty()) {
            req = req.header(COOKIE, c);
        }
        if let Some(form) = form {
            req = req.form(form);
        }
        let resp = req.send().await?;
        let set: Vec<(String, String)> = resp
            .headers()
            .get_all(SET_COOKIE)
            .iter()
            .filter_map(|v| v.to_str().ok())
            .filter_map(|v| v.split(';').next()?.trim().split_once('='))
            .map(|(k, v)| (k.to_owned(), v.to_owned()))
            .collect();
        if !set.is_empty() {
            self.jar
                .lock()
                .expect("jar poisoned")
                .entry(origin(url))
                .or_default()
                .extend(set);
        }
        Ok(resp)
    }

    /// Runs a full login from the RP's `/login` to its `/me` page.
    pub async fn login(&self, req: &LoginRequest<'_>) -> Result<LoginSuccess, LoginFailure> {
        match self.drive(req, None).await? {
            Driven::Done(ok) => Ok(ok),
            Driven::Stopped(url) => unreachable!("no stop prefix, stopped at {url}"),
        }
    }

    /// Follows the login chain until a redirect points at a URL starting with
    /// `prefix`, and returns that URL without requesting it. Used to capture
    /// codes and states in flight.
    pub async fn login_until(&self, req: &LoginRequest<'_>, prefix: &str) -> Result<Url, LoginFailure> {
        match self.drive(req, Some(prefix)).await? {
            Driven::Stopped(url) => Ok(url),
            Driven::Done(ok) => Err(LoginFailure {
                step: ok.steps,
                url: prefix.to_owned(),
                status: 200,
                error: "login finished without reaching the prefix".into(),
            }),
        }
    }

    async fn drive(&self, req: &LoginRequest<'_>, stop: Option<&str>) -> Result<Driven, LoginFailure> {
        let start = Instant::now();
        let fail = |step: usize, url: &Url, status: u16, error: String| LoginFailure {
            step,
            url: url.to_string(),
            status,
            error,
        };
        let mut url = Url::parse(&format!("{}/login", req.rp_url.trim_end_matches('/'))).map_err(|e| LoginFailure {
            step: 0,
            url: req.rp_url.to_owned(),
            status: 0,
            error: e.to_string(),
        })?;
        {
            let mut q = url.query_pairs_mut();
            if let Some(list) = req.idp_list {
                q.append_pair("idp_list", list);
            }
            if let Some(m) = req.m {
                q.append_pair("m", &m.to_string());
            }
        }
        if url.query() == Some("") {
            url.set_query(None);
        }
        let mut method = Method::GET;
        let mut form: Option<Vec<(String, String)>> = None;
        for step in 0..MAX_STEPS {
            let resp = self
                .send(method.clone(), &url, form.as_deref())
                .await
                .map_err(|e| fail(step, &url, 0, e.to_string()))?;
            let status = resp.status();
            if status.is_redirection() {
                let loc = resp
                    .headers()
                    .get(LOCATION)
                    .and_then(|v| v.to_str().ok())
                    .ok_or_else(|| fail(step, &url, status.as_u16(), "redirect without Location".into()))?;
                url = url
                    .join(loc)
                    .map_err(|e| fail(step, &url, status.as_u16(), e.to_string()))?;
                if stop.is_some_and(|p| url.as_str().starts_with(p)) {
                    return Ok(Driven::Stopped(url));
                }
                method = Method::GET;
                form = None;
                continue;
            }
            if status != StatusCode::OK {
                let body: serde_json::Value = resp.json().await.unwrap_or_default();
                let error = body
                    .get("error")
                    .and_then(|e| e.as_str())
                    .unwrap_or("unexpected response")
                    .to_owned();
                return Err(fail(step, &url, status.as_u16(), error));
            }
            match (url.path(), &method) {
                ("/auth_IdP", &Method::GET) => {
                    let mut fields: Vec<(String, String)> = url.query_pairs().into_owned().collect();
                    fields.push(("username".into(), req.user.username.clone()));
                    fields.push(("password".into(), req.user.password.clone()));
                    let consent = match req.consent {
                        Consent::Grant => "grant",
                        Consent::Deny => "deny",
                    };
                    fields.push(("consent".into(), consent.into()));
                    // drain the form page like a browser would before posting
                    let _ = resp.bytes().await;
                    url.set_query(None);
                    method = Method::POST;
                    form = Some(fields);
                }
                ("/me", _) => {
                    let me: MeResponse = resp
                        .json()
                        .await
                        .map_err(|e| fail(step, &url, 200, format!("bad /me body: {e}")))?;
                    return Ok(Driven::Done(LoginSuccess {
                        me,
                        steps: step + 1,
                        elapsed: start.elapsed(),
                    }));
                }
                _ => return Err(fail(step, &url, 200, "unexpected page".into())),
            }
        }
        Err(fail(MAX_STEPS, &url, 0, "too many steps".into()))
    }

    /// Posts a disclosure policy to the mixer using this agent's mixer session.
    pub async fn set_policy(
        &self,
        mixer_url: &str,
        client_id: &str,
        attributes: &[&str],
    ) -> Result<crate::mixer::PolicyResponse, LoginFailure> {
        let url = Url::parse(&format!("{}/policy", mixer_url.trim_end_matches('/'))).map_err(|e| LoginFailure {
            step: 0,
            url: mixer_url.to_owned(),
            status: 0,
            error: e.to_string(),
        })?;
        let form = vec![
            ("client_id".to_owned(), client_id.to_owned()),
            ("attributes".to_owned(), attributes.join(",")),
        ];
        let fail = |status: u16, error: String| LoginFailure {
            step: 0,
            url: url.to_string(),
            status,
            error,
        };
        let resp = self
            .send(Method::POST, &url, Some(&form))
            .await
            .map_err(|e| fail(0, e.to_string()))?;
        let status = resp.status().as_u16();
        let body: serde_json::Value = resp.json().await.unwrap_or_default();
        if status != 200 {
            let error = body
                .get("error")
                .and_then(|e| e.as_str())
                .unwrap_or("unexpected response");
            return Err(fail(status, error.to_owned()));
        }
        serde_json::from_value(body).map_err(|e| fail(status, e.to_string()))
    }
}
