//! In-process transcript capture.
//!
//! Each service can carry a [`Tap`]. When present, a middleware records every
//! inbound request (query, form or JSON body, bearer header) and the service's
//! outbound client records the bodies it receives back. The harness reads the
//! resulting [`Transcript`]s to check what each party learned.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use axum::body::{to_bytes, Body};
use axum::extract::{Request, State};
use axum::http::header;
use axum::middleware::Next;
use axum::response::Response;
use serde::{Deserialize, Serialize};

const BODY_LIMIT: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// A request this party received.
    Inbound,
    /// A response body this party received from a back-channel call.
    Response,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub endpoint: String,
    pub params: BTreeMap<String, String>,
}

impl TranscriptEntry {
    pub fn param_names(&self) -> BTreeSet<&str> {
        self.params.keys().map(String::as_str).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub party: String,
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn values(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.entries.iter().flat_map(|e| {
            e.params
                .iter()
                .map(move |(k, v)| (e.endpoint.as_str(), k.as_str(), v.as_str()))
        })
    }

    /// True if any recorded value contains `needle` as a substring.
    pub fn mentions(&self, needle: &str) -> bool {
        !needle.is_empty() && self.values().any(|(_, _, v)| v.contains(needle))
    }

    pub fn entries_for<'a>(&'a self, endpoint: &'a str) -> impl Iterator<Item = &'a TranscriptEntry> + 'a {
        self.entries.iter().filter(move |e| e.endpoint == endpoint)
    }
}

#[derive(Clone, Debug)]
pub struct Tap {
    party: Arc<str>,
    entries: Arc<Mutex<Vec<TranscriptEntry>>>,
}

impl Tap {
    pub fn new(party: impl Into<String>) -> Self {
        Self {
            party: Arc::from(party.into()),
            entries: Arc::default(),
        }
    }

    pub fn party(&self) -> &str {
        &self.party
    }

    pub fn record(&self, entry: TranscriptEntry) {
        self.entries.lock().expect("tap poisoned").push(entry);
    }

    pub fn record_response(&self, endpoint: &str, body: &serde_json::Value) {
        let mut params = BTreeMap::new();
        flatten_json("", body, &mut params);
        self.record(TranscriptEntry {
            direction: Direction::Response,
            endpoint: endpoint.to_owned(),
            params,
        });
    }

    pub fn snapshot(&self) -> Transcript {
        Transcript {
            party: self.party.to_string(),
            entries: self.entries.lock().expect("tap poisoned").clone(),
        }
    }

    /// Returns everything captured so far and clears the buffer.
    pub fn drain(&self) -> Transcript {
        Transcript {
            party: self.party.to_string(),
            entries: std::mem::take(&mut *self.entries.lock().expect("tap poisoned")),
        }
    }
}

pub fn flatten_json(prefix: &str, value: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_owned()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match value {
        serde_json::Value::Object(map) => {
            if map.is_empty() && !prefix.is_empty() {
                out.insert(prefix.to_owned(), "{}".to_owned());
            }
            for (k, v) in map {
                flatten_json(&key(k), v, out);
            }
        }
        serde_json::Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten_json(&key(&i.to_string()), v, out);
            }
        }
        serde_json::Value::String(s) => {
            out.insert(prefix.to_owned(), s.clone());
        }
        other => {
            out.insert(prefix.to_owned(), other.to_string());
        }
    }
}

/// Middleware that records inbound requests into the service's tap.
pub async fn capture(State(tap): State<Option<Tap>>, req: Request, next: Next) -> Response {
    let Some(tap) = tap else {
        return next.run(req).await;
    };
    let (parts, body) = req.into_parts();
    let mut params = BTreeMap::new();
    if let Some(q) = parts.uri.query() {
        for (k, v) in url::form_urlencoded::parse(q.as_bytes()) {
            params.insert(k.into_owned(), v.into_owned());
        }
    }
    if let Some(auth) = parts.headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()) {
        params.insert("authorization".to_owned(), auth.to_owned());
    }
    let content_type = parts
        .headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_owned();
    let bytes = match to_bytes(body, BODY_LIMIT).await {
        Ok(b) => b,
        Err(_) => axum::body::Bytes::new(),
    };
    if content_type.starts_with("application/x-www-form-urlencoded") {
        for (k, v) in url::form_urlencoded::parse(&bytes) {
            params.insert(k.into_owned(), v.into_owned());
        }
    } else if content_type.starts_with("application/json") {
        if let Ok(v) = serde_json::from_slice::<serde_json::Value>(&bytes) {
            flatten_json("", &v, &mut params);
        }
    }
    tap.record(TranscriptEntry {
        direction: Direction::Inbound,
        endpoint: parts.uri.path().to_owned(),
        params,
    });
    next.run(Request::from_parts(parts, Body::from(bytes))).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flattening() {
        let v = serde_json::json!({"sub": "ab", "attributes": {}, "n": 3, "l": ["x"]});
        let mut out = BTreeMap::new();
        flatten_json("", &v, &mut out);
        assert_eq!(out["sub"], "ab");
        assert_eq!(out["attributes"], "{}");
        assert_eq!(out["n"], "3");
        assert_eq!(out["l.0"], "x");
    }

    #[test]
    fn drain_clears() {
        let tap = Tap::new("idp-a");
        tap.record_response("/x", &serde_json::json!({"uid": "alice-001"}));
        let t = tap.drain();
        assert!(t.mentions("alice"));
        assert!(!t.mentions(""));
        assert!(tap.snapshot().entries.is_empty());
    }
}
