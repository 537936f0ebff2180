//! Server-to-server HTTP calls (token exchange, resource fetch).

use std::time::Duration;

use serde::Serialize;

use crate::tap::Tap;

#[derive(Debug, thiserror::Error)]
pub enum BackChannelError {
    #[error("request to {url} failed: {source}")]
    Transport {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("{url} answered {status}: {body}")]
    Status {
        url: String,
        status: u16,
        body: serde_json::Value,
    },
}

impl BackChannelError {
    /// The OAuth `error` code carried by a non-success response, if any.
    pub fn error_code(&self) -> Option<&str> {
        match self {
            BackChannelError::Status { body, .. } => body.get("error").and_then(|v| v.as_str()),
            BackChannelError::Transport { .. } => None,
        }
    }
}

/// A connection-pooled client that records response bodies into an optional tap.
#[derive(Clone, Debug)]
pub struct BackChannel {
    client: reqwest::Client,
    tap: Option<Tap>,
}

/// Loopback-friendly client: no proxies, no automatic redirects.
pub fn http_client() -> reqwest::Client {
    reqwest::Client::builder()
        .no_proxy()
        .redirect(reqwest::redirect::Policy::none())
        .pool_max_idle_per_host(256)
        .timeout(Duration::from_secs(30))
        .build()
        .expect("reqwest client builds with static settings")
}

impl BackChannel {
    pub fn new(tap: Option<Tap>) -> Self {
        Self {
            client: http_client(),
            tap,
        }
    }

    pub async fn post_form<F: Serialize + ?Sized>(
        &self,
        url: &str,
        form: &F,
    ) -> Result<serde_json::Value, BackChannelError> {
        let resp = self.client.post(url).form(form).send().await;
        self.finish(url, resp).await
    }

    pub async fn post_json<B: Serialize + ?Sized>(
        &self,
        url: &str,
        body: &B,
    ) -> Result<serde_json::Value, BackChannelError> {
        let resp = self.client.post(url).json(body).send().await;
        self.finish(url, resp).await
    }

    pub async fn get_json(&self, url: &str) -> Result<serde_json::Value, BackChannelError> {
        let resp = self.client.get(url).send().await;
        self.finish(url, resp).await
    }

    pub async fn get_bearer(&self, url: &str, token: &str) -> Result<serde_json::Value, BackChannelError> {
        let resp = self.client.get(url).bearer_auth(token).send().await;
        self.finish(url, resp).await
    }

    async fn finish(
        &self,
        url: &str,
        resp: Result<reqwest::Response, reqwest::Error>,
    ) -> Result<serde_json::Value, BackChannelError> {
        let transport = |source| BackChannelError::Transport {
            url: url.to_owned(),
            source,
        };
        let resp = resp.map_err(transport)?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(transport)?;
        let body: serde_json::Value = serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| serde_json::Value::String(String::from_utf8_lossy(&bytes).into_owned()));
        if let Some(tap) = &self.tap {
            let endpoint = url::Url::parse(url)
                .map(|u| u.path().to_owned())
                .unwrap_or_else(|_| url.to_owned());
            tap.record_response(&endpoint, &body);
        }
        if !status.is_success() {
            return Err(BackChannelError::Status {
                url: url.to_owned(),
                status: status.as_u16(),
                body,
            });
        }
        Ok(body)
    }
}
