//! Blocking HTTP client for the acm API.

use std::time::Duration;

use reqwest::blocking::{Client as Http, RequestBuilder};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::exit::{CliError, Exit};

pub struct Client {
    base: String,
    token: Option<String>,
    http: Http,
}

impl Client {
    pub fn new(endpoint: &str, token: Option<String>) -> Result<Self, CliError> {
        let http = Http::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| CliError::new(Exit::Network, format!("http client: {e}")))?;
        Ok(Self {
            base: endpoint.trim_end_matches('/').to_string(),
            token: token.filter(|t| !t.is_empty()),
            http,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, CliError> {
        let req = match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        };
        let resp = req
            .send()
            .map_err(|e| CliError::new(Exit::Network, format!("cannot reach {}: {e}", self.base)))?;
        let status = resp.status();
        let body = resp
            .bytes()
            .map_err(|e| CliError::new(Exit::Network, format!("reading response: {e}")))?;
        if !status.is_success() {
            return Err(CliError::from_response(status, &body));
        }
        serde_json::from_slice(&body)
            .map_err(|e| CliError::new(Exit::Server, format!("undecodable response from server: {e}")))
    }

    pub fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, CliError> {
        self.send(self.http.get(self.url(path)))
    }

    pub fn delete<T: DeserializeOwned>(&self, path: &str) -> Result<T, CliError> {
        self.send(self.http.delete(self.url(path)))
    }

    pub fn post_json<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, CliError> {
        self.send(self.http.post(self.url(path)).json(body))
    }

    pub fn post_bytes<T: DeserializeOwned>(&self, path: &str, body: Vec<u8>) -> Result<T, CliError> {
        self.send(
            self.http
                .post(self.url(path))
                .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
                .body(body),
        )
    }
}
