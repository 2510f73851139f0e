//! Async client for the slidecurate HTTP service.

use std::time::Duration;

use reqwest::{Response, StatusCode};
use serde::de::DeserializeOwned;
use slidecurate_core::api::{
    ErrorBody, Health, Heatmap, QueryAccepted, QueryRequest, QueryState, QueryStatus, SlideList, SlideMeta,
};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server returned {status}: {message}")]
    Api { status: StatusCode, message: String },
    #[error("query {0} failed: {1}")]
    QueryFailed(String, String),
    #[error("query {0} still pending after {1:?}")]
    Timeout(String, Duration),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self { base: base.into().trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn check(resp: Response) -> Result<Response> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        Err(ClientError::Api { status, message })
    }

    async fn get_json<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let resp = self.http.get(self.url(path)).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    async fn get_bytes(&self, path: &str) -> Result<Vec<u8>> {
        let resp = self.http.get(self.url(path)).send().await?;
        Ok(Self::check(resp).await?.bytes().await?.to_vec())
    }

    pub async fn health(&self) -> Result<Health> {
        self.get_json("/api/health").await
    }

    pub async fn slides(&self) -> Result<SlideList> {
        self.get_json("/api/slides").await
    }

    pub async fn slide_meta(&self, slide_id: &str) -> Result<SlideMeta> {
        self.get_json(&format!("/api/slides/{slide_id}/meta")).await
    }

    /// PNG bytes of one tile.
    pub async fn tile(&self, slide_id: &str, x: u32, y: u32) -> Result<Vec<u8>> {
        self.get_bytes(&format!("/api/slides/{slide_id}/tiles/{x}/{y}")).await
    }

    /// PNG bytes of the slide thumbnail.
    pub async fn thumbnail(&self, slide_id: &str) -> Result<Vec<u8>> {
        self.get_bytes(&format!("/api/slides/{slide_id}/thumbnail")).await
    }

    pub async fn submit_query(&self, req: &QueryRequest) -> Result<QueryAccepted> {
        let resp = self.http.post(self.url("/api/queries")).json(req).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    pub async fn query(&self, query_id: &str) -> Result<QueryStatus> {
        self.get_json(&format!("/api/queries/{query_id}")).await
    }

    pub async fn heatmap(&self, query_id: &str, slide_id: &str) -> Result<Heatmap> {
        self.get_json(&format!("/api/queries/{query_id}/heatmap/{slide_id}")).await
    }

    /// Submits a query and polls until it finishes or `timeout` elapses.
    pub async fn run_query(&self, req: &QueryRequest, timeout: Duration) -> Result<QueryStatus> {
        let accepted = self.submit_query(req).await?;
        let id = accepted.query_id;
        let start = tokio::time::Instant::now();
        let mut delay = Duration::from_millis(20);
        loop {
            let status = self.query(&id).await?;
            match status.status {
                QueryState::Done => return Ok(status),
                QueryState::Failed => {
                    return Err(ClientError::QueryFailed(id, status.error.unwrap_or_default()));
                }
                QueryState::Pending if start.elapsed() >= timeout => {
                    return Err(ClientError::Timeout(id, timeout));
                }
                QueryState::Pending => {
                    tokio::time::sleep(delay).await;
                    delay = (delay * 2).min(Duration::from_millis(500));
                }
            }
        }
    }
}
