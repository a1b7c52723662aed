//! Typed async client for `vbsf-server`.

use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use vbsf_core::api::*;
use vbsf_core::data::{Injection, SyntheticData, SyntheticSpec};
use vbsf_core::experiment::{ExperimentConfig, ExperimentOutput};
use vbsf_core::FilterState;

pub use vbsf_core::api;

#[derive(Debug, Error)]
pub enum ClientError {
    /// The server answered with an error body.
    #[error("{status}: {} ({:?})", detail.message, detail.kind)]
    Api {
        status: StatusCode,
        detail: ErrorDetail,
    },

    #[error("unexpected response {status}: {body}")]
    Unexpected { status: StatusCode, body: String },

    #[error(transparent)]
    Transport(#[from] reqwest::Error),
}

impl ClientError {
    pub fn kind(&self) -> Option<&ErrorKind> {
        match self {
            ClientError::Api { detail, .. } => Some(&detail.kind),
            _ => None,
        }
    }
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

async fn failure(status: StatusCode, resp: reqwest::Response) -> ClientError {
    let body = match resp.text().await {
        Ok(b) => b,
        Err(e) => return e.into(),
    };
    match serde_json::from_str::<ErrorBody>(&body) {
        Ok(e) => ClientError::Api {
            status,
            detail: e.error,
        },
        Err(_) => ClientError::Unexpected { status, body },
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self::with_http(base, reqwest::Client::new())
    }

    pub fn with_http(base: impl Into<String>, http: reqwest::Client) -> Self {
        let base = base.into().trim_end_matches('/').to_string();
        Client { base, http }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn send<B: Serialize, T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        body: Option<&B>,
    ) -> Result<T> {
        let mut req = self.http.request(method, format!("{}{}", self.base, path));
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        Err(failure(status, resp).await)
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        self.send(Method::POST, path, Some(body)).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.send::<(), T>(Method::GET, path, None).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/healthz").await
    }

    pub async fn synth(&self, spec: &SyntheticSpec) -> Result<SyntheticData> {
        self.post("/v1/synth", spec).await
    }

    pub async fn fit(&self, req: &FitRequest) -> Result<FitResponse> {
        self.post("/v1/fit", req).await
    }

    pub async fn impute(&self, req: &ImputeRequest) -> Result<ImputeResponse> {
        self.post("/v1/impute", req).await
    }

    pub async fn forecast(&self, req: &ForecastRequest) -> Result<ForecastResponse> {
        self.post("/v1/forecast", req).await
    }

    pub async fn inject_outliers(&self, req: &InjectRequest) -> Result<Injection> {
        self.post("/v1/inject-outliers", req).await
    }

    pub async fn bench(&self, cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
        self.post("/v1/bench", cfg).await
    }

    pub async fn create_stream(&self, req: &CreateStream) -> Result<StreamInfo> {
        self.post("/v1/streams", req).await
    }

    pub async fn stream_info(&self, id: &str) -> Result<StreamInfo> {
        self.get(&format!("/v1/streams/{id}")).await
    }

    pub async fn push_columns(&self, id: &str, columns: Vec<Vec<Option<f64>>>) -> Result<PushResponse> {
        self.post(&format!("/v1/streams/{id}/columns"), &PushColumns { columns })
            .await
    }

    pub async fn stream_forecast(&self, id: &str, horizon: usize) -> Result<ForecastResponse> {
        self.get(&format!("/v1/streams/{id}/forecast?horizon={horizon}"))
            .await
    }

    pub async fn stream_state(&self, id: &str) -> Result<FilterState> {
        self.get(&format!("/v1/streams/{id}/state")).await
    }

    pub async fn delete_stream(&self, id: &str) -> Result<()> {
        let resp = self
            .http
            .delete(format!("{}/v1/streams/{id}", self.base))
            .send()
            .await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(());
        }
        Err(failure(status, resp).await)
    }
}
