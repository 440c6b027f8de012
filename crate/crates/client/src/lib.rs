//! Thin async client for the layerdiff service, plus the `layerdiff` CLI.

pub mod cli;

use layerdiff_api as api;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The server rejected the request (HTTP 4xx).
    #[error("{0}")]
    Validation(String),
    /// The server failed while handling the request (HTTP 5xx).
    #[error("{0}")]
    Runtime(String),
    #[error("cannot reach layerdiff server at {url}: {source}")]
    Transport {
        url: String,
        #[source]
        source: reqwest::Error,
    },
}

impl ClientError {
    pub fn is_validation(&self) -> bool {
        matches!(self, ClientError::Validation(_))
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is `host:port` or a full `http://` URL.
    pub fn new(base: &str) -> Self {
        let base = if base.contains("://") {
            base.trim_end_matches('/').to_string()
        } else {
            format!("http://{}", base.trim_end_matches('/'))
        };
        Self {
            base,
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn transport(&self, source: reqwest::Error) -> ClientError {
        ClientError::Transport {
            url: self.base.clone(),
            source,
        }
    }

    async fn decode<T: DeserializeOwned>(&self, resp: reqwest::Response) -> Result<T, ClientError> {
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|e| self.transport(e))?;
        if status.is_success() {
            return serde_json::from_slice(&bytes)
                .map_err(|e| ClientError::Runtime(format!("malformed response: {e}")));
        }
        let message = match serde_json::from_slice::<api::ErrorBody>(&bytes) {
            Ok(body) => body.error,
            Err(_) => format!("HTTP {status}: {}", String::from_utf8_lossy(&bytes)),
        };
        if status.is_client_error() {
            Err(ClientError::Validation(message))
        } else {
            Err(ClientError::Runtime(message))
        }
    }

    pub async fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, ClientError> {
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .await
            .map_err(|e| self.transport(e))?;
        self.decode(resp).await
    }

    pub async fn health(&self) -> Result<api::Health, ClientError> {
        let resp = self
            .http
            .get(format!("{}/health", self.base))
            .send()
            .await
            .map_err(|e| self.transport(e))?;
        self.decode(resp).await
    }

    pub async fn make_data(&self, req: &api::MakeDataRequest) -> Result<api::MakeDataResponse, ClientError> {
        self.post("/v1/datasets", req).await
    }

    pub async fn train(&self, req: &api::TrainRequest) -> Result<api::TrainResponse, ClientError> {
        self.post("/v1/train", req).await
    }

    pub async fn classifier(&self, req: &api::ClassifierRequest) -> Result<api::ClassifierResponse, ClientError> {
        self.post("/v1/classifier", req).await
    }

    pub async fn sample(&self, req: &api::SampleRequest) -> Result<api::LayerSetResponse, ClientError> {
        self.post("/v1/sample", req).await
    }

    pub async fn inpaint(&self, req: &api::InpaintRequest) -> Result<api::LayerSetResponse, ClientError> {
        self.post("/v1/inpaint", req).await
    }

    pub async fn style(&self, req: &api::StyleRequest) -> Result<api::LayerSetResponse, ClientError> {
        self.post("/v1/style", req).await
    }

    pub async fn priors(&self, req: &api::PriorsRequest) -> Result<api::LayerSetResponse, ClientError> {
        self.post("/v1/priors", req).await
    }

    pub async fn iterate(&self, req: &api::IterateRequest) -> Result<api::LayerSetResponse, ClientError> {
        self.post("/v1/iterate", req).await
    }

    pub async fn eval(&self, req: &api::EvalRequest) -> Result<api::EvalResponse, ClientError> {
        self.post("/v1/eval", req).await
    }
}
