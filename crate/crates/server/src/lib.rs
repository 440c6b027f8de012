//! Axum service over the layerdiff library. Model work runs on the blocking
//! pool; loaded checkpoints are cached by path.

pub mod ops;

use std::sync::Arc;

use axum::extract::{Json, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use layerdiff_api as api;
use layerdiff_core::Error;

use ops::ModelCache;

#[derive(Clone, Default)]
pub struct AppState {
    pub cache: Arc<ModelCache>,
}

pub struct ApiError(api::ErrorBody);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let kind = if e.is_validation() {
            api::ErrorKind::Validation
        } else {
            api::ErrorKind::Runtime
        };
        ApiError(api::ErrorBody {
            kind,
            error: e.to_string(),
        })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.0.kind {
            api::ErrorKind::Validation => StatusCode::BAD_REQUEST,
            api::ErrorKind::Runtime => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(self.0)).into_response()
    }
}

type Reply<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> Reply<T>
where
    T: Send + 'static,
    F: FnOnce() -> layerdiff_core::Result<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(v)) => Ok(Json(v)),
        Ok(Err(e)) => {
            tracing::warn!(error = %e, "request failed");
            Err(e.into())
        }
        Err(join) => Err(ApiError(api::ErrorBody {
            kind: api::ErrorKind::Runtime,
            error: format!("worker failed: {join}"),
        })),
    }
}

async fn health() -> Json<api::Health> {
    Json(api::Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn make_data(Json(req): Json<api::MakeDataRequest>) -> Reply<api::MakeDataResponse> {
    blocking(move || ops::make_data(&req)).await
}

async fn train(State(s): State<AppState>, Json(req): Json<api::TrainRequest>) -> Reply<api::TrainResponse> {
    blocking(move || ops::train(&req, &s.cache)).await
}

async fn classifier(Json(req): Json<api::ClassifierRequest>) -> Reply<api::ClassifierResponse> {
    blocking(move || ops::classifier(&req)).await
}

async fn sample(State(s): State<AppState>, Json(req): Json<api::SampleRequest>) -> Reply<api::LayerSetResponse> {
    blocking(move || ops::sample(&req, &s.cache)).await
}

async fn inpaint(State(s): State<AppState>, Json(req): Json<api::InpaintRequest>) -> Reply<api::LayerSetResponse> {
    blocking(move || ops::inpaint(&req, &s.cache)).await
}

async fn style(State(s): State<AppState>, Json(req): Json<api::StyleRequest>) -> Reply<api::LayerSetResponse> {
    blocking(move || ops::style(&req, &s.cache)).await
}

async fn priors(State(s): State<AppState>, Json(req): Json<api::PriorsRequest>) -> Reply<api::LayerSetResponse> {
    blocking(move || ops::priors(&req, &s.cache)).await
}

async fn iterate(State(s): State<AppState>, Json(req): Json<api::IterateRequest>) -> Reply<api::LayerSetResponse> {
    blocking(move || ops::iterate(&req, &s.cache)).await
}

async fn eval(State(s): State<AppState>, Json(req): Json<api::EvalRequest>) -> Reply<api::EvalResponse> {
    blocking(move || ops::eval(&req, &s.cache)).await
}

pub fn app(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/datasets", post(make_data))
        .route("/v1/train", post(train))
        .route("/v1/classifier", post(classifier))
        .route("/v1/sample", post(sample))
        .route("/v1/inpaint", post(inpaint))
        .route("/v1/style", post(style))
        .route("/v1/priors", post(priors))
        .route("/v1/iterate", post(iterate))
        .route("/v1/eval", post(eval))
        .with_state(state)
}
