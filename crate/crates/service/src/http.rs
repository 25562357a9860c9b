//! Axum routes over [`Service`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use elicit_core::types::UserId;

use crate::state::{BeliefSubmission, Service, ServiceError};

/// Seconds a client should wait before retrying when no pool can be built.
pub const RETRY_AFTER_SECS: u64 = 60;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Forbidden => StatusCode::FORBIDDEN,
            ServiceError::Unauthorized => StatusCode::UNAUTHORIZED,
            ServiceError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = Json(json!({ "error": self.to_string() }));
        if status == StatusCode::SERVICE_UNAVAILABLE {
            (status, [(header::RETRY_AFTER, RETRY_AFTER_SECS.to_string())], body).into_response()
        } else {
            (status, body).into_response()
        }
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

/// Runs blocking service work (file appends, pool builds) off the async workers.
async fn blocking<T, F>(service: &Arc<Service>, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&Service) -> Result<T, ServiceError> + Send + 'static,
{
    let service = service.clone();
    tokio::task::spawn_blocking(move || f(&service))
        .await
        .unwrap_or_else(|e| Err(ServiceError::Invalid(format!("worker failed: {e}"))))
}

#[derive(Debug, Deserialize)]
struct BatchQuery {
    refresh: Option<String>,
}

async fn elicitation_batch(
    State(service): State<Arc<Service>>,
    Path(user): Path<u32>,
    Query(query): Query<BatchQuery>,
    headers: HeaderMap,
) -> Result<Response, ServiceError> {
    let user = UserId(user);
    service.check_user_token(user, bearer(&headers))?;
    let refresh = matches!(query.refresh.as_deref(), Some("1" | "true"));
    let view = blocking(&service, move |s| s.get_batch(user, refresh)).await?;
    Ok(Json(view).into_response())
}

async fn beliefs(
    State(service): State<Arc<Service>>,
    Path(user): Path<u32>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ServiceError> {
    let user = UserId(user);
    service.check_user_token(user, bearer(&headers))?;
    let submission: BeliefSubmission =
        serde_json::from_slice(&body).map_err(|e| ServiceError::Invalid(format!("bad body: {e}")))?;
    let record = blocking(&service, move |s| s.submit_belief(user, &submission)).await?;
    let body = json!({
        "timestamp": record.timestamp,
        "userId": record.user_id.0,
        "movieId": record.movie_id.0,
        "isSeen": record.response.is_seen_code(),
    });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn top_picks(
    State(service): State<Arc<Service>>,
    Path(user): Path<u32>,
    headers: HeaderMap,
) -> Result<Response, ServiceError> {
    let user = UserId(user);
    service.check_user_token(user, bearer(&headers))?;
    let picks = blocking(&service, move |s| s.top_picks(user)).await?;
    Ok(Json(json!({ "userId": user.0, "items": picks })).into_response())
}

async fn rebuild_pool(State(service): State<Arc<Service>>, headers: HeaderMap) -> Result<Response, ServiceError> {
    let token = bearer(&headers).map(str::to_string);
    let summary = blocking(&service, move |s| s.rebuild_pool(token.as_deref())).await?;
    Ok(Json(summary).into_response())
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/users/{id}/elicitation-batch", get(elicitation_batch))
        .route("/users/{id}/beliefs", post(beliefs))
        .route("/users/{id}/top-picks", get(top_picks))
        .route("/admin/pool/rebuild", post(rebuild_pool))
        .with_state(service)
}

/// Binds `addr`, prints `listening on ADDR` once bound, and serves until the process exits.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    println!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await
}
