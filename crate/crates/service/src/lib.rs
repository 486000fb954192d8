//! HTTP facade over the assessment engine.
//!
//! Responses are `{request_id, payload}` or `{request_id, error}` envelopes,
//! except `/healthz` and `/openapi.json`. Every route other than those two
//! and `/version` requires the bearer token when one is configured; the
//! `X-Aura-Operator` header names the human recorded for edits.

mod error;
mod handlers;
mod reply;
mod routes;
mod state;

use std::sync::Arc;

use axum::extract::{Request, State};
use axum::http::{header, HeaderValue, Method};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tower_http::trace::TraceLayer;

use aura_core::trace::Actor;

pub use error::ApiError;
pub use reply::Reply;
pub use routes::{openapi, route_table, RouteSpec, ROUTES};
pub use state::AppState;

pub const OPERATOR_HEADER: &str = "x-aura-operator";
pub const REQUEST_ID_HEADER: &str = "x-request-id";

/// Builds the application. An empty `cors_origins` allows any origin.
pub fn router(state: Arc<AppState>, cors_origins: &[String]) -> Router {
    use handlers as h;
    let api = Router::new()
        .route("/assess", post(h::assess))
        .route("/agents/decompose", post(h::decompose))
        .route("/memory/entries", get(h::list_entries).post(h::add_entry))
        .route(
            "/memory/entries/{id}",
            get(h::get_entry)
                .put(h::put_entry)
                .patch(h::patch_entry)
                .delete(h::delete_entry),
        )
        .route("/memory/bulk", post(h::bulk))
        .route("/memory/stats", get(h::stats))
        .route("/memory/info", get(h::info))
        .route("/memory/export", get(h::export))
        .route("/memory/import", post(h::import))
        .route("/memory/query", post(h::query))
        .route("/memory/purge", post(h::purge))
        .route("/mitigations", get(h::list_mitigations).post(h::add_mitigation))
        .route(
            "/mitigations/{id}",
            get(h::get_mitigation)
                .put(h::put_mitigation)
                .delete(h::delete_mitigation),
        )
        .route("/mitigations/{id}/run", post(h::run_mitigation))
        .route("/hitl/sessions", get(h::list_sessions))
        .route("/hitl/sessions/{id}", get(h::get_session))
        .route("/hitl/sessions/{id}/answers", post(h::answer_session))
        .route("/hitl/sessions/{id}/abandon", post(h::abandon_session))
        .route("/traces", get(h::list_traces))
        .route("/traces/{id}", get(h::get_trace))
        .route("/config", get(h::get_config).put(h::put_config).patch(h::patch_config))
        .route("/healthz", get(h::healthz))
        .route("/version", get(h::version))
        .route("/openapi.json", get(h::openapi))
        .fallback(no_route)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(middleware::from_fn_with_state(state.clone(), envelope))
        .with_state(state);
    let origins = if cors_origins.is_empty() {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(cors_origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    let cors = CorsLayer::new()
        .allow_origin(origins)
        .allow_methods([Method::GET, Method::POST, Method::PUT, Method::PATCH, Method::DELETE])
        .allow_headers(Any)
        .expose_headers([header::LOCATION]);
    api.layer(TraceLayer::new_for_http()).layer(cors)
}

fn is_public(path: &str) -> bool {
    ROUTES.iter().any(|r| !r.auth && r.path == path)
}

/// Assigns the request id, checks the token and attaches the actor.
async fn envelope(State(st): State<Arc<AppState>>, mut req: Request, next: Next) -> Response {
    let id = st.next_request_id();
    reply::REQUEST_ID
        .scope(id.clone(), async move {
            let auth = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
            let mut resp = if !is_public(req.uri().path()) && !st.authorized(auth) {
                ApiError::Unauthorized.into_response()
            } else {
                let operator = req
                    .headers()
                    .get(OPERATOR_HEADER)
                    .and_then(|v| v.to_str().ok())
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .unwrap_or(st.operator())
                    .to_string();
                req.extensions_mut().insert(Actor::human(&operator));
                next.run(req).await
            };
            if let Ok(v) = HeaderValue::from_str(&id) {
                resp.headers_mut().insert(REQUEST_ID_HEADER, v);
            }
            resp
        })
        .await
}

async fn no_route(method: Method, uri: axum::http::Uri) -> ApiError {
    ApiError::NoRoute {
        method: method.to_string(),
        path: uri.path().to_string(),
    }
}

async fn method_not_allowed(method: Method, uri: axum::http::Uri) -> ApiError {
    ApiError::MethodNotAllowed {
        method: method.to_string(),
        path: uri.path().to_string(),
    }
}

/// Serves `router` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
