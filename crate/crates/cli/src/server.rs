//! HTTP API for the guessing game, plus a single static page at `/`.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::{Arc, RwLock};

use amc_core::benchmark::{read_benchmark, Task};
use amc_core::game::{Catalog, GameError, GuessRequest, SessionStore};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cli::ServeArgs;
use crate::commands::default_benchmark;
use crate::{CliError, CliResult};

const INDEX_HTML: &str = include_str!("../static/index.html");

pub type SharedStore = Arc<RwLock<SessionStore>>;

pub struct ApiError(GameError);

impl From<GameError> for ApiError {
    fn from(e: GameError) -> Self {
        ApiError(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(GameError::BadRequest(e.body_text()))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            GameError::UnknownSession(_) => StatusCode::NOT_FOUND,
            GameError::AlreadyAnswered(_) => StatusCode::CONFLICT,
            GameError::BadRequest(_) => StatusCode::BAD_REQUEST,
            GameError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub rater_id: String,
    #[serde(default)]
    pub movie_ids: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub total_scenes: usize,
}

fn poisoned() -> ApiError {
    ApiError(GameError::Storage("session store lock poisoned".into()))
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

async fn movies(State(store): State<SharedStore>) -> ApiResult<Vec<String>> {
    let store = store.read().map_err(|_| poisoned())?;
    Ok(Json(store.catalog().movie_ids().map(str::to_string).collect()))
}

async fn create_session(
    State(store): State<SharedStore>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let Json(req) = body?;
    let mut store = store.write().map_err(|_| poisoned())?;
    let session_id = store.create(req.rater_id, req.movie_ids)?;
    let total_scenes = store.get(&session_id)?.len();
    Ok((StatusCode::CREATED, Json(SessionCreated { session_id, total_scenes })))
}

async fn next_scene(State(store): State<SharedStore>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let store = store.read().map_err(|_| poisoned())?;
    let view = store.get(&id)?.next(store.catalog())?;
    Ok(Json(view).into_response())
}

async fn revisit_scene(
    State(store): State<SharedStore>,
    UrlPath((id, position)): UrlPath<(String, usize)>,
) -> Result<Response, ApiError> {
    let store = store.read().map_err(|_| poisoned())?;
    let scene = store.get(&id)?.revisit(position, store.catalog())?;
    Ok(Json(scene).into_response())
}

async fn guess(
    State(store): State<SharedStore>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<GuessRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let mut store = store.write().map_err(|_| poisoned())?;
    let outcome = store.guess(&id, req)?;
    Ok(Json(outcome).into_response())
}

async fn report(State(store): State<SharedStore>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let store = store.read().map_err(|_| poisoned())?;
    Ok(Json(store.get(&id)?.report()).into_response())
}

pub fn router(store: SessionStore) -> Router {
    let shared: SharedStore = Arc::new(RwLock::new(store));
    Router::new()
        .route("/", get(index))
        .route("/api/movies", get(movies))
        .route("/api/session", post(create_session))
        .route("/api/session/{id}/next", get(next_scene))
        .route("/api/session/{id}/scene/{position}", get(revisit_scene))
        .route("/api/session/{id}/guess", post(guess))
        .route("/api/session/{id}/report", get(report))
        .with_state(shared)
}

/// Tasks of every split, restricted to `movies` when non-empty.
pub fn select_tasks(all: Vec<Task>, movies: &[String]) -> CliResult<Vec<Task>> {
    if movies.is_empty() {
        return Ok(all);
    }
    let wanted: BTreeSet<&str> = movies.iter().map(String::as_str).collect();
    let known: BTreeSet<&str> = all.iter().map(|t| t.movie_id.as_str()).collect();
    if let Some(m) = wanted.iter().find(|m| !known.contains(*m)) {
        return Err(CliError::Usage(format!("movie {m:?} is not in the benchmark")));
    }
    Ok(all
        .into_iter()
        .filter(|t| wanted.contains(t.movie_id.as_str()))
        .collect())
}

pub fn serve(args: &ServeArgs, root: &Path) -> CliResult<()> {
    let bench = read_benchmark(&default_benchmark(root, &args.benchmark))?;
    let all: Vec<Task> = bench.all_tasks().cloned().collect();
    let catalog = Catalog::new(select_tasks(all, &args.movies)?);
    if catalog.is_empty() {
        return Err(CliError::Usage("no movies to serve".into()));
    }
    let sessions = args.sessions.clone().unwrap_or_else(|| root.join("sessions"));
    let store = SessionStore::open(catalog, &sessions).map_err(|e| CliError::Usage(e.to_string()))?;
    let app = router(store);
    let addr = format!("{}:{}", args.host, args.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Usage(format!("cannot bind {addr}: {e}")))?;
        log::info!("serving on http://{addr}/ with session logs in {}", sessions.display());
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Internal(e.to_string()))
    })
}
