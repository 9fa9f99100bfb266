//! Local HTTP control API for a running crawl: status, live events, captcha
//! intervention, pause/resume/stop and manual cookie injection.

use std::convert::Infallible;
use std::net::SocketAddr;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use indexmap::IndexMap;
use serde::Deserialize;
use serde_json::json;
use tokio::task::JoinHandle;
use tokio_stream::wrappers::BroadcastStream;

use crate::captcha::{ChallengeSolution, SolutionError};
use crate::config::CookieSpec;
use crate::engine::{Command, CrawlControl};

#[derive(Debug, Deserialize)]
struct CookiePair {
    name: String,
    value: String,
}

#[derive(Debug, Deserialize)]
struct SolutionBody {
    #[serde(default)]
    fields: Option<IndexMap<String, String>>,
    #[serde(default)]
    cookie: Option<CookiePair>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Action {
    Pause,
    Resume,
    Stop,
}

#[derive(Debug, Deserialize)]
struct ControlBody {
    action: Action,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn ok() -> Response {
    Json(json!({ "ok": true })).into_response()
}

async fn status(State(control): State<CrawlControl>) -> Response {
    Json(control.status()).into_response()
}

async fn challenges(State(control): State<CrawlControl>) -> Response {
    Json(control.registry().pending()).into_response()
}

async fn events(State(control): State<CrawlControl>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    // Lagging subscribers lose events rather than stalling the crawl.
    let stream = BroadcastStream::new(control.subscribe()).filter_map(|item| async move {
        let event = item.ok()?;
        let data = serde_json::to_string(&event).ok()?;
        Some(Ok(Event::default().data(data)))
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

async fn solve(
    State(control): State<CrawlControl>,
    Path(id): Path<String>,
    body: Result<Json<SolutionBody>, JsonRejection>,
) -> Response {
    let Json(body) = match body {
        Ok(body) => body,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let Some(challenge) = control.registry().get(&id) else {
        return error(StatusCode::NOT_FOUND, SolutionError::Unknown(id).to_string());
    };
    let solution = match (body.fields, body.cookie) {
        (Some(fields), None) if !fields.is_empty() => ChallengeSolution::with_fields(&id, fields),
        (None, Some(pair)) if !pair.name.is_empty() => {
            ChallengeSolution::with_cookie(&id, CookieSpec::new(pair.name, pair.value, challenge.url.host()))
        }
        _ => return error(StatusCode::BAD_REQUEST, "send either non-empty `fields` or a `cookie`"),
    };
    match control.registry().submit(solution) {
        Ok(()) => ok(),
        Err(e @ SolutionError::Unknown(_)) => error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e @ SolutionError::Closed(..)) => error(StatusCode::CONFLICT, e.to_string()),
        Err(e @ SolutionError::Invalid(_)) => error(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

async fn control_action(State(control): State<CrawlControl>, body: Result<Json<ControlBody>, JsonRejection>) -> Response {
    match body {
        Ok(Json(ControlBody { action })) => {
            control.send(match action {
                Action::Pause => Command::Pause,
                Action::Resume => Command::Resume,
                Action::Stop => Command::Stop,
            });
            ok()
        }
        Err(e) => error(StatusCode::BAD_REQUEST, e.body_text()),
    }
}

async fn add_cookie(State(control): State<CrawlControl>, body: Result<Json<CookieSpec>, JsonRejection>) -> Response {
    let cookie = match body {
        Ok(Json(cookie)) => cookie,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    if let Err(e) = cookie.check() {
        return error(StatusCode::BAD_REQUEST, e.to_string());
    }
    control.send(Command::AddCookie(cookie));
    ok()
}

pub fn router(control: CrawlControl) -> Router {
    Router::new()
        .route("/api/status", get(status))
        .route("/api/events", get(events))
        .route("/api/challenges", get(challenges))
        .route("/api/challenges/{id}/solution", post(solve))
        .route("/api/control", post(control_action))
        .route("/api/cookies", post(add_cookie))
        .with_state(control)
}

/// The API bound to a local port. Stops when dropped.
#[derive(Debug)]
pub struct ApiServer {
    addr: SocketAddr,
    task: JoinHandle<()>,
}

impl ApiServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }
}

impl Drop for ApiServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Serve the API on `127.0.0.1:port` (`0` picks a free port).
pub async fn serve(control: CrawlControl, port: u16) -> std::io::Result<ApiServer> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    let addr = listener.local_addr()?;
    let app = router(control);
    let task = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!(error = %e, "control api stopped");
        }
    });
    Ok(ApiServer { addr, task })
}
