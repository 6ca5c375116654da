use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use super::{Ack, ApiError, ServiceState};

type Shared = Arc<ServiceState>;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body())).into_response()
    }
}

/// Parses a JSON body, reporting the path of the first offending field.
/// An empty body stands for `{}`.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let text = if body.iter().all(u8::is_ascii_whitespace) { &b"{}"[..] } else { &body[..] };
    let de = &mut serde_json::Deserializer::from_slice(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError::Invalid { field: (path != ".").then_some(path), message: e.into_inner().to_string() }
    })
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/session", post(create))
        .route("/session/:id", axum::routing::delete(delete))
        .route("/session/:id/state", get(state_of))
        .route("/session/:id/action", post(action))
        .route("/session/:id/keyframe", post(keyframe))
        .route("/session/:id/reset", post(reset))
        .route("/session/:id/imitate", post(imitate))
        .route("/session/:id/demo", get(demo).put(reorder))
        .route("/session/:id/events", get(events))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends. Calls `on_bound` with
/// the bound address first (useful with port 0).
pub async fn serve(state: Shared, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn create(State(s): State<Shared>) -> Response {
    Json(s.create_session()).into_response()
}

async fn delete(State(s): State<Shared>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    s.delete_session(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn state_of(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(s.state(&id)?).into_response())
}

async fn action(State(s): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    s.session(&id)?;
    let body = parse(&body)?;
    let out = tokio::task::spawn_blocking(move || s.action(&id, body)).await.expect("action task");
    Ok(Json(out?).into_response())
}

async fn keyframe(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(s.keyframe(&id)?).into_response())
}

async fn reset(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(s.reset(&id)?).into_response())
}

async fn imitate(State(s): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    s.session(&id)?;
    let body = parse(&body)?;
    Ok((StatusCode::ACCEPTED, Json(s.imitate(&id, body)?)).into_response())
}

async fn demo(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(s.demo(&id)?).into_response())
}

async fn reorder(State(s): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    s.session(&id)?;
    let body = parse(&body)?;
    Ok(Json(s.reorder(&id, &body)?).into_response())
}

#[derive(Deserialize)]
struct EventsQuery {
    since: Option<u64>,
}

async fn events(
    State(s): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let session = s.session(&id)?;
    Ok(ws.on_upgrade(move |socket| stream(socket, session, q.since)))
}

/// Replays everything after `since` (or after the last ack), then follows
/// the live log. Incoming `{"ack": seq}` messages move the ack mark.
async fn stream(mut socket: WebSocket, session: Arc<super::Session>, since: Option<u64>) {
    let mut rx = session.subscribe();
    let mut sent = since.unwrap_or_else(|| session.acked());
    loop {
        for ev in session.events_after(sent) {
            let text = serde_json::to_string(&ev).expect("event serializes");
            if socket.send(Message::Text(text)).await.is_err() {
                return;
            }
            sent = ev.seq;
        }
        if session.is_closed() {
            let _ = socket.send(Message::Close(None)).await;
            return;
        }
        tokio::select! {
            changed = rx.changed() => {
                if changed.is_err() {
                    return;
                }
            }
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(t))) => {
                    if let Ok(a) = serde_json::from_str::<Ack>(&t) {
                        session.ack(a.ack);
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}
