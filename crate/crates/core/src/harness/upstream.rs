//! Echo upstreams: an HTTP app that dumps what it received and a raw TCP
//! echo for tunnels.

use std::net::SocketAddr;

use axum::body::{Body, Bytes};
use axum::extract::Path;
use axum::http::{HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures::stream;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio_util::sync::CancellationToken;

const CHUNK: usize = 64 * 1024;

/// What the echo app saw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EchoDump {
    pub method: String,
    pub path: String,
    pub query: Option<String>,
    /// In arrival order, duplicates preserved.
    pub headers: Vec<(String, String)>,
    pub header_bytes: usize,
    pub body_len: usize,
}

impl EchoDump {
    pub fn header_values(&self, name: &str) -> Vec<&str> {
        self.headers
            .iter()
            .filter(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
            .collect()
    }

    pub fn cookie_names(&self) -> Vec<String> {
        self.header_values("cookie")
            .iter()
            .flat_map(|v| v.split(';'))
            .filter_map(|p| p.split_once('=').map(|(k, _)| k.trim().to_string()))
            .collect()
    }
}

async fn echo(method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> Json<EchoDump> {
    let pairs: Vec<(String, String)> = headers
        .iter()
        .map(|(k, v)| (k.as_str().to_string(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
        .collect();
    Json(EchoDump {
        method: method.to_string(),
        path: uri.path().to_string(),
        query: uri.query().map(str::to_string),
        header_bytes: pairs.iter().map(|(k, v)| k.len() + v.len() + 4).sum(),
        headers: pairs,
        body_len: body.len(),
    })
}

async fn bytes(Path(n): Path<usize>) -> Response {
    let chunks = (0..n).step_by(CHUNK).map(move |start| {
        let len = CHUNK.min(n - start);
        Ok::<_, std::io::Error>(Bytes::from(vec![b'z'; len]))
    });
    Response::builder()
        .header("content-type", "application/octet-stream")
        .body(Body::from_stream(stream::iter(chunks)))
        .expect("static response")
}

async fn status(Path(code): Path<u16>) -> Response {
    let code = StatusCode::from_u16(code).unwrap_or(StatusCode::BAD_REQUEST);
    (code, format!("status {}", code.as_u16())).into_response()
}

pub fn echo_router() -> Router {
    Router::new()
        .route("/bytes/{n}", get(bytes))
        .route("/status/{code}", get(status))
        .fallback(echo)
}

/// Raw TCP echo server.
#[derive(Debug)]
pub struct TcpEcho {
    addr: SocketAddr,
    stop: CancellationToken,
}

impl TcpEcho {
    pub async fn bind(addr: SocketAddr) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let stop = CancellationToken::new();
        let token = stop.clone();
        tokio::spawn(async move {
            loop {
                let accepted = tokio::select! {
                    _ = token.cancelled() => break,
                    r = listener.accept() => r,
                };
                let Ok((mut sock, _)) = accepted else { continue };
                let token = token.clone();
                tokio::spawn(async move {
                    let (mut r, mut w) = sock.split();
                    tokio::select! {
                        _ = tokio::io::copy(&mut r, &mut w) => {}
                        _ = token.cancelled() => {}
                    }
                });
            }
        });
        Ok(Self { addr, stop })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(&self) {
        self.stop.cancel();
    }
}

impl Drop for TcpEcho {
    fn drop(&mut self) {
        self.stop.cancel();
    }
}
