//! Serves the mock scorer over the same wire protocol the HTTP client
//! speaks, so end-to-end runs can exercise real request plumbing offline.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use tiny_http::{Header, Method, Response, Server};

use crate::llm::mock::MockBackend;
use crate::llm::wire::{
    Choice, CompletionRequest, CompletionResponse, ErrorBody, LogprobsPayload,
};
use crate::llm::{Backend, ClientError};
use crate::rng::sha256_hex;

/// Handle to a running mock server; shuts the worker down when dropped.
pub struct MockServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn json_header() -> Header {
    Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header")
}

fn error_response(status: u16, kind: &str, message: &str) -> Response<std::io::Cursor<Vec<u8>>> {
    let body = serde_json::to_string(&ErrorBody::new(kind, message)).expect("error body");
    Response::from_string(body).with_status_code(status).with_header(json_header())
}

fn completion_response(
    backend: &MockBackend,
    request: &CompletionRequest,
) -> Result<CompletionResponse, ClientError> {
    let scored = backend.complete(&request.prompt)?;
    let keep = (request.logprobs as usize).min(scored.top.len());
    let kept = &scored.top[..keep];
    let table: BTreeMap<String, f64> = kept.iter().cloned().collect();
    let (first_token, first_lp) = kept
        .first()
        .cloned()
        .unwrap_or_else(|| (String::new(), f64::NEG_INFINITY));
    Ok(CompletionResponse {
        id: format!("cmpl-mock-{}", &sha256_hex(request.prompt.as_bytes())[..12]),
        object: "text_completion".to_string(),
        model: request.model.clone(),
        choices: vec![Choice {
            text: first_token.clone(),
            index: 0,
            logprobs: Some(LogprobsPayload {
                tokens: vec![first_token],
                token_logprobs: vec![first_lp],
                top_logprobs: vec![table],
            }),
            finish_reason: "length".to_string(),
        }],
    })
}

fn handle(backend: &MockBackend, mut request: tiny_http::Request) {
    let response = match (request.method().clone(), request.url().to_string()) {
        (Method::Post, url) if url == "/v1/completions" => {
            let mut body = String::new();
            if request.as_reader().read_to_string(&mut body).is_err() {
                error_response(400, "invalid_request_error", "unreadable body")
            } else {
                match serde_json::from_str::<CompletionRequest>(&body) {
                    Err(e) => error_response(
                        400,
                        "invalid_request_error",
                        &format!("malformed request: {e}"),
                    ),
                    Ok(req) => match completion_response(backend, &req) {
                        Ok(resp) => {
                            let body = serde_json::to_string(&resp).expect("response body");
                            Response::from_string(body)
                                .with_status_code(200)
                                .with_header(json_header())
                        }
                        Err(err) => {
                            error_response(400, "invalid_request_error", &err.to_string())
                        }
                    },
                }
            }
        }
        (Method::Get, url) if url == "/health" => {
            Response::from_string("ok").with_status_code(200)
        }
        _ => error_response(404, "not_found", "unknown route"),
    };
    let _ = request.respond(response);
}

/// Binds `addr` (e.g. "127.0.0.1:0") and serves the mock scorer on a
/// background thread until the handle is dropped or shut down.
pub fn serve_mock(addr: &str, backend: MockBackend) -> Result<MockServer, ClientError> {
    let server = Server::http(addr).map_err(|e| ClientError::Transport(e.to_string()))?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| ClientError::Transport("server has no tcp address".into()))?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = Arc::clone(&stop);
    let handle = std::thread::spawn(move || {
        while !stop_flag.load(Ordering::Relaxed) {
            match server.recv_timeout(Duration::from_millis(100)) {
                Ok(Some(request)) => handle(&backend, request),
                Ok(None) => continue,
                Err(_) => break,
            }
        }
    });
    Ok(MockServer { addr, stop, handle: Some(handle) })
}
