//! In-process chat-completion server for tests and offline demos.
//!
//! Speaks the same wire format as a real endpoint. Replies come from a
//! script queue first, then from a responder closure. The server can inject
//! failures and latency, and counts hits and concurrent requests.
//!
//! ```
//! use clinprompt::llm::{ChatMessage, ClientConfig, InferenceRequest, LlmClient, StubServer};
//!
//! let stub = StubServer::fixed("Entailment");
//! let client = LlmClient::new(ClientConfig {
//!     base_url: stub.base_url(),
//!     ..Default::default()
//! })
//! .unwrap();
//! let req = InferenceRequest::new("any-model", vec![ChatMessage::user("premise ...")]);
//! assert_eq!(client.complete(&req).unwrap().text, "Entailment");
//! assert_eq!(stub.hits(), 1);
//! ```

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use tiny_http::{Header, Response, Server};

use super::wire::{
    ChatCompletionRequest, ChatCompletionResponse, Choice, ChoiceLogprobs, ResponseMessage,
    TokenLogprob, TopLogprob,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StubReply {
    pub content: String,
    /// First-token alternatives `(token, logprob)`.
    pub top_logprobs: Option<Vec<(String, f64)>>,
    pub status: u16,
}

impl StubReply {
    pub fn text(content: impl Into<String>) -> Self {
        StubReply {
            content: content.into(),
            top_logprobs: None,
            status: 200,
        }
    }

    pub fn with_logprobs(mut self, alternatives: Vec<(String, f64)>) -> Self {
        self.top_logprobs = Some(alternatives);
        self
    }

    pub fn error(status: u16) -> Self {
        StubReply {
            content: String::new(),
            top_logprobs: None,
            status,
        }
    }

    fn body(&self) -> String {
        let logprobs = self.top_logprobs.as_ref().map(|alts| {
            let top: Vec<TopLogprob> = alts
                .iter()
                .map(|(token, logprob)| TopLogprob {
                    token: token.clone(),
                    logprob: *logprob,
                })
                .collect();
            let first = top.first().cloned().unwrap_or(TopLogprob {
                token: self.content.clone(),
                logprob: 0.0,
            });
            ChoiceLogprobs {
                content: Some(vec![TokenLogprob {
                    token: first.token,
                    logprob: first.logprob,
                    top_logprobs: top,
                }]),
            }
        });
        serde_json::to_string(&ChatCompletionResponse {
            choices: vec![Choice {
                message: ResponseMessage {
                    role: Some("assistant".into()),
                    content: Some(self.content.clone()),
                },
                logprobs,
            }],
        })
        .expect("stub reply serializes")
    }
}

pub type Responder = dyn Fn(&ChatCompletionRequest) -> StubReply + Send + Sync;

struct StubState {
    responder: Box<Responder>,
    script: Mutex<VecDeque<StubReply>>,
    latency: Duration,
    fail_remaining: AtomicUsize,
    fail_status: u16,
    hits: AtomicUsize,
    in_flight: AtomicUsize,
    high_water: AtomicUsize,
    requests: Mutex<Vec<ChatCompletionRequest>>,
}

pub struct StubBuilder {
    responder: Box<Responder>,
    script: VecDeque<StubReply>,
    latency: Duration,
    fail_first: usize,
    fail_status: u16,
}

impl Default for StubBuilder {
    fn default() -> Self {
        StubBuilder {
            responder: Box::new(|_| StubReply::text("")),
            script: VecDeque::new(),
            latency: Duration::ZERO,
            fail_first: 0,
            fail_status: 503,
        }
    }
}

impl StubBuilder {
    pub fn responder(
        mut self,
        f: impl Fn(&ChatCompletionRequest) -> StubReply + Send + Sync + 'static,
    ) -> Self {
        self.responder = Box::new(f);
        self
    }

    /// Replies consumed in order before the responder is consulted.
    pub fn script(mut self, replies: impl IntoIterator<Item = StubReply>) -> Self {
        self.script.extend(replies);
        self
    }

    pub fn latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Answer the first `n` requests with `status`.
    pub fn fail_first(mut self, n: usize, status: u16) -> Self {
        self.fail_first = n;
        self.fail_status = status;
        self
    }

    pub fn start(self) -> Result<StubServer> {
        let server = Server::http("127.0.0.1:0").map_err(|e| Error::Transport {
            attempts: 0,
            message: format!("stub bind failed: {e}"),
        })?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .expect("bound to an IP address");
        let server = Arc::new(server);
        let state = Arc::new(StubState {
            responder: self.responder,
            script: Mutex::new(self.script),
            latency: self.latency,
            fail_remaining: AtomicUsize::new(self.fail_first),
            fail_status: self.fail_status,
            hits: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            high_water: AtomicUsize::new(0),
            requests: Mutex::new(Vec::new()),
        });
        let acceptor = {
            let server = Arc::clone(&server);
            let state = Arc::clone(&state);
            std::thread::spawn(move || {
                for request in server.incoming_requests() {
                    let state = Arc::clone(&state);
                    std::thread::spawn(move || handle(&state, request));
                }
            })
        };
        Ok(StubServer {
            base_url: format!("http://127.0.0.1:{port}"),
            server,
            state,
            acceptor: Some(acceptor),
        })
    }
}

fn handle(state: &StubState, mut request: tiny_http::Request) {
    let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.high_water.fetch_max(now, Ordering::SeqCst);
    std::thread::sleep(state.latency);
    state.hits.fetch_add(1, Ordering::SeqCst);

    let (status, body) = respond(state, &mut request);
    state.in_flight.fetch_sub(1, Ordering::SeqCst);
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let response = Response::from_string(body)
        .with_status_code(status)
        .with_header(header);
    let _ = request.respond(response);
}

fn respond(state: &StubState, request: &mut tiny_http::Request) -> (u16, String) {
    if request.url() != "/v1/chat/completions" || request.method() != &tiny_http::Method::Post {
        return (404, r#"{"error":"not found"}"#.into());
    }
    let failing = state
        .fail_remaining
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok();
    if failing {
        return (state.fail_status, r#"{"error":"injected failure"}"#.into());
    }
    let mut raw = String::new();
    if request.as_reader().read_to_string(&mut raw).is_err() {
        return (400, r#"{"error":"unreadable body"}"#.into());
    }
    let parsed: ChatCompletionRequest = match serde_json::from_str(&raw) {
        Ok(p) => p,
        Err(e) => return (400, serde_json::json!({ "error": e.to_string() }).to_string()),
    };
    state
        .requests
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .push(parsed.clone());
    let scripted = state
        .script
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .pop_front();
    let reply = scripted.unwrap_or_else(|| (state.responder)(&parsed));
    if reply.status != 200 {
        return (reply.status, r#"{"error":"scripted failure"}"#.into());
    }
    (200, reply.body())
}

/// Running stub; shuts down on drop.
pub struct StubServer {
    base_url: String,
    server: Arc<Server>,
    state: Arc<StubState>,
    acceptor: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn builder() -> StubBuilder {
        StubBuilder::default()
    }

    /// Stub that always answers `content`.
    pub fn fixed(content: &str) -> StubServer {
        let content = content.to_string();
        StubServer::builder()
            .responder(move |_| StubReply::text(content.clone()))
            .start()
            .expect("stub starts")
    }

    pub fn base_url(&self) -> String {
        self.base_url.clone()
    }

    /// Requests received, including injected failures.
    pub fn hits(&self) -> usize {
        self.state.hits.load(Ordering::SeqCst)
    }

    /// Largest number of requests seen in progress at the same time.
    pub fn high_water_mark(&self) -> usize {
        self.state.high_water.load(Ordering::SeqCst)
    }

    /// Successfully parsed request bodies, in arrival order.
    pub fn requests(&self) -> Vec<ChatCompletionRequest> {
        self.state
            .requests
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}
