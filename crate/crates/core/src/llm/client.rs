//! Blocking chat-completion client with caching, retries, in-flight request
//! sharing and a cap on concurrent requests.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::cache::{CachedResponse, ResponseCache};
use super::wire::{ChatCompletionRequest, ChatCompletionResponse, ChatMessage, TokenLogprob};
use crate::error::{Error, Result};

pub const ENV_BASE_URL: &str = "CLINPROMPT_BASE_URL";
pub const ENV_API_KEY: &str = "CLINPROMPT_API_KEY";
pub const ENV_PARALLELISM: &str = "CLINPROMPT_PARALLELISM";
pub const ENV_CACHE_DIR: &str = "CLINPROMPT_CACHE_DIR";

const COMPLETIONS_PATH: &str = "/v1/chat/completions";
const TOP_LOGPROBS: u32 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub want_logprobs: bool,
    /// Extra cache-key material. Set it to keep sampled repetitions apart.
    pub cache_tag: Option<String>,
}

impl InferenceRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        InferenceRequest {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_new_tokens: 16,
            want_logprobs: false,
            cache_tag: None,
        }
    }

    /// Hex SHA-256 over the content that determines the response.
    pub fn cache_key(&self) -> String {
        #[derive(Serialize)]
        struct KeyMaterial<'a> {
            model: &'a str,
            messages: &'a [ChatMessage],
            temperature: f64,
            max_new_tokens: u32,
            want_logprobs: bool,
            cache_tag: Option<&'a str>,
        }
        let material = KeyMaterial {
            model: &self.model,
            messages: &self.messages,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            want_logprobs: self.want_logprobs,
            cache_tag: self.cache_tag.as_deref(),
        };
        let bytes = serde_json::to_vec(&material).expect("key material serializes");
        hex::encode(Sha256::digest(bytes))
    }

    fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::Precondition("inference request has no messages".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Precondition(format!(
                "temperature {} is negative",
                self.temperature
            )));
        }
        Ok(())
    }

    fn wire(&self) -> ChatCompletionRequest {
        ChatCompletionRequest {
            model: self.model.clone(),
            messages: self.messages.clone(),
            temperature: self.temperature,
            max_tokens: self.max_new_tokens,
            logprobs: self.want_logprobs,
            top_logprobs: self.want_logprobs.then_some(TOP_LOGPROBS),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResponse {
    pub text: String,
    pub logprobs: Option<Vec<TokenLogprob>>,
    pub latency_ms: u64,
    pub from_cache: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    /// Server root; `/v1/chat/completions` is appended.
    pub base_url: String,
    pub api_key: Option<String>,
    /// Most requests allowed on the wire at once.
    pub parallelism: usize,
    pub cache_dir: Option<PathBuf>,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub backoff_max: Duration,
    pub timeout: Duration,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            base_url: "http://127.0.0.1:8000".into(),
            api_key: None,
            parallelism: 4,
            cache_dir: None,
            max_retries: 3,
            backoff_base: Duration::from_millis(200),
            backoff_max: Duration::from_secs(10),
            timeout: Duration::from_secs(120),
        }
    }
}

impl ClientConfig {
    /// Defaults overlaid with the `CLINPROMPT_*` environment variables.
    pub fn from_env() -> Self {
        let mut cfg = ClientConfig::default();
        if let Ok(url) = std::env::var(ENV_BASE_URL) {
            cfg.base_url = url;
        }
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        if let Some(n) = std::env::var(ENV_PARALLELISM).ok().and_then(|v| v.parse().ok()) {
            cfg.parallelism = n;
        }
        if let Ok(dir) = std::env::var(ENV_CACHE_DIR) {
            cfg.cache_dir = Some(dir.into());
        }
        cfg
    }

    fn backoff(&self, failed_attempts: u32) -> Duration {
        let factor = 1u32.checked_shl(failed_attempts.saturating_sub(1)).unwrap_or(u32::MAX);
        self.backoff_base.saturating_mul(factor).min(self.backoff_max)
    }
}

/// Counting semaphore.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Permits {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// A request some thread is already sending; others wait on it.
#[derive(Default)]
struct Flight {
    outcome: Mutex<Option<std::result::Result<CachedResponse, String>>>,
    cv: Condvar,
}

impl Flight {
    fn finish(&self, outcome: std::result::Result<CachedResponse, String>) {
        *self.outcome.lock().unwrap_or_else(|p| p.into_inner()) = Some(outcome);
        self.cv.notify_all();
    }

    fn wait(&self) -> std::result::Result<CachedResponse, String> {
        let mut guard = self.outcome.lock().unwrap_or_else(|p| p.into_inner());
        loop {
            if let Some(outcome) = guard.as_ref() {
                return outcome.clone();
            }
            guard = self.cv.wait(guard).unwrap_or_else(|p| p.into_inner());
        }
    }
}

pub struct LlmClient {
    config: ClientConfig,
    agent: ureq::Agent,
    cache: ResponseCache,
    in_flight: Mutex<HashMap<String, Arc<Flight>>>,
    permits: Permits,
    attempts: AtomicU64,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("base_url", &self.config.base_url)
            .field("parallelism", &self.config.parallelism)
            .finish_non_exhaustive()
    }
}

enum Attempt {
    Done(ChatCompletionResponse),
    Retry(Error),
    Fatal(Error),
}

impl LlmClient {
    pub fn new(config: ClientConfig) -> Result<Self> {
        let cache = match &config.cache_dir {
            Some(dir) => ResponseCache::on_disk(dir)?,
            None => ResponseCache::in_memory(),
        };
        let agent = ureq::AgentBuilder::new()
            .timeout(config.timeout)
            .max_idle_connections_per_host(config.parallelism.max(1))
            .build();
        Ok(LlmClient {
            permits: Permits::new(config.parallelism),
            config,
            agent,
            cache,
            in_flight: Mutex::new(HashMap::new()),
            attempts: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    /// HTTP attempts made so far, retries included.
    pub fn network_attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Cached, de-duplicated completion.
    pub fn complete(&self, req: &InferenceRequest) -> Result<InferenceResponse> {
        req.validate()?;
        let started = Instant::now();
        let key = req.cache_key();
        let served = |hit: CachedResponse| InferenceResponse {
            text: hit.text,
            logprobs: hit.logprobs,
            latency_ms: started.elapsed().as_millis() as u64,
            from_cache: true,
        };
        if let Some(hit) = self.cache.get(&key) {
            return Ok(served(hit));
        }

        let (flight, leader) = {
            let mut map = self.in_flight.lock().unwrap_or_else(|p| p.into_inner());
            match map.get(&key) {
                Some(f) => (Arc::clone(f), false),
                None => {
                    let f = Arc::new(Flight::default());
                    map.insert(key.clone(), Arc::clone(&f));
                    (f, true)
                }
            }
        };
        if !leader {
            return flight.wait().map(served).map_err(|message| Error::Transport {
                attempts: 0,
                message: format!("shared in-flight request failed: {message}"),
            });
        }

        // The previous leader may have finished between our cache check and
        // taking the in-flight slot.
        let outcome = match self.cache.get(&key) {
            Some(hit) => Ok(hit),
            None => self.fetch(req).and_then(|fresh| {
                self.cache.put(&key, &fresh)?;
                Ok(fresh)
            }),
        };
        flight.finish(outcome.as_ref().map(Clone::clone).map_err(ToString::to_string));
        self.in_flight
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .remove(&key);

        outcome.map(|r| InferenceResponse {
            text: r.text,
            logprobs: r.logprobs,
            latency_ms: started.elapsed().as_millis() as u64,
            from_cache: false,
        })
    }

    /// Always goes to the network; used for timing measurements.
    pub fn complete_uncached(&self, req: &InferenceRequest) -> Result<InferenceResponse> {
        req.validate()?;
        let started = Instant::now();
        let r = self.fetch(req)?;
        Ok(InferenceResponse {
            text: r.text,
            logprobs: r.logprobs,
            latency_ms: started.elapsed().as_millis() as u64,
            from_cache: false,
        })
    }

    fn fetch(&self, req: &InferenceRequest) -> Result<CachedResponse> {
        let body = req.wire();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = self.permits.acquire();
                self.attempts.fetch_add(1, Ordering::SeqCst);
                self.send_once(&body, attempt)
            };
            match outcome {
                Attempt::Done(resp) => return extract(resp),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) if attempt > self.config.max_retries => return Err(e),
                Attempt::Retry(e) => {
                    let wait = self.config.backoff(attempt);
                    log::debug!("attempt {attempt} failed ({e}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
            }
        }
    }

    fn send_once(&self, body: &ChatCompletionRequest, attempt: u32) -> Attempt {
        let url = format!("{}{COMPLETIONS_PATH}", self.config.base_url.trim_end_matches('/'));
        let mut call = self.agent.post(&url);
        if let Some(key) = &self.config.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        match call.send_json(body) {
            Ok(resp) => match resp.into_string() {
                Ok(text) => match serde_json::from_str(&text) {
                    Ok(parsed) => Attempt::Done(parsed),
                    Err(e) => Attempt::Fatal(Error::MalformedResponse(format!("{e}: {text}"))),
                },
                Err(e) => Attempt::Retry(Error::Transport {
                    attempts: attempt,
                    message: format!("reading body: {e}"),
                }),
            },
            Err(ureq::Error::Status(status, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                let err = Error::Http { status, body };
                if status == 429 || status >= 500 {
                    Attempt::Retry(err)
                } else {
                    Attempt::Fatal(err)
                }
            }
            Err(ureq::Error::Transport(t)) => Attempt::Retry(Error::Transport {
                attempts: attempt,
                message: t.to_string(),
            }),
        }
    }
}

fn extract(resp: ChatCompletionResponse) -> Result<CachedResponse> {
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| Error::MalformedResponse("no choices".into()))?;
    let text = choice
        .message
        .content
        .ok_or_else(|| Error::MalformedResponse("choice without content".into()))?;
    Ok(CachedResponse {
        text,
        logprobs: choice.logprobs.and_then(|l| l.content),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn backoff_doubles_up_to_cap() {
        let cfg = ClientConfig {
            backoff_base: Duration::from_millis(100),
            backoff_max: Duration::from_millis(350),
            ..Default::default()
        };
        assert_eq!(cfg.backoff(1), Duration::from_millis(100));
        assert_eq!(cfg.backoff(2), Duration::from_millis(200));
        assert_eq!(cfg.backoff(3), Duration::from_millis(350));
        assert_eq!(cfg.backoff(40), Duration::from_millis(350));
    }

    #[test]
    fn invalid_requests_are_refused() {
        let client = LlmClient::new(ClientConfig::default()).unwrap();
        let empty = InferenceRequest::new("m", vec![]);
        assert!(matches!(client.complete(&empty), Err(Error::Precondition(_))));
        let mut hot = InferenceRequest::new("m", vec![ChatMessage::user("x")]);
        hot.temperature = -1.0;
        assert!(matches!(client.complete(&hot), Err(Error::Precondition(_))));
    }

    #[test]
    fn cache_key_covers_every_field() {
        let base = InferenceRequest::new("m", vec![ChatMessage::user("hello")]);
        let mut variants = vec![base.clone()];
        let mut v = base.clone();
        v.model = "m2".into();
        variants.push(v);
        let mut v = base.clone();
        v.temperature = 0.5;
        variants.push(v);
        let mut v = base.clone();
        v.max_new_tokens = 17;
        variants.push(v);
        let mut v = base.clone();
        v.want_logprobs = true;
        variants.push(v);
        let mut v = base.clone();
        v.cache_tag = Some("rep1".into());
        variants.push(v);
        let mut v = base.clone();
        v.messages = vec![ChatMessage::system("hello")];
        variants.push(v);
        let keys: HashSet<_> = variants.iter().map(InferenceRequest::cache_key).collect();
        assert_eq!(keys.len(), variants.len());
        assert_eq!(base.cache_key(), base.clone().cache_key());
    }

    proptest! {
        #[test]
        fn distinct_prompts_get_distinct_keys(
            prompts in proptest::collection::hash_set("\\PC{0,40}", 2..40)
        ) {
            let keys: HashSet<_> = prompts
                .iter()
                .map(|p| InferenceRequest::new("m", vec![ChatMessage::user(p.clone())]).cache_key())
                .collect();
            prop_assert_eq!(keys.len(), prompts.len());
        }
    }
}
