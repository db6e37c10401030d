//! Minimal HTTP completion client.
//!
//! Request body (JSON): `{"model": .., "prompt": .., "temperature": ..,
//! "max_tokens": ..}`. Response body (JSON): `{"text": ".."}`; an
//! OpenAI-style `{"choices": [{"text": ".."}]}` is accepted too. Transient
//! failures (timeouts, connection errors, 429 and 5xx statuses) are retried
//! with exponential backoff and jitter; at most `max_in_flight` requests run
//! at once per client (clones share the bound).

use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable that overrides the configured endpoint.
pub const ENDPOINT_ENV: &str = "A2S_LLM_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// First retry delay; doubles (times `backoff_factor`) per attempt.
    pub backoff_base_ms: u64,
    pub backoff_factor: f64,
    /// Extra uniform delay as a fraction of the current backoff.
    pub jitter: f64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: "llama3.1-70b-instruct".into(),
            temperature: 0.7,
            max_tokens: 512,
            timeout_secs: 60.0,
            max_retries: 3,
            max_in_flight: 4,
            backoff_base_ms: 1000,
            backoff_factor: 2.0,
            jitter: 0.25,
        }
    }
}

impl RemoteConfig {
    /// Applies the endpoint override from the environment, if set.
    pub fn with_env_override(mut self) -> Self {
        if let Ok(url) = std::env::var(ENDPOINT_ENV) {
            if !url.trim().is_empty() {
                self.endpoint = url.trim().to_owned();
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), RemoteError> {
        if self.endpoint.trim().is_empty() {
            return Err(RemoteError::Config("remote backend requires an endpoint".into()));
        }
        if self.max_in_flight == 0 {
            return Err(RemoteError::Config("max_in_flight must be at least 1".into()));
        }
        if !(self.timeout_secs > 0.0) || self.backoff_factor < 1.0 || self.jitter < 0.0 {
            return Err(RemoteError::Config("timeout must be positive, backoff_factor ≥ 1, jitter ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RemoteError {
    #[error("request timed out")]
    Timeout,
    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("giving up after {attempts} attempts; last error: {last}")]
    RetryExhausted { attempts: u32, last: Box<RemoteError> },
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("invalid remote configuration: {0}")]
    Config(String),
}

impl RemoteError {
    fn retryable(&self) -> bool {
        match self {
            RemoteError::Timeout | RemoteError::Connect(_) => true,
            RemoteError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// One POST of a JSON body; returns the status code and response body.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, body: &str, timeout: Duration) -> Result<(u16, String), TransportError>;
}

/// Plain HTTP(S) transport.
#[derive(Debug, Default, Clone, Copy)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, body: &str, timeout: Duration) -> Result<(u16, String), TransportError> {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        let mut resp = agent
            .post(url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => TransportError::Timeout,
                other => TransportError::Connect(other.to_string()),
            })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            other => TransportError::Connect(other.to_string()),
        })?;
        Ok((status, text))
    }
}

/// Counting semaphore bounding concurrent requests; records the peak.
#[derive(Debug)]
pub struct InFlightLimiter {
    limit: usize,
    state: Mutex<(usize, usize)>,
    cv: Condvar,
}

pub struct InFlightGuard<'a>(&'a InFlightLimiter);

impl InFlightLimiter {
    pub fn new(limit: usize) -> Self {
        Self { limit: limit.max(1), state: Mutex::new((0, 0)), cv: Condvar::new() }
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut st = self.state.lock().unwrap();
        while st.0 >= self.limit {
            st = self.cv.wait(st).unwrap();
        }
        st.0 += 1;
        st.1 = st.1.max(st.0);
        InFlightGuard(self)
    }

    /// Highest number of simultaneously held permits so far.
    pub fn peak(&self) -> usize {
        self.state.lock().unwrap().1
    }

    pub fn limit(&self) -> usize {
        self.limit
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut st = self.0.state.lock().unwrap();
        st.0 -= 1;
        self.0.cv.notify_one();
    }
}

#[derive(Clone)]
pub struct RemoteClient {
    config: RemoteConfig,
    transport: Arc<dyn Transport>,
    limiter: Arc<InFlightLimiter>,
}

impl fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteClient").field("config", &self.config).finish_non_exhaustive()
    }
}

impl RemoteClient {
    pub fn new(config: RemoteConfig) -> Result<Self, RemoteError> {
        Self::with_transport(config, Arc::new(HttpTransport))
    }

    pub fn with_transport(config: RemoteConfig, transport: Arc<dyn Transport>) -> Result<Self, RemoteError> {
        config.validate()?;
        let limiter = Arc::new(InFlightLimiter::new(config.max_in_flight));
        Ok(Self { config, transport, limiter })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    pub fn limiter(&self) -> &InFlightLimiter {
        &self.limiter
    }

    fn attempt(&self, body: &str) -> Result<String, RemoteError> {
        let _permit = self.limiter.acquire();
        let timeout = Duration::from_secs_f64(self.config.timeout_secs);
        let (status, text) = self.transport.post_json(&self.config.endpoint, body, timeout).map_err(|e| match e {
            TransportError::Timeout => RemoteError::Timeout,
            TransportError::Connect(m) => RemoteError::Connect(m),
        })?;
        if !(200..300).contains(&status) {
            return Err(RemoteError::Status { status, body: text.chars().take(200).collect() });
        }
        parse_completion(&text)
    }

    fn backoff(&self, retry: u32) -> Duration {
        let base = self.config.backoff_base_ms as f64 * self.config.backoff_factor.powi(retry as i32);
        let jitter = if self.config.jitter > 0.0 { rand::thread_rng().gen_range(0.0..=self.config.jitter) } else { 0.0 };
        Duration::from_secs_f64(base * (1.0 + jitter) / 1000.0)
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
}

fn parse_completion(body: &str) -> Result<String, RemoteError> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| RemoteError::BadResponse(e.to_string()))?;
    v.get("text")
        .or_else(|| v.get("choices").and_then(|c| c.get(0)).and_then(|c| c.get("text")))
        .and_then(|t| t.as_str())
        .map(str::to_owned)
        .ok_or_else(|| RemoteError::BadResponse("missing \"text\" field".into()))
}

/// Completion text and the number of HTTP attempts it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

/// Sends one completion request, retrying transient failures up to
/// `max_retries` times.
pub fn llm_complete(client: &RemoteClient, prompt: &str) -> Result<Completion, RemoteError> {
    let cfg = &client.config;
    let body = serde_json::to_string(&CompletionRequest {
        model: &cfg.model,
        prompt,
        temperature: cfg.temperature,
        max_tokens: cfg.max_tokens,
    })
    .expect("request serializes");
    let mut attempts = 0;
    loop {
        attempts += 1;
        match client.attempt(&body) {
            Ok(text) => return Ok(Completion { text, attempts }),
            Err(e) if e.retryable() => {
                if attempts > cfg.max_retries {
                    return Err(RemoteError::RetryExhausted { attempts, last: Box::new(e) });
                }
                thread::sleep(client.backoff(attempts - 1));
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};

    fn cfg(retries: u32, in_flight: usize) -> RemoteConfig {
        RemoteConfig {
            endpoint: "http://127.0.0.1:9/complete".into(),
            max_retries: retries,
            max_in_flight: in_flight,
            backoff_base_ms: 1,
            jitter: 0.0,
            ..Default::default()
        }
    }

    struct Scripted {
        calls: AtomicU32,
        fail_first: u32,
        status: Option<u16>,
    }

    impl Transport for Scripted {
        fn post_json(&self, _: &str, body: &str, _: Duration) -> Result<(u16, String), TransportError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
            assert!(body.contains("\"model\"") && body.contains("\"max_tokens\""));
            if n <= self.fail_first {
                return match self.status {
                    Some(s) => Ok((s, "busy".into())),
                    None => Err(TransportError::Connect("refused".into())),
                };
            }
            Ok((200, r#"{"text": "1. red sofa\n2. couch"}"#.into()))
        }
    }

    #[test]
    fn unreachable_exhausts_retries() {
        let t = Arc::new(Scripted { calls: AtomicU32::new(0), fail_first: u32::MAX, status: None });
        let c = RemoteClient::with_transport(cfg(2, 1), t.clone()).unwrap();
        let err = llm_complete(&c, "p").unwrap_err();
        assert!(matches!(err, RemoteError::RetryExhausted { attempts: 3, .. }), "{err}");
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn success_on_second_attempt() {
        let t = Arc::new(Scripted { calls: AtomicU32::new(0), fail_first: 1, status: Some(503) });
        let c = RemoteClient::with_transport(cfg(3, 1), t).unwrap();
        let out = llm_complete(&c, "p").unwrap();
        assert_eq!(out.attempts, 2);
        assert_eq!(out.text, "1. red sofa\n2. couch");
    }

    #[test]
    fn client_errors_are_not_retried() {
        let t = Arc::new(Scripted { calls: AtomicU32::new(0), fail_first: u32::MAX, status: Some(400) });
        let c = RemoteClient::with_transport(cfg(3, 1), t.clone()).unwrap();
        assert!(matches!(llm_complete(&c, "p"), Err(RemoteError::Status { status: 400, .. })));
        assert_eq!(t.calls.load(Ordering::SeqCst), 1);
    }

    struct Slow {
        current: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Transport for Slow {
        fn post_json(&self, _: &str, _: &str, _: Duration) -> Result<(u16, String), TransportError> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            thread::sleep(Duration::from_millis(2));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok((200, r#"{"choices": [{"text": "ok"}]}"#.into()))
        }
    }

    #[test]
    fn in_flight_bound_holds() {
        let t = Arc::new(Slow { current: AtomicUsize::new(0), peak: AtomicUsize::new(0) });
        let c = RemoteClient::with_transport(cfg(0, 4), t.clone()).unwrap();
        thread::scope(|s| {
            for _ in 0..100 {
                let c = c.clone();
                s.spawn(move || assert_eq!(llm_complete(&c, "p").unwrap().text, "ok"));
            }
        });
        assert!(t.peak.load(Ordering::SeqCst) <= 4);
        assert!(c.limiter().peak() <= 4);
    }

    #[test]
    fn config_rules() {
        assert!(RemoteClient::new(RemoteConfig::default()).is_err());
        assert!(RemoteClient::new(RemoteConfig { max_in_flight: 0, ..cfg(1, 1) }).is_err());
    }
}
