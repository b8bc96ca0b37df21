//! One client for every external text-model call (persona extraction,
//! sentiment classification, judge scoring).
//!
//! Requests are chat-completion shaped JSON. In replay mode the client
//! serves recorded replies from `fixtures/<request-hash>.txt` and never
//! touches the network; record mode calls the live endpoint and writes the
//! fixture.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ENV_URL: &str = "SOCIALALIGN_PROVIDER_URL";
pub const ENV_KEY: &str = "SOCIALALIGN_PROVIDER_KEY";
pub const ENV_MODEL: &str = "SOCIALALIGN_PROVIDER_MODEL";

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderRequest {
    pub template_id: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl ProviderRequest {
    pub fn new(template_id: impl Into<String>, prompt: impl Into<String>, max_tokens: u32, temperature: f64) -> Result<Self> {
        let req = ProviderRequest {
            template_id: template_id.into(),
            prompt: prompt.into(),
            max_tokens,
            temperature,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::contract("provider prompt is empty"));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::contract(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        Ok(())
    }

    /// SHA-256 over the request content; names the replay fixture.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            self.template_id.as_bytes(),
            self.prompt.as_bytes(),
            self.max_tokens.to_string().as_bytes(),
            format!("{:?}", self.temperature).as_bytes(),
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderReply {
    pub raw: String,
    pub latency_ms: u64,
    pub request_hash: String,
}

#[derive(Clone)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl fmt::Debug for EndpointConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EndpointConfig")
            .field("url", &self.url)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl EndpointConfig {
    /// Reads the endpoint from `SOCIALALIGN_PROVIDER_{URL,KEY,MODEL}`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(ENV_URL).map_err(|_| Error::Config(format!("{ENV_URL} is not set")))?;
        let model = std::env::var(ENV_MODEL).map_err(|_| Error::Config(format!("{ENV_MODEL} is not set")))?;
        Ok(EndpointConfig {
            url,
            model,
            api_key: std::env::var(ENV_KEY).ok(),
            timeout: Duration::from_secs(60),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        // attempt is 1-based; no wait before the first one.
        if attempt <= 1 {
            Duration::ZERO
        } else {
            self.base_delay * 2u32.saturating_pow(attempt - 2)
        }
    }
}

/// A failed exchange below the HTTP status level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportFailure(pub String);

/// Minimal HTTP POST abstraction so tests can script an endpoint.
pub trait Transport: Send + Sync {
    /// Returns the status code and body of the response.
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> std::result::Result<(u16, String), TransportFailure>;
}

/// Blocking HTTPS transport.
#[derive(Debug, Default)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> std::result::Result<(u16, String), TransportFailure> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| TransportFailure(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportFailure(e.to_string()))?;
        Ok((status, text))
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: [WireMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
}

/// The exact JSON body sent for `req`.
pub fn wire_body(model: &str, req: &ProviderRequest) -> String {
    serde_json::to_string(&WireRequest {
        model,
        messages: [WireMessage {
            role: "user",
            content: &req.prompt,
        }],
        temperature: req.temperature,
        max_tokens: req.max_tokens,
    })
    .expect("wire request serializes")
}

/// Extracts `choices[0].message.content` from a reply body.
pub fn parse_reply_body(body: &str) -> Result<String> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| Error::ProviderFormat {
        msg: format!("reply is not JSON: {e}"),
        raw: body.to_string(),
    })?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::ProviderFormat {
            msg: "missing choices[0].message.content".into(),
            raw: body.to_string(),
        })
}

enum Mode {
    Live {
        endpoint: EndpointConfig,
        transport: Box<dyn Transport>,
        record_dir: Option<PathBuf>,
    },
    Replay {
        dir: PathBuf,
    },
}

struct Semaphore {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("semaphore poisoned");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("semaphore poisoned");
        }
        *n += 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("semaphore poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

/// Thread-safe provider client; share one instance across callers.
pub struct ProviderClient {
    mode: Mode,
    retry: RetryPolicy,
    gate: Semaphore,
    sleep: fn(Duration),
}

impl fmt::Debug for ProviderClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match &self.mode {
            Mode::Live { endpoint, record_dir, .. } => format!("live({}, record={:?})", endpoint.url, record_dir),
            Mode::Replay { dir } => format!("replay({})", dir.display()),
        };
        f.debug_struct("ProviderClient")
            .field("mode", &mode)
            .field("retry", &self.retry)
            .field("limit", &self.gate.limit)
            .finish()
    }
}

pub const DEFAULT_IN_FLIGHT: usize = 4;

impl ProviderClient {
    fn with_mode(mode: Mode) -> Self {
        ProviderClient {
            mode,
            retry: RetryPolicy::default(),
            gate: Semaphore {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                limit: DEFAULT_IN_FLIGHT,
            },
            sleep: std::thread::sleep,
        }
    }

    /// Serves recorded replies from `dir`; never performs network I/O.
    pub fn replay(dir: impl Into<PathBuf>) -> Self {
        Self::with_mode(Mode::Replay { dir: dir.into() })
    }

    pub fn live(endpoint: EndpointConfig, transport: Box<dyn Transport>) -> Self {
        Self::with_mode(Mode::Live {
            endpoint,
            transport,
            record_dir: None,
        })
    }

    /// Live client that also writes every reply as a replay fixture.
    pub fn recording(endpoint: EndpointConfig, transport: Box<dyn Transport>, dir: impl Into<PathBuf>) -> Self {
        Self::with_mode(Mode::Live {
            endpoint,
            transport,
            record_dir: Some(dir.into()),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_in_flight_limit(mut self, limit: usize) -> Self {
        self.gate.limit = limit.max(1);
        self
    }

    /// Replaces the backoff sleep (tests use a no-op).
    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn is_replay(&self) -> bool {
        matches!(self.mode, Mode::Replay { .. })
    }

    pub fn chat_complete(&self, req: &ProviderRequest) -> Result<ProviderReply> {
        req.validate()?;
        let hash = req.hash();
        let _permit = self.gate.acquire();
        let start = Instant::now();
        let raw = match &self.mode {
            Mode::Replay { dir } => {
                let path = fixture_path(dir, &hash);
                fs::read_to_string(&path).map_err(|_| Error::FixtureMiss(hash.clone()))?
            }
            Mode::Live {
                endpoint,
                transport,
                record_dir,
            } => {
                let raw = self.call_with_retry(endpoint, transport.as_ref(), req)?;
                if let Some(dir) = record_dir {
                    fs::create_dir_all(dir)?;
                    fs::write(fixture_path(dir, &hash), &raw)?;
                }
                raw
            }
        };
        log::debug!("provider {} {} in {:?}", req.template_id, &hash[..12], start.elapsed());
        Ok(ProviderReply {
            raw,
            latency_ms: start.elapsed().as_millis() as u64,
            request_hash: hash,
        })
    }

    fn call_with_retry(&self, endpoint: &EndpointConfig, transport: &dyn Transport, req: &ProviderRequest) -> Result<String> {
        let body = wire_body(&endpoint.model, req);
        let attempts = self.retry.attempts.max(1);
        let mut last = Error::Transport("no attempt made".into());
        for attempt in 1..=attempts {
            let wait = self.retry.delay_before(attempt);
            if !wait.is_zero() {
                (self.sleep)(wait);
            }
            match transport.post_json(&endpoint.url, endpoint.api_key.as_deref(), &body, endpoint.timeout) {
                Ok((status, text)) if (200..300).contains(&status) => return parse_reply_body(&text),
                Ok((status, text)) => {
                    let err = Error::Service {
                        status,
                        body: text.chars().take(200).collect(),
                    };
                    if status < 500 {
                        return Err(err);
                    }
                    log::warn!("provider attempt {attempt}/{attempts}: status {status}");
                    last = err;
                }
                Err(TransportFailure(msg)) => {
                    log::warn!("provider attempt {attempt}/{attempts}: {msg}");
                    last = Error::Transport(msg);
                }
            }
        }
        Err(last)
    }
}

pub fn fixture_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("{hash}.txt"))
}

/// Fills `{name}` placeholders in a template.
pub fn fill_template(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// SHA-256 of a template's text, logged alongside scores it produced.
pub fn template_hash(template: &str) -> String {
    hex::encode(Sha256::digest(template.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Scripted {
        calls: Arc<AtomicUsize>,
        script: Vec<std::result::Result<(u16, String), TransportFailure>>,
    }

    impl Transport for Scripted {
        fn post_json(&self, _: &str, _: Option<&str>, _: &str, _: Duration) -> std::result::Result<(u16, String), TransportFailure> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            self.script[i.min(self.script.len() - 1)].clone()
        }
    }

    fn endpoint() -> EndpointConfig {
        EndpointConfig {
            url: "http://scripted.invalid/v1/chat/completions".into(),
            model: "m".into(),
            api_key: None,
            timeout: Duration::from_secs(1),
        }
    }

    fn client(script: Vec<std::result::Result<(u16, String), TransportFailure>>) -> (ProviderClient, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let t = Scripted {
            calls: calls.clone(),
            script,
        };
        let c = ProviderClient::live(endpoint(), Box::new(t)).with_sleep(|_| {});
        (c, calls)
    }

    fn ok_body(content: &str) -> String {
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
    }

    fn req(prompt: &str) -> ProviderRequest {
        ProviderRequest::new("t", prompt, 16, 0.0).unwrap()
    }

    #[test]
    fn request_hash_binds_content() {
        assert_eq!(req("a").hash(), req("a").hash());
        assert_ne!(req("a").hash(), req("b").hash());
        let mut r = req("a");
        r.temperature = 0.5;
        assert_ne!(r.hash(), req("a").hash());
    }

    #[test]
    fn request_validation() {
        assert!(ProviderRequest::new("t", "", 8, 0.0).is_err());
        assert!(ProviderRequest::new("t", "x", 8, 2.5).is_err());
        assert!(ProviderRequest::new("t", "x", 8, 2.0).is_ok());
    }

    #[test]
    fn wire_body_is_exact() {
        assert_eq!(
            wire_body("qwen", &ProviderRequest::new("t", "hi \"there\"", 32, 0.0).unwrap()),
            r#"{"model":"qwen","messages":[{"role":"user","content":"hi \"there\""}],"temperature":0.0,"max_tokens":32}"#
        );
    }

    #[test]
    fn replay_serves_fixture_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let r = req("classify this");
        let recorded = "angry\n  with trailing space ";
        fs::write(fixture_path(dir.path(), &r.hash()), recorded).unwrap();
        let c = ProviderClient::replay(dir.path());
        let reply = c.chat_complete(&r).unwrap();
        assert_eq!(reply.raw, recorded);
        assert_eq!(reply.request_hash, r.hash());
        assert!(matches!(c.chat_complete(&req("other")), Err(Error::FixtureMiss(_))));
    }

    #[test]
    fn retries_exactly_configured_attempts_then_transport_error() {
        let (c, calls) = client(vec![Err(TransportFailure("connection refused".into()))]);
        let err = c.chat_complete(&req("x")).unwrap_err();
        assert!(matches!(err, Error::Transport(_)));
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        let (c, calls) = client(vec![Err(TransportFailure("reset".into()))]);
        let c = c.with_retry(RetryPolicy {
            attempts: 5,
            base_delay: Duration::ZERO,
        });
        assert!(c.chat_complete(&req("x")).is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn server_errors_retry_client_errors_do_not() {
        let (c, calls) = client(vec![Ok((503, "busy".into())), Ok((200, ok_body("calm")))]);
        assert_eq!(c.chat_complete(&req("x")).unwrap().raw, "calm");
        assert_eq!(calls.load(Ordering::SeqCst), 2);

        let (c, calls) = client(vec![Ok((401, "denied".into()))]);
        match c.chat_complete(&req("x")) {
            Err(Error::Service { status, body }) => {
                assert_eq!(status, 401);
                assert_eq!(body, "denied");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_schedule() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay_before(1), Duration::ZERO);
        assert_eq!(p.delay_before(2), Duration::from_millis(500));
        assert_eq!(p.delay_before(3), Duration::from_millis(1000));
        assert_eq!(p.delay_before(4), Duration::from_millis(2000));
    }

    #[test]
    fn recording_writes_replayable_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let calls = Arc::new(AtomicUsize::new(0));
        let t = Scripted {
            calls,
            script: vec![Ok((200, ok_body("happy")))],
        };
        let c = ProviderClient::recording(endpoint(), Box::new(t), dir.path());
        let r = req("hello");
        assert_eq!(c.chat_complete(&r).unwrap().raw, "happy");
        let replay = ProviderClient::replay(dir.path());
        assert_eq!(replay.chat_complete(&r).unwrap().raw, "happy");
    }

    #[test]
    fn malformed_reply_body() {
        assert!(matches!(parse_reply_body("{}"), Err(Error::ProviderFormat { .. })));
        assert!(matches!(parse_reply_body("nope"), Err(Error::ProviderFormat { .. })));
        assert_eq!(parse_reply_body(&ok_body("x")).unwrap(), "x");
    }

    #[test]
    fn template_filling() {
        assert_eq!(fill_template("a {x} b {y} {x}", &[("x", "1"), ("y", "2")]), "a 1 b 2 1");
        assert_eq!(template_hash("abc"), template_hash("abc"));
    }
}
