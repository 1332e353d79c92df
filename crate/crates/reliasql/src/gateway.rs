//! Uniform access to a chat-completion backend.
//!
//! Three modes share one `complete` entry point:
//! - **live**: HTTP calls with bounded retries and request pacing; every
//!   response is recorded in the replay cache.
//! - **replay**: answers from the cache only, never touching the network.
//! - **stub**: deterministic pattern -> response rules for offline tests.
//!
//! The cache is content-addressed: the key is the SHA-256 of the request's
//! canonical JSON, so identical requests always map to the same entry.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Response text used when a stub has no matching rule or a lenient replay
/// misses. It is the abstention marker, so unseeded requests fail safe.
pub const STUB_SENTINEL: &str = "null";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("chat request has empty user text")]
    EmptyUserText,
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
    #[error("replay cache miss for request {key}")]
    CacheMiss { key: String },
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("cache file {path}: {source}")]
    CacheIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One chat-completion request. Serialization order of the fields defines
/// the canonical form used for cache keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    /// Raw completion text, untrimmed.
    pub text: String,
    pub cached: bool,
    pub latency_ms: u64,
}

/// Content address of a request: SHA-256 over its canonical JSON.
pub fn cache_key(request: &ChatRequest) -> String {
    let canonical = serde_json::to_string(request).expect("request serializes");
    format!("{:x}", Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    request: ChatRequest,
    response: String,
}

/// Append-only JSON-lines store of `(key, request, response)` records.
/// Duplicate keys resolve to the last write.
#[derive(Debug, Default)]
pub struct ReplayCache {
    entries: HashMap<String, CacheRecord>,
}

impl ReplayCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads a cache file, tolerating and skipping corrupt lines so one bad
    /// record cannot poison the rest of the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let text = match fs::read_to_string(path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(source) => {
                return Err(GatewayError::CacheIo {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        let mut cache = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CacheRecord>(line) {
                Ok(record) => {
                    cache.entries.insert(record.key.clone(), record);
                }
                Err(e) => {
                    log::warn!("skipping corrupt cache line {} in {}: {e}", lineno + 1, path.display());
                }
            }
        }
        Ok(cache)
    }

    pub fn insert(&mut self, request: &ChatRequest, response: impl Into<String>) -> String {
        let key = cache_key(request);
        self.entries.insert(
            key.clone(),
            CacheRecord {
                key: key.clone(),
                request: request.clone(),
                response: response.into(),
            },
        );
        key
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|r| r.response.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes the whole cache as JSON lines, sorted by key for stable diffs.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GatewayError> {
        let path = path.as_ref();
        let mut keys: Vec<&String> = self.entries.keys().collect();
        keys.sort();
        let mut out = String::new();
        for key in keys {
            out.push_str(&serde_json::to_string(&self.entries[key]).expect("record serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| GatewayError::CacheIo {
            path: path.display().to_string(),
            source,
        })
    }
}

/// What a replay-mode miss does: fail the request or answer with the
/// sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissPolicy {
    Strict,
    Sentinel,
}

/// A stub rule: `pattern` matches when it is `*` or a substring of the
/// request's user text. First matching rule wins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StubRule {
    pub pattern: String,
    pub response: String,
}

impl StubRule {
    pub fn new(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            response: response.into(),
        }
    }

    fn matches(&self, request: &ChatRequest) -> bool {
        self.pattern == "*" || request.user_text.contains(&self.pattern)
    }
}

/// Network settings for live mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiveOptions {
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    pub credential_env: String,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    /// Token-bucket pacing: minimum spacing between requests.
    pub min_interval_ms: u64,
}

impl Default for LiveOptions {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            credential_env: "LLM_API_KEY".to_string(),
            max_retries: 3,
            initial_backoff_ms: 1_000,
            min_interval_ms: 500,
        }
    }
}

/// Transport used by live mode. Injected so tests can fail it, count calls,
/// or fake responses without a network.
pub trait ChatTransport: Send + Sync {
    fn send(&self, endpoint: &str, api_key: &str, request: &ChatRequest) -> Result<String, String>;
}

/// Transport that reports any use. Installed in replay and stub gateways,
/// where a transport call would mean the mode leaked network I/O.
struct NoNetworkTransport;

impl ChatTransport for NoNetworkTransport {
    fn send(&self, _: &str, _: &str, _: &ChatRequest) -> Result<String, String> {
        Err("network transport invoked outside live mode".to_string())
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
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

/// Real HTTP transport speaking the chat-completions JSON shape.
pub struct HttpTransport;

impl ChatTransport for HttpTransport {
    fn send(&self, endpoint: &str, api_key: &str, request: &ChatRequest) -> Result<String, String> {
        let mut messages = Vec::new();
        if !request.system_text.is_empty() {
            messages.push(WireMessage {
                role: "system",
                content: &request.system_text,
            });
        }
        messages.push(WireMessage {
            role: "user",
            content: &request.user_text,
        });
        let body = WireRequest {
            model: &request.model_tag,
            messages,
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
        };
        let mut response = ureq::post(endpoint)
            .header("authorization", &format!("Bearer {api_key}"))
            .send_json(&body)
            .map_err(|e| e.to_string())?;
        let parsed: WireResponse = response.body_mut().read_json().map_err(|e| e.to_string())?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| "response carried no choices".to_string())
    }
}

enum Mode {
    Live { options: LiveOptions },
    Replay { policy: MissPolicy },
    Stub { rules: Vec<StubRule> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub entries: usize,
}

/// Shared-state gateway; safe to call from multiple workers. Live calls
/// serialize through the pacing lock, cache writes are mutually excluded,
/// replay and stub reads are freely concurrent.
pub struct Gateway {
    mode: Mode,
    transport: Box<dyn ChatTransport>,
    cache: Mutex<ReplayCache>,
    cache_path: Option<PathBuf>,
    hits: AtomicU64,
    misses: AtomicU64,
    next_slot: Mutex<Option<Instant>>,
}

impl Gateway {
    /// Deterministic rule-table gateway; unmatched requests get the sentinel.
    pub fn stub(rules: Vec<StubRule>) -> Self {
        Self::build(Mode::Stub { rules }, Box::new(NoNetworkTransport), ReplayCache::new(), None)
    }

    /// Cache-backed gateway that never performs network I/O.
    pub fn replay(cache_path: impl AsRef<Path>, policy: MissPolicy) -> Result<Self, GatewayError> {
        let cache = ReplayCache::load(cache_path.as_ref())?;
        Ok(Self::replay_from_cache(cache, policy))
    }

    pub fn replay_from_cache(cache: ReplayCache, policy: MissPolicy) -> Self {
        Self::build(Mode::Replay { policy }, Box::new(NoNetworkTransport), cache, None)
    }

    /// Live gateway over HTTP. When `cache_path` is given, existing records
    /// are loaded and every completion is appended to the file.
    pub fn live(options: LiveOptions, cache_path: Option<PathBuf>) -> Result<Self, GatewayError> {
        Self::live_with_transport(options, Box::new(HttpTransport), cache_path)
    }

    pub fn live_with_transport(
        options: LiveOptions,
        transport: Box<dyn ChatTransport>,
        cache_path: Option<PathBuf>,
    ) -> Result<Self, GatewayError> {
        let cache = match &cache_path {
            Some(path) => ReplayCache::load(path)?,
            None => ReplayCache::new(),
        };
        Ok(Self::build(Mode::Live { options }, transport, cache, cache_path))
    }

    /// Replaces the transport; used by tests to prove a mode never calls it.
    pub fn with_transport(mut self, transport: Box<dyn ChatTransport>) -> Self {
        self.transport = transport;
        self
    }

    fn build(
        mode: Mode,
        transport: Box<dyn ChatTransport>,
        cache: ReplayCache,
        cache_path: Option<PathBuf>,
    ) -> Self {
        Self {
            mode,
            transport,
            cache: Mutex::new(cache),
            cache_path,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            next_slot: Mutex::new(None),
        }
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            entries: self.cache.lock().unwrap().len(),
        }
    }

    /// Completes a chat request according to the configured mode.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if request.user_text.is_empty() {
            return Err(GatewayError::EmptyUserText);
        }
        match &self.mode {
            Mode::Stub { rules } => {
                let text = rules
                    .iter()
                    .find(|r| r.matches(request))
                    .map(|r| r.response.clone())
                    .unwrap_or_else(|| STUB_SENTINEL.to_string());
                Ok(ChatResponse {
                    text,
                    cached: false,
                    latency_ms: 0,
                })
            }
            Mode::Replay { policy } => {
                let key = cache_key(request);
                let cached = self.cache.lock().unwrap().get(&key).map(str::to_string);
                match cached {
                    Some(text) => {
                        self.hits.fetch_add(1, Ordering::Relaxed);
                        Ok(ChatResponse {
                            text,
                            cached: true,
                            latency_ms: 0,
                        })
                    }
                    None => {
                        self.misses.fetch_add(1, Ordering::Relaxed);
                        match policy {
                            MissPolicy::Strict => Err(GatewayError::CacheMiss { key }),
                            MissPolicy::Sentinel => Ok(ChatResponse {
                                text: STUB_SENTINEL.to_string(),
                                cached: false,
                                latency_ms: 0,
                            }),
                        }
                    }
                }
            }
            Mode::Live { options } => self.complete_live(options, request),
        }
    }

    fn complete_live(&self, options: &LiveOptions, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let api_key = std::env::var(&options.credential_env)
            .map_err(|_| GatewayError::MissingCredential(options.credential_env.clone()))?;

        self.pace(Duration::from_millis(options.min_interval_ms));

        let started = Instant::now();
        let attempts = options.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = options.initial_backoff_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            match self.transport.send(&options.endpoint, &api_key, request) {
                Ok(text) => {
                    self.record(request, &text)?;
                    return Ok(ChatResponse {
                        text,
                        cached: false,
                        latency_ms: started.elapsed().as_millis() as u64,
                    });
                }
                Err(message) => {
                    log::warn!("transport attempt {}/{attempts} failed: {message}", attempt + 1);
                    last_error = message;
                }
            }
        }
        Err(GatewayError::Transport {
            attempts,
            message: last_error,
        })
    }

    /// Reserves the next send slot, sleeping until it opens.
    fn pace(&self, min_interval: Duration) {
        if min_interval.is_zero() {
            return;
        }
        let wait_until = {
            let mut slot = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let at = match *slot {
                Some(t) if t > now => t,
                _ => now,
            };
            *slot = Some(at + min_interval);
            at
        };
        let now = Instant::now();
        if wait_until > now {
            std::thread::sleep(wait_until - now);
        }
    }

    fn record(&self, request: &ChatRequest, response: &str) -> Result<(), GatewayError> {
        let mut cache = self.cache.lock().unwrap();
        let key = cache.insert(request, response);
        if let Some(path) = &self.cache_path {
            let record = CacheRecord {
                key,
                request: request.clone(),
                response: response.to_string(),
            };
            let line = serde_json::to_string(&record).expect("record serializes");
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|source| GatewayError::CacheIo {
                    path: path.display().to_string(),
                    source,
                })?;
            writeln!(file, "{line}").map_err(|source| GatewayError::CacheIo {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn request(user: &str) -> ChatRequest {
        ChatRequest {
            system_text: "You convert questions to SQLite.".into(),
            user_text: user.into(),
            temperature: 0.0,
            max_output_tokens: 256,
            model_tag: "test-model".into(),
        }
    }

    struct FixedTransport(String);
    impl ChatTransport for FixedTransport {
        fn send(&self, _: &str, _: &str, _: &ChatRequest) -> Result<String, String> {
            Ok(self.0.clone())
        }
    }

    struct FailNTransport {
        failures: AtomicU32,
        calls: AtomicU32,
    }
    impl ChatTransport for FailNTransport {
        fn send(&self, _: &str, _: &str, _: &ChatRequest) -> Result<String, String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                Err("synthetic outage".into())
            } else {
                Ok("recovered".into())
            }
        }
    }

    fn quick_live_options(var: &str) -> LiveOptions {
        LiveOptions {
            endpoint: "http://localhost/never-used".into(),
            credential_env: var.into(),
            max_retries: 3,
            initial_backoff_ms: 0,
            min_interval_ms: 0,
        }
    }

    #[test]
    fn stub_wildcard_rule_answers_everything() {
        let gw = Gateway::stub(vec![StubRule::new("*", "SELECT 1")]);
        let resp = gw.complete(&request("anything at all")).unwrap();
        assert_eq!(resp.text, "SELECT 1");
        assert!(!resp.cached);
    }

    #[test]
    fn stub_unmatched_returns_sentinel() {
        let gw = Gateway::stub(vec![StubRule::new("never-present", "x")]);
        assert_eq!(gw.complete(&request("hello")).unwrap().text, STUB_SENTINEL);
    }

    #[test]
    fn stub_is_pure() {
        let gw = Gateway::stub(vec![
            StubRule::new("count", "SELECT count(*) FROM admissions"),
            StubRule::new("*", "SELECT 1"),
        ]);
        let r = request("count the admissions");
        assert_eq!(gw.complete(&r).unwrap().text, gw.complete(&r).unwrap().text);
        assert_eq!(gw.complete(&request("other")).unwrap().text, "SELECT 1");
    }

    #[test]
    fn empty_user_text_rejected() {
        let gw = Gateway::stub(vec![]);
        assert!(matches!(gw.complete(&request("")), Err(GatewayError::EmptyUserText)));
    }

    #[test]
    fn identical_requests_share_a_cache_key() {
        assert_eq!(cache_key(&request("q")), cache_key(&request("q")));
        assert_ne!(cache_key(&request("q")), cache_key(&request("p")));
    }

    #[test]
    fn record_then_replay_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cache_path = dir.path().join("cache.jsonl");
        let var = "RELIASQL_TEST_KEY_ROUNDTRIP";
        std::env::set_var(var, "secret");

        let live = Gateway::live_with_transport(
            quick_live_options(var),
            Box::new(FixedTransport("SELECT 42".into())),
            Some(cache_path.clone()),
        )
        .unwrap();
        let r = request("what is the answer");
        let first = live.complete(&r).unwrap();
        assert_eq!(first.text, "SELECT 42");
        assert!(!first.cached);

        let replay = Gateway::replay(&cache_path, MissPolicy::Strict).unwrap();
        let second = replay.complete(&r).unwrap();
        assert_eq!(second.text, first.text);
        assert!(second.cached);
        assert_eq!(replay.stats().hits, 1);
    }

    #[test]
    fn replay_strict_miss_carries_the_key() {
        let gw = Gateway::replay_from_cache(ReplayCache::new(), MissPolicy::Strict);
        let r = request("unseen");
        match gw.complete(&r) {
            Err(GatewayError::CacheMiss { key }) => assert_eq!(key, cache_key(&r)),
            other => panic!("expected cache miss, got {other:?}"),
        }
    }

    #[test]
    fn replay_sentinel_miss_answers_null() {
        let gw = Gateway::replay_from_cache(ReplayCache::new(), MissPolicy::Sentinel);
        let resp = gw.complete(&request("unseen")).unwrap();
        assert_eq!(resp.text, STUB_SENTINEL);
        assert!(!resp.cached);
    }

    struct ExplodingTransport;
    impl ChatTransport for ExplodingTransport {
        fn send(&self, _: &str, _: &str, _: &ChatRequest) -> Result<String, String> {
            panic!("replay mode performed network I/O");
        }
    }

    #[test]
    fn replay_never_touches_the_transport() {
        let mut cache = ReplayCache::new();
        let r = request("cached question");
        cache.insert(&r, "cached answer");
        let gw = Gateway::replay_from_cache(cache, MissPolicy::Strict).with_transport(Box::new(ExplodingTransport));
        assert_eq!(gw.complete(&r).unwrap().text, "cached answer");
        // a miss must not fall through to the transport either
        assert!(gw.complete(&request("novel")).is_err());
    }

    #[test]
    fn live_missing_credential_is_a_config_error() {
        let var = "RELIASQL_TEST_KEY_DEFINITELY_UNSET";
        std::env::remove_var(var);
        let gw = Gateway::live_with_transport(
            quick_live_options(var),
            Box::new(FixedTransport("x".into())),
            None,
        )
        .unwrap();
        assert!(matches!(
            gw.complete(&request("q")),
            Err(GatewayError::MissingCredential(v)) if v == var
        ));
    }

    #[test]
    fn live_retries_then_recovers() {
        let var = "RELIASQL_TEST_KEY_RETRY";
        std::env::set_var(var, "secret");
        let transport = FailNTransport {
            failures: AtomicU32::new(2),
            calls: AtomicU32::new(0),
        };
        let gw = Gateway::live_with_transport(quick_live_options(var), Box::new(transport), None).unwrap();
        assert_eq!(gw.complete(&request("q")).unwrap().text, "recovered");
    }

    #[test]
    fn live_gives_up_after_bounded_attempts() {
        let var = "RELIASQL_TEST_KEY_GIVEUP";
        std::env::set_var(var, "secret");
        let transport = FailNTransport {
            failures: AtomicU32::new(u32::MAX),
            calls: AtomicU32::new(0),
        };
        let gw = Gateway::live_with_transport(quick_live_options(var), Box::new(transport), None).unwrap();
        match gw.complete(&request("q")) {
            Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 4),
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn cache_last_write_wins_and_skips_corrupt_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let r = request("q");
        let key = cache_key(&r);
        let mk = |response: &str| {
            serde_json::to_string(&CacheRecord {
                key: key.clone(),
                request: r.clone(),
                response: response.into(),
            })
            .unwrap()
        };
        fs::write(&path, format!("{}\nnot json at all\n{}\n", mk("old"), mk("new"))).unwrap();
        let cache = ReplayCache::load(&path).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(cache.get(&key), Some("new"));
    }
}
