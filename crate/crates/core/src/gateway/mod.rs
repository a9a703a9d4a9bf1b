//! Uniform access to chat and embedding providers with a shared retry
//! policy and a single usage-accounting sink.

mod embed;
pub mod openai;

use std::fmt;
use std::ops::{Add, AddAssign};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{
    cosine_similarity, EmbeddingGateway, EmbeddingProvider, EmbeddingVector, HashEmbedder,
};

/// Dimension of the built-in hashing embedder.
pub const HASH_EMBEDDING_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub model_name: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_retries: u32,
    #[serde(with = "millis", rename = "backoff_base_ms")]
    pub backoff_base: Duration,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_name: "gemini-2.5-pro".to_string(),
            temperature: 0.7,
            top_p: 0.95,
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
        }
    }
}

impl ModelConfig {
    pub fn named(model_name: impl Into<String>) -> Self {
        Self {
            model_name: model_name.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidConfig(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::InvalidConfig(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.model_name.is_empty() {
            return Err(GatewayError::InvalidConfig("model_name is empty".into()));
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (1-based): `base * 2^(attempt-1)`.
    pub fn backoff_delay(&self, attempt: u32) -> Duration {
        self.backoff_base.saturating_mul(
            1u32.checked_shl(attempt.saturating_sub(1))
                .unwrap_or(u32::MAX),
        )
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UsageCounters {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(with = "millis", rename = "wall_time_ms")]
    pub wall_time: Duration,
}

impl UsageCounters {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl Add for UsageCounters {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
            wall_time: self.wall_time + rhs.wall_time,
        }
    }
}

impl AddAssign for UsageCounters {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for UsageCounters {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// One completed request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub request: Vec<ChatMessage>,
    pub response: String,
    pub usage: UsageCounters,
    pub attempts: u32,
}

/// What a single provider attempt returned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            prompt_tokens: None,
            completion_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    /// Worth retrying: timeouts, connection resets, 429/5xx.
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("provider rejected the request: {0}")]
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("request has no messages")]
    EmptyRequest,
    #[error("text {index} is empty")]
    EmptyText { index: usize },
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider rejected the request: {0}")]
    Rejected(String),
    #[error("embedding {index} has zero norm")]
    ZeroVector { index: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("provider returned {got} embeddings for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

/// A chat-completions backend; one call is one attempt.
pub trait ChatProvider: Send + Sync {
    fn complete(
        &self,
        config: &ModelConfig,
        messages: &[ChatMessage],
    ) -> Result<Completion, ProviderError>;
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, duration: Duration);
}

#[derive(Debug, Default)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Records requested delays without sleeping.
#[derive(Debug, Default)]
pub struct RecordingSleeper {
    delays: Mutex<Vec<Duration>>,
}

impl RecordingSleeper {
    pub fn delays(&self) -> Vec<Duration> {
        self.delays.lock().unwrap().clone()
    }
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, duration: Duration) {
        self.delays.lock().unwrap().push(duration);
    }
}

/// Millisecond wall clock. Fixed clocks make archives byte-reproducible.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FixedClock(pub u64);

impl Clock for FixedClock {
    fn now_ms(&self) -> u64 {
        self.0
    }
}

/// Which part of the system spent the tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallRole {
    Parser,
    Reflector,
    Optimizer,
    Embedder,
    Agent,
}

impl fmt::Display for CallRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CallRole::Parser => "parser",
            CallRole::Reflector => "reflector",
            CallRole::Optimizer => "optimizer",
            CallRole::Embedder => "embedder",
            CallRole::Agent => "agent",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: CallRole,
    pub usage: UsageCounters,
    pub attempts: u32,
}

/// Shared append-only call log. Clones share the same log.
#[derive(Debug, Clone, Default)]
pub struct UsageLedger {
    records: Arc<Mutex<Vec<CallRecord>>>,
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, role: CallRole, usage: UsageCounters, attempts: u32) {
        self.records.lock().unwrap().push(CallRecord {
            role,
            usage,
            attempts,
        });
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records appended since `mark` (a previous `len()`).
    pub fn since(&self, mark: usize) -> Vec<CallRecord> {
        self.records.lock().unwrap()[mark..].to_vec()
    }

    pub fn total(&self) -> UsageCounters {
        self.records.lock().unwrap().iter().map(|r| r.usage).sum()
    }
}

/// Runtime services shared by every gateway of one run.
#[derive(Clone)]
pub struct GatewayEnv {
    pub ledger: UsageLedger,
    pub sleeper: Arc<dyn Sleeper>,
    pub clock: Arc<dyn Clock>,
}

impl Default for GatewayEnv {
    fn default() -> Self {
        Self {
            ledger: UsageLedger::new(),
            sleeper: Arc::new(ThreadSleeper),
            clock: Arc::new(SystemClock),
        }
    }
}

impl GatewayEnv {
    /// No real sleeping and a frozen clock; for tests and offline fixtures.
    pub fn deterministic() -> Self {
        Self {
            ledger: UsageLedger::new(),
            sleeper: Arc::new(RecordingSleeper::default()),
            clock: Arc::new(FixedClock(0)),
        }
    }
}

/// Runs `attempt` until it succeeds, is rejected, or `max_retries` retries
/// are exhausted. Returns the value and the number of attempts made.
pub(crate) fn with_retries<T>(
    config: &ModelConfig,
    sleeper: &dyn Sleeper,
    mut attempt: impl FnMut(u32) -> Result<T, ProviderError>,
) -> Result<(T, u32), GatewayError> {
    let limit = config.max_retries + 1;
    let mut n = 1;
    loop {
        match attempt(n) {
            Ok(value) => return Ok((value, n)),
            Err(ProviderError::Rejected(msg)) => return Err(GatewayError::Rejected(msg)),
            Err(ProviderError::Transient(message)) => {
                if n >= limit {
                    return Err(GatewayError::Transport {
                        attempts: n,
                        message,
                    });
                }
                tracing::debug!(attempt = n, %message, "transient provider failure, retrying");
                sleeper.sleep(config.backoff_delay(n));
                n += 1;
            }
        }
    }
}

/// Chat access for one role (parser, reflector or optimizer).
#[derive(Clone)]
pub struct ChatGateway {
    provider: Arc<dyn ChatProvider>,
    config: ModelConfig,
    role: CallRole,
    env: GatewayEnv,
}

impl ChatGateway {
    pub fn new(
        provider: Arc<dyn ChatProvider>,
        config: ModelConfig,
        role: CallRole,
        env: GatewayEnv,
    ) -> Self {
        Self {
            provider,
            config,
            role,
            env,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ledger(&self) -> &UsageLedger {
        &self.env.ledger
    }

    pub fn chat(&self, messages: &[ChatMessage]) -> Result<ChatExchange, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::EmptyRequest);
        }
        let start = self.env.clock.now_ms();
        let (completion, attempts) = with_retries(&self.config, self.env.sleeper.as_ref(), |_| {
            self.provider.complete(&self.config, messages)
        })?;
        let elapsed = self.env.clock.now_ms().saturating_sub(start);
        let prompt_estimate: u64 = messages
            .iter()
            .map(|m| crate::util::estimate_tokens(&m.content))
            .sum();
        let usage = UsageCounters {
            prompt_tokens: completion.prompt_tokens.unwrap_or(prompt_estimate),
            completion_tokens: completion
                .completion_tokens
                .unwrap_or_else(|| crate::util::estimate_tokens(&completion.text)),
            wall_time: Duration::from_millis(elapsed),
        };
        self.env.ledger.record(self.role, usage, attempts);
        Ok(ChatExchange {
            request: messages.to_vec(),
            response: completion.text,
            usage,
            attempts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flaky {
        script: Mutex<Vec<Result<&'static str, ProviderError>>>,
        calls: Mutex<u32>,
    }

    impl Flaky {
        fn new(mut script: Vec<Result<&'static str, ProviderError>>) -> Self {
            script.reverse();
            Self {
                script: Mutex::new(script),
                calls: Mutex::new(0),
            }
        }
    }

    impl ChatProvider for Flaky {
        fn complete(
            &self,
            _: &ModelConfig,
            _: &[ChatMessage],
        ) -> Result<Completion, ProviderError> {
            *self.calls.lock().unwrap() += 1;
            match self.script.lock().unwrap().pop() {
                Some(Ok(text)) => Ok(Completion::text(text)),
                Some(Err(e)) => Err(e),
                None => Err(ProviderError::Transient("script exhausted".into())),
            }
        }
    }

    fn gateway(provider: Arc<Flaky>) -> (ChatGateway, Arc<RecordingSleeper>) {
        let sleeper = Arc::new(RecordingSleeper::default());
        let env = GatewayEnv {
            sleeper: sleeper.clone(),
            ..GatewayEnv::deterministic()
        };
        let config = ModelConfig {
            backoff_base: Duration::from_millis(100),
            ..ModelConfig::default()
        };
        (
            ChatGateway::new(provider, config, CallRole::Optimizer, env),
            sleeper,
        )
    }

    fn fail() -> Result<&'static str, ProviderError> {
        Err(ProviderError::Transient("boom".into()))
    }

    #[test]
    fn succeeds_on_third_attempt_with_doubling_backoff() {
        let provider = Arc::new(Flaky::new(vec![fail(), fail(), Ok("ok")]));
        let (gw, sleeper) = gateway(provider.clone());
        let ex = gw.chat(&[ChatMessage::user("hi")]).unwrap();
        assert_eq!(ex.attempts, 3);
        assert_eq!(ex.response, "ok");
        assert_eq!(
            sleeper.delays(),
            vec![Duration::from_millis(100), Duration::from_millis(200)]
        );
    }

    #[test]
    fn four_failures_exhaust_three_retries() {
        let provider = Arc::new(Flaky::new(vec![fail(), fail(), fail(), fail()]));
        let (gw, _) = gateway(provider.clone());
        let err = gw.chat(&[ChatMessage::user("hi")]).unwrap_err();
        assert!(matches!(err, GatewayError::Transport { attempts: 4, .. }));
        assert_eq!(*provider.calls.lock().unwrap(), 4);
        assert!(gw.ledger().is_empty());
    }

    #[test]
    fn rejection_is_not_retried() {
        let provider = Arc::new(Flaky::new(vec![Err(ProviderError::Rejected("400".into()))]));
        let (gw, sleeper) = gateway(provider.clone());
        assert_eq!(
            gw.chat(&[ChatMessage::user("hi")]),
            Err(GatewayError::Rejected("400".into()))
        );
        assert_eq!(*provider.calls.lock().unwrap(), 1);
        assert!(sleeper.delays().is_empty());
    }

    #[test]
    fn empty_request_is_rejected() {
        let (gw, _) = gateway(Arc::new(Flaky::new(vec![])));
        assert_eq!(gw.chat(&[]), Err(GatewayError::EmptyRequest));
    }

    #[test]
    fn usage_is_additive_across_calls() {
        let provider = Arc::new(Flaky::new(vec![Ok("one two three"), Ok("four")]));
        let (gw, _) = gateway(provider);
        let a = gw.chat(&[ChatMessage::user("alpha beta")]).unwrap();
        let b = gw.chat(&[ChatMessage::user("gamma")]).unwrap();
        assert_eq!(a.usage.prompt_tokens, 2);
        assert_eq!(a.usage.completion_tokens, 3);
        assert_eq!(gw.ledger().total(), a.usage + b.usage);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            top_p: 0.0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            temperature: -0.1,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
