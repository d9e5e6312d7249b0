//! Chat-completion access: the backend trait, retries, multi-turn sessions,
//! record/replay stores and bounded-concurrency batches.

mod batch;
#[cfg(feature = "http")]
pub mod http;
mod replay;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::prompt::{Message, MessageSequence, Role};

pub use batch::{fan_out, run_batch, BatchOutcome, BatchPlan, RecordFailure};
pub use replay::{Recorder, ReplayBackend, ReplayStore};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("backend rejected the request ({status}): {message}")]
    Api { status: u16, message: String },
    #[error("no recorded response for request digest {0}")]
    ReplayMiss(String),
    #[error("replay store {path} is corrupt at line {line}: {reason}")]
    StoreCorrupt {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("replay store io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("credential environment variable `{0}` is not set")]
    MissingCredential(String),
    #[error("every request in the batch failed ({0} records)")]
    AllFailed(usize),
    #[error("invalid batch plan: {0}")]
    InvalidPlan(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::Transport(_) | GatewayError::RateLimited { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.input_tokens += rhs.input_tokens;
        self.output_tokens += rhs.output_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

/// Decoding settings shared by every request of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestParams {
    pub model_id: String,
    pub temperature: f64,
    pub want_logprobs: bool,
    pub max_output_tokens: u32,
}

impl RequestParams {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            temperature: 0.0,
            want_logprobs: true,
            max_output_tokens: 1024,
        }
    }
}

/// A single chat-completion call. `sample` distinguishes repeated draws of
/// the same prompt so that each repeat has its own cache entry; it is not
/// sent to the backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: MessageSequence,
    pub model_id: String,
    pub temperature: f64,
    pub want_logprobs: bool,
    pub max_output_tokens: u32,
    #[serde(default)]
    pub sample: u32,
}

impl ChatRequest {
    pub fn new(messages: MessageSequence, params: &RequestParams, sample: u32) -> Self {
        Self {
            messages,
            model_id: params.model_id.clone(),
            temperature: params.temperature,
            want_logprobs: params.want_logprobs,
            max_output_tokens: params.max_output_tokens,
            sample,
        }
    }

    /// Stable content hash over every field.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("request serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub backend_id: String,
    #[serde(default)]
    pub latency_ms: u64,
    pub usage: Usage,
}

/// Anything that can answer a chat request. Implementations are shared
/// across worker threads.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn id(&self) -> String {
        (**self).id()
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

/// Exponential backoff: the wait before attempt `k + 1` is `base * 2^(k-1)`,
/// or the server's retry-after hint when it sends one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            backoff_base: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32, err: &GatewayError) -> Duration {
        if let GatewayError::RateLimited {
            retry_after: Some(d),
        } = err
        {
            return *d;
        }
        self.backoff_base
            .saturating_mul(1u32 << attempt.saturating_sub(1).min(16))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub response: ChatResponse,
    pub attempts: u32,
}

/// Calls the backend, retrying transport failures and rate limits.
pub fn complete(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<Completion, GatewayError> {
    let max = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match backend.complete(request) {
            Ok(response) => {
                return Ok(Completion {
                    response,
                    attempts: attempt,
                })
            }
            Err(e) if e.is_retryable() && attempt < max => {
                let wait = policy.delay(attempt, &e);
                if !wait.is_zero() {
                    std::thread::sleep(wait);
                }
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// The outcome of one multi-turn session.
#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub final_response: ChatResponse,
    /// Every message exchanged, including the model's intermediate replies.
    pub transcript: Vec<Message>,
    pub request_digests: Vec<String>,
    pub usage: Usage,
}

impl Conversation {
    /// Assistant replies before the final one, joined by blank lines.
    pub fn reasoning_text(&self) -> Option<String> {
        let replies: Vec<&str> = self
            .transcript
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .map(|m| m.content.as_str())
            .collect();
        (replies.len() > 1).then(|| replies[..replies.len() - 1].join("\n\n"))
    }
}

/// Runs a staged conversation in a single session: each user turn is sent
/// with the full history, and the model's reply is appended before the next.
pub fn run_conversation(
    backend: &dyn ChatBackend,
    sequence: &MessageSequence,
    params: &RequestParams,
    sample: u32,
    policy: &RetryPolicy,
) -> Result<Conversation, GatewayError> {
    let mut history: Vec<Message> = Vec::new();
    let mut digests = Vec::new();
    let mut usage = Usage::default();
    let mut last = None;
    for message in sequence.messages() {
        history.push(message.clone());
        if message.role != Role::User {
            continue;
        }
        let seq = MessageSequence::new(history.clone()).expect("history holds a user turn");
        let request = ChatRequest::new(seq, params, sample);
        digests.push(request.digest());
        let done = complete(backend, &request, policy)?;
        usage += done.response.usage;
        history.push(Message::new(Role::Assistant, done.response.text.clone()));
        last = Some(done.response);
    }
    Ok(Conversation {
        final_response: last.expect("sequence has a user turn"),
        transcript: history,
        request_digests: digests,
        usage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::ScriptedBackend;

    fn request() -> ChatRequest {
        let seq = MessageSequence::new(vec![Message::new(Role::User, "Is A linked to B?")]).unwrap();
        ChatRequest::new(seq, &RequestParams::new("m1"), 0)
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            backoff_base: Duration::ZERO,
        }
    }

    #[test]
    fn digest_depends_on_every_field() {
        let base = request();
        let mut other = base.clone();
        other.model_id = "m2".into();
        assert_ne!(base.digest(), other.digest());
        let mut other = base.clone();
        other.sample = 1;
        assert_ne!(base.digest(), other.digest());
        let mut other = base.clone();
        other.temperature = 0.5;
        assert_ne!(base.digest(), other.digest());
        assert_eq!(base.digest(), request().digest());
    }

    #[test]
    fn retries_rate_limits_then_succeeds() {
        let backend = ScriptedBackend::new("scripted").with_failures(vec![
            GatewayError::RateLimited { retry_after: None },
            GatewayError::RateLimited { retry_after: None },
        ]);
        let done = complete(&backend, &request(), &fast()).unwrap();
        assert_eq!(done.attempts, 3);
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let backend = ScriptedBackend::new("scripted").with_failures(vec![
            GatewayError::Transport("reset".into()),
            GatewayError::Transport("reset".into()),
            GatewayError::Transport("reset".into()),
        ]);
        assert!(matches!(
            complete(&backend, &request(), &fast()),
            Err(GatewayError::Transport(_))
        ));
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let backend = ScriptedBackend::new("scripted").with_failures(vec![GatewayError::Api {
            status: 400,
            message: "bad".into(),
        }]);
        assert!(complete(&backend, &request(), &fast()).is_err());
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy {
            max_attempts: 5,
            backoff_base: Duration::from_millis(100),
        };
        let e = GatewayError::Transport("x".into());
        assert_eq!(p.delay(1, &e), Duration::from_millis(100));
        assert_eq!(p.delay(3, &e), Duration::from_millis(400));
        let hinted = GatewayError::RateLimited {
            retry_after: Some(Duration::from_secs(2)),
        };
        assert_eq!(p.delay(1, &hinted), Duration::from_secs(2));
    }

    #[test]
    fn conversation_keeps_history_within_session() {
        let backend = ScriptedBackend::new("scripted").with_reply(|req| {
            let n = req.messages.user_turns().count();
            format!("reply {n}")
        });
        let seq = MessageSequence::new(vec![
            Message::new(Role::System, "ctx"),
            Message::new(Role::User, "first"),
            Message::new(Role::User, "second"),
        ])
        .unwrap();
        let conv = run_conversation(&backend, &seq, &RequestParams::new("m"), 0, &fast()).unwrap();
        assert_eq!(conv.final_response.text, "reply 2");
        assert_eq!(conv.request_digests.len(), 2);
        let roles: Vec<Role> = conv.transcript.iter().map(|m| m.role).collect();
        assert_eq!(
            roles,
            vec![Role::System, Role::User, Role::Assistant, Role::User, Role::Assistant]
        );
        assert_eq!(conv.reasoning_text().as_deref(), Some("reply 1"));
        let seen = backend.requests();
        assert_eq!(seen[1].messages.messages()[2].content, "reply 1");
    }
}
