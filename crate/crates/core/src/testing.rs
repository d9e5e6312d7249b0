//! Scriptable in-process backends for tests, demos and fixture generation.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::gateway::{ChatBackend, ChatRequest, ChatResponse, GatewayError, TokenLogprob, Usage};

type Responder = Box<dyn Fn(&ChatRequest) -> ChatResponse + Send + Sync>;

#[derive(Debug, Clone)]
pub struct CallLog {
    pub request: ChatRequest,
    pub start: Instant,
    pub end: Instant,
}

/// A backend driven by a closure, with optional injected failures and an
/// artificial delay. It records every call and the peak number of calls in
/// flight.
pub struct ScriptedBackend {
    id: String,
    failures: Mutex<VecDeque<GatewayError>>,
    responder: Responder,
    delay: Duration,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    log: Mutex<Vec<CallLog>>,
}

impl ScriptedBackend {
    /// Answers every request with `True` at log-probability 0.
    pub fn new(id: impl Into<String>) -> Self {
        let id = id.into();
        let backend_id = id.clone();
        Self {
            id,
            failures: Mutex::new(VecDeque::new()),
            responder: Box::new(move |_| verdict_response("True", Some(0.0), &backend_id)),
            delay: Duration::ZERO,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Failures returned, in order, before any successful reply.
    pub fn with_failures(self, failures: Vec<GatewayError>) -> Self {
        *self.failures.lock().unwrap() = failures.into();
        self
    }

    /// Replies with the given text, tokenized with log-probability 0.
    pub fn with_reply<F>(mut self, reply: F) -> Self
    where
        F: Fn(&ChatRequest) -> String + Send + Sync + 'static,
    {
        let id = self.id.clone();
        self.responder = Box::new(move |req| verdict_response(&reply(req), Some(0.0), &id));
        self
    }

    pub fn with_responder<F>(mut self, responder: F) -> Self
    where
        F: Fn(&ChatRequest) -> ChatResponse + Send + Sync + 'static,
    {
        self.responder = Box::new(responder);
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn log(&self) -> Vec<CallLog> {
        self.log.lock().unwrap().clone()
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log().into_iter().map(|c| c.request).collect()
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        let start = Instant::now();
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let failure = self.failures.lock().unwrap().pop_front();
        let result = match failure {
            Some(e) => Err(e),
            None => Ok((self.responder)(request)),
        };
        let end = Instant::now();
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        self.log.lock().unwrap().push(CallLog {
            request: request.clone(),
            start,
            end,
        });
        result
    }
}

/// Splits text into whitespace-led tokens the way chat APIs report them.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() && !current.trim().is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
        current.push(c);
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Builds a response whose last `True`/`False` token carries
/// `verdict_logprob`; every other token has log-probability 0. With `None`
/// the response carries no log-probabilities at all.
pub fn verdict_response(text: &str, verdict_logprob: Option<f64>, backend_id: &str) -> ChatResponse {
    let token_logprobs = verdict_logprob.map(|lp| {
        let tokens = tokenize(text);
        let verdict_at = tokens.iter().rposition(|t| {
            let w = t.trim().trim_matches(|c: char| !c.is_alphanumeric());
            w.eq_ignore_ascii_case("true") || w.eq_ignore_ascii_case("false")
        });
        tokens
            .into_iter()
            .enumerate()
            .map(|(i, token)| TokenLogprob {
                token,
                logprob: if Some(i) == verdict_at { lp } else { 0.0 },
            })
            .collect()
    });
    let output_tokens = tokenize(text).len() as u64;
    ChatResponse {
        text: text.to_string(),
        token_logprobs,
        backend_id: backend_id.to_string(),
        latency_ms: 0,
        usage: Usage {
            input_tokens: 0,
            output_tokens,
        },
    }
}
