//! OpenAI-compatible `/chat/completions` backend.
//!
//! Credentials come from an environment variable and are never written to
//! disk. Only the request body fields below are sent; `ChatRequest::sample`
//! stays local.

use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest, ChatResponse, GatewayError, TokenLogprob, Usage};

#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>, timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            client,
        })
    }

    /// Reads the API key from `env_var`; a missing variable is reported
    /// before any request is made.
    pub fn from_env(endpoint: impl Into<String>, env_var: &str, timeout: Duration) -> Result<Self, GatewayError> {
        let key = std::env::var(env_var)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| GatewayError::MissingCredential(env_var.to_string()))?;
        Self::new(endpoint, key, timeout)
    }
}

/// The JSON body sent for `request`.
pub fn request_body(request: &ChatRequest) -> Value {
    let messages: Vec<Value> = request
        .messages
        .messages()
        .iter()
        .map(|m| json!({ "role": m.role, "content": m.content }))
        .collect();
    let mut body = json!({
        "model": request.model_id,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    });
    if request.want_logprobs {
        body["logprobs"] = Value::Bool(true);
    }
    body
}

/// Parses a successful response body.
pub fn parse_response_body(body: &Value, backend_id: &str, latency: Duration) -> Result<ChatResponse, GatewayError> {
    let choice = body
        .pointer("/choices/0")
        .ok_or_else(|| GatewayError::Malformed("missing choices[0]".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::Malformed("missing message content".into()))?
        .to_string();
    let token_logprobs = match choice.pointer("/logprobs/content").and_then(Value::as_array) {
        Some(items) => Some(
            items
                .iter()
                .map(|t| {
                    let token = t.get("token").and_then(Value::as_str);
                    let logprob = t.get("logprob").and_then(Value::as_f64);
                    match (token, logprob) {
                        (Some(token), Some(lp)) => Ok(TokenLogprob {
                            token: token.to_string(),
                            logprob: lp.min(0.0),
                        }),
                        _ => Err(GatewayError::Malformed("bad logprob entry".into())),
                    }
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    let count = |key: &str| body.pointer(&format!("/usage/{key}")).and_then(Value::as_u64).unwrap_or(0);
    Ok(ChatResponse {
        text,
        token_logprobs,
        backend_id: backend_id.to_string(),
        latency_ms: latency.as_millis() as u64,
        usage: Usage {
            input_tokens: count("prompt_tokens"),
            output_tokens: count("completion_tokens"),
        },
    })
}

/// Maps a non-success status to an error; 429 and 5xx are retryable.
pub fn status_error(status: u16, retry_after: Option<&str>, body: &str) -> GatewayError {
    match status {
        429 => GatewayError::RateLimited {
            retry_after: retry_after
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|s| s.is_finite() && *s >= 0.0)
                .map(Duration::from_secs_f64),
        },
        500..=599 => GatewayError::Transport(format!("server error {status}")),
        _ => GatewayError::Api {
            status,
            message: body.chars().take(500).collect(),
        },
    }
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let started = Instant::now();
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&request_body(request))
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let retry_after = response
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .map(str::to_string);
            let body = response.text().unwrap_or_default();
            return Err(status_error(status, retry_after.as_deref(), &body));
        }
        let body: Value = response
            .json()
            .map_err(|e| GatewayError::Malformed(e.to_string()))?;
        parse_response_body(&body, &self.id(), started.elapsed())
    }
}
