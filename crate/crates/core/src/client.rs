//! HTTP plumbing and the chat-completion contract shared by the generation
//! model and the model under test.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Environment variable holding the generation model's API key.
pub const GEN_API_KEY_ENV: &str = "AUDIT_GEN_API_KEY";
/// Environment variable holding the model-under-test API key.
pub const MODEL_API_KEY_ENV: &str = "AUDIT_MODEL_API_KEY";
/// Environment variable holding the remote extractor's auth token.
pub const EXTRACTOR_API_KEY_ENV: &str = "AUDIT_EXTRACTOR_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response schema violation: {0}")]
    Schema(String),
}

impl ClientError {
    fn retryable(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Status { status, .. } => *status == 429 || *status >= 500,
            ClientError::Schema(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// Wire body: `{"model", "messages": [{"role","content"}], "temperature"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct ChatResponse {
    content: String,
}

/// Anything that can answer a chat request with a single text completion.
pub trait GenerationClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError>;
}

impl<T: GenerationClient + ?Sized> GenerationClient for &T {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        (**self).complete(request)
    }
}

impl<T: GenerationClient + ?Sized> GenerationClient for Box<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        (**self).complete(request)
    }
}

/// JSON-over-HTTP endpoint with bearer auth and bounded retries on transport
/// errors, 429 and 5xx.
#[derive(Debug, Clone)]
pub struct JsonEndpoint {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
    max_retries: u32,
}

impl JsonEndpoint {
    pub fn new(url: impl Into<String>, timeout: Duration, max_retries: u32, api_key: Option<String>) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            url: url.into(),
            api_key,
            max_retries,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn post<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R, ClientError> {
        let mut attempt = 0;
        loop {
            match self.post_once(body) {
                Err(e) if e.retryable() && attempt < self.max_retries => {
                    attempt += 1;
                    tracing::debug!(url = %self.url, attempt, error = %e, "retrying");
                    std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
                }
                other => return other,
            }
        }
    }

    fn post_once<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R, ClientError> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = match req.send_json(body) {
            Ok(resp) => resp,
            Err(ureq::Error::Status(status, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                return Err(ClientError::Status { status, body });
            }
            Err(e) => return Err(ClientError::Transport(e.to_string())),
        };
        if resp.status() != 200 {
            return Err(ClientError::Status {
                status: resp.status(),
                body: resp.into_string().unwrap_or_default(),
            });
        }
        let text = resp
            .into_string()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| ClientError::Schema(e.to_string()))
    }
}

/// Reads the key from `env_var`, treating an empty value as unset.
pub fn api_key_from_env(env_var: &str) -> Option<String> {
    std::env::var(env_var).ok().filter(|v| !v.is_empty())
}

/// Chat client speaking the `{"content": ...}` response contract.
#[derive(Debug, Clone)]
pub struct HttpChatClient {
    endpoint: JsonEndpoint,
}

impl HttpChatClient {
    pub fn new(endpoint: JsonEndpoint) -> Self {
        Self { endpoint }
    }
}

impl GenerationClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let resp: ChatResponse = self.endpoint.post(request)?;
        Ok(resp.content)
    }
}
