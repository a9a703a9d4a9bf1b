//! OpenAI-compatible HTTP provider (`/chat/completions`, `/embeddings`).

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::embed::RawEmbeddings;
use super::{ChatMessage, ChatProvider, Completion, EmbeddingProvider, ModelConfig, ProviderError};

pub const API_BASE_ENV: &str = "TPGO_API_BASE";
pub const API_KEY_ENV: &str = "TPGO_API_KEY";

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    top_p: f64,
    stream: bool,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

pub struct OpenAiCompatible {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiCompatible {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            agent,
        }
    }

    /// Reads `TPGO_API_BASE` (required) and `TPGO_API_KEY` (optional).
    pub fn from_env(timeout: Duration) -> Result<Self, String> {
        let base = std::env::var(API_BASE_ENV).map_err(|_| API_BASE_ENV.to_string())?;
        Ok(Self::new(base, std::env::var(API_KEY_ENV).ok(), timeout))
    }

    fn post<T: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: impl Serialize,
    ) -> Result<T, ProviderError> {
        let url = format!("{}/{}", self.base_url, path);
        let mut request = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let text = response.body_mut().read_to_string().unwrap_or_default();
            let message = format!("HTTP {status}: {text}");
            return Err(if status == 408 || status == 429 || status >= 500 {
                ProviderError::Transient(message)
            } else {
                ProviderError::Rejected(message)
            });
        }
        response
            .body_mut()
            .read_json::<T>()
            .map_err(|e| ProviderError::Transient(format!("bad response body: {e}")))
    }
}

impl ChatProvider for OpenAiCompatible {
    fn complete(
        &self,
        config: &ModelConfig,
        messages: &[ChatMessage],
    ) -> Result<Completion, ProviderError> {
        let body = ChatRequest {
            model: &config.model_name,
            messages,
            temperature: config.temperature,
            top_p: config.top_p,
            stream: false,
        };
        let response: ChatResponse = self.post("chat/completions", body)?;
        let text = response
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Transient("response has no message content".into()))?;
        Ok(Completion {
            text,
            prompt_tokens: response.usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: response.usage.as_ref().and_then(|u| u.completion_tokens),
        })
    }
}

impl EmbeddingProvider for OpenAiCompatible {
    fn embed(
        &self,
        config: &ModelConfig,
        texts: &[String],
    ) -> Result<RawEmbeddings, ProviderError> {
        let body = EmbeddingRequest {
            model: &config.model_name,
            input: texts,
        };
        let mut response: EmbeddingResponse = self.post("embeddings", body)?;
        response.data.sort_by_key(|d| d.index);
        Ok(RawEmbeddings {
            vectors: response.data.into_iter().map(|d| d.embedding).collect(),
            prompt_tokens: response.usage.and_then(|u| u.prompt_tokens),
        })
    }
}
