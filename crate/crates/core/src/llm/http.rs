use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::provider::{CompletionProvider, CompletionRequest, ProviderError};

/// Endpoint settings for an OpenAI-compatible chat-completions server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEndpoint {
    /// Base URL up to and including the version segment, e.g. `http://host:8000/v1`.
    pub base_url: String,
    /// Environment variable holding the bearer token; unset means no auth header.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

pub struct HttpChatProvider {
    client: Client,
    url: String,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

impl HttpChatProvider {
    pub fn new(endpoint: &HttpEndpoint) -> Result<Self, ProviderError> {
        let api_key = match &endpoint.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| ProviderError::Auth(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(HttpChatProvider {
            client,
            url: format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/')),
            api_key,
        })
    }
}

pub(crate) fn classify_status(status: StatusCode, body: String) -> ProviderError {
    match status.as_u16() {
        401 | 403 => ProviderError::Auth(format!("{status}: {body}")),
        408 | 429 | 500..=599 => ProviderError::Transport(format!("{status}: {body}")),
        _ => ProviderError::Content(format!("{status}: {body}")),
    }
}

pub(crate) fn classify_transport(e: reqwest::Error) -> ProviderError {
    if e.is_timeout() {
        ProviderError::Timeout(e.to_string())
    } else {
        ProviderError::Transport(e.to_string())
    }
}

impl CompletionProvider for HttpChatProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        let body = ChatRequest {
            model: &request.model_id,
            messages: [ChatMessage { role: "user", content: &request.prompt }],
            temperature: request.decoding.temperature,
            max_tokens: request.decoding.max_tokens,
        };
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(classify_transport)?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(classify_status(status, text));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| ProviderError::Content(format!("malformed chat response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Content("response has no message content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::provider::Decoding;
    use crate::llm::template::{Bindings, TemplateId};
    use crate::testutil::MockServer;

    fn request() -> CompletionRequest {
        CompletionRequest {
            template_id: TemplateId::Judge,
            prompt: "hello".into(),
            model_id: "judge-a".into(),
            decoding: Decoding::JUDGING,
            bindings: Bindings::new(),
            tags: Default::default(),
            attempt: 1,
        }
    }

    fn endpoint(server: &MockServer) -> HttpEndpoint {
        HttpEndpoint { base_url: format!("{}/v1", server.url()), api_key_env: None, timeout_secs: 5 }
    }

    #[test]
    fn posts_chat_request_and_reads_content() {
        let server = MockServer::start(vec![(200, r#"{"choices":[{"message":{"role":"assistant","content":"black"}}]}"#.into())]);
        let p = HttpChatProvider::new(&endpoint(&server)).unwrap();
        assert_eq!(p.complete(&request()).unwrap(), "black");
        let seen = server.requests();
        assert_eq!(seen[0].path, "/v1/chat/completions");
        let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
        assert_eq!(body["model"], "judge-a");
        assert_eq!(body["messages"][0]["content"], "hello");
        assert_eq!(body["temperature"], 0.0);
    }

    #[test]
    fn status_codes_map_to_error_classes() {
        let server = MockServer::start(vec![
            (401, "nope".into()),
            (503, "busy".into()),
            (400, "bad".into()),
        ]);
        let p = HttpChatProvider::new(&endpoint(&server)).unwrap();
        assert!(matches!(p.complete(&request()), Err(ProviderError::Auth(_))));
        assert!(matches!(p.complete(&request()), Err(ProviderError::Transport(_))));
        assert!(matches!(p.complete(&request()), Err(ProviderError::Content(_))));
    }

    #[test]
    fn missing_key_variable_is_an_auth_error() {
        let ep = HttpEndpoint {
            base_url: "http://127.0.0.1:9".into(),
            api_key_env: Some("HOPWEAVE_TEST_SURELY_UNSET_KEY".into()),
            timeout_secs: 1,
        };
        assert!(matches!(HttpChatProvider::new(&ep), Err(ProviderError::Auth(_))));
    }
}
