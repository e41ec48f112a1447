use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::template::{Bindings, TemplateId};
use crate::rng::sha256_hex;

/// Decoding parameters forwarded to the provider.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f32,
    pub max_tokens: Option<u32>,
}

impl Decoding {
    /// Generation stages want variety.
    pub const GENERATION: Decoding = Decoding { temperature: 0.7, max_tokens: None };
    /// Judging stages must vote deterministically.
    pub const JUDGING: Decoding = Decoding { temperature: 0.0, max_tokens: None };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub template_id: TemplateId,
    pub prompt: String,
    pub model_id: String,
    pub decoding: Decoding,
    /// The bindings the prompt was rendered from. Providers that fabricate
    /// answers (stubs) read these instead of re-parsing the prompt.
    pub bindings: Bindings,
    /// Out-of-band labels for stubs and logs (e.g. which modality a judge sees);
    /// never sent to a real endpoint.
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    /// 1-based provider call number within the exchange.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("provider rejected the request: {0}")]
    Content(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport(_) | ProviderError::Timeout(_))
    }
}

pub trait CompletionProvider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError>;
}

impl<F> CompletionProvider for F
where
    F: Fn(&CompletionRequest) -> Result<String, ProviderError> + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        self(request)
    }
}

/// Replays a fixed queue of responses and records every request it sees.
#[derive(Default)]
pub struct ScriptedProvider {
    queue: Mutex<VecDeque<Result<String, ProviderError>>>,
    calls: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedProvider {
    pub fn new<I>(responses: I) -> Self
    where
        I: IntoIterator<Item = Result<String, ProviderError>>,
    {
        ScriptedProvider { queue: Mutex::new(responses.into_iter().collect()), calls: Mutex::default() }
    }

    pub fn texts<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(responses.into_iter().map(|s| Ok(s.into())))
    }

    pub fn calls(&self) -> Vec<CompletionRequest> {
        self.calls.lock().unwrap().clone()
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap().len()
    }
}

impl CompletionProvider for ScriptedProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        self.calls.lock().unwrap().push(request.clone());
        self.queue
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(ProviderError::Content("scripted provider exhausted".into())))
    }
}

/// One line of a recorded-response file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub model_id: String,
    pub prompt_sha256: String,
    pub completion: String,
}

/// Serves completions keyed by `(model_id, sha256(prompt))`.
pub struct RecordedProvider {
    table: HashMap<(String, String), String>,
}

impl RecordedProvider {
    pub fn new(recordings: impl IntoIterator<Item = Recording>) -> Self {
        RecordedProvider {
            table: recordings
                .into_iter()
                .map(|r| ((r.model_id, r.prompt_sha256), r.completion))
                .collect(),
        }
    }

    pub fn from_jsonl(path: &Path) -> std::io::Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut recordings = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            recordings.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
        }
        Ok(Self::new(recordings))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl CompletionProvider for RecordedProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        let key = (request.model_id.clone(), sha256_hex(request.prompt.as_bytes()));
        self.table.get(&key).cloned().ok_or_else(|| {
            ProviderError::Content(format!(
                "no recording for model `{}` prompt {} ({})",
                key.0, key.1, request.template_id
            ))
        })
    }
}

/// Wraps a provider and appends every successful completion to a recording file.
pub struct RecordingProvider<P> {
    inner: P,
    sink: Mutex<File>,
}

impl<P: CompletionProvider> RecordingProvider<P> {
    pub fn new(inner: P, path: &Path) -> std::io::Result<Self> {
        let sink = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RecordingProvider { inner, sink: Mutex::new(sink) })
    }
}

impl<P: CompletionProvider> CompletionProvider for RecordingProvider<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        let completion = self.inner.complete(request)?;
        let line = serde_json::to_string(&Recording {
            model_id: request.model_id.clone(),
            prompt_sha256: sha256_hex(request.prompt.as_bytes()),
            completion: completion.clone(),
        })
        .expect("recording serializes");
        let mut sink = self.sink.lock().unwrap();
        writeln!(sink, "{line}").map_err(|e| ProviderError::Transport(format!("recording sink: {e}")))?;
        Ok(completion)
    }
}
