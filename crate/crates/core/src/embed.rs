//! Client side of the embedding service contract (`POST /v1/embed`,
//! `GET /v1/health`) plus offline embedders for tests and stub runs.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine as _;
use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{classify_status, classify_transport, ProviderError};
use crate::text::word_tokens;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding service: {0}")]
    Service(#[from] ProviderError),
    #[error("no recorded embedding for {kind} input {input:?}")]
    NotRecorded { kind: EmbedKind, input: String },
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("malformed embedding response: {0}")]
    Malformed(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmbedKind {
    #[serde(rename = "sentence")]
    Sentence,
    #[serde(rename = "clip-text")]
    ClipText,
    #[serde(rename = "clip-image")]
    ClipImage,
}

impl std::fmt::Display for EmbedKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmbedKind::Sentence => "sentence",
            EmbedKind::ClipText => "clip-text",
            EmbedKind::ClipImage => "clip-image",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub kind: EmbedKind,
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f32>>,
    pub dim: usize,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthStatus {
    pub status: String,
    #[serde(default)]
    pub models: Vec<String>,
}

pub trait Embedder: Send + Sync {
    /// One vector per input, in input order.
    fn embed(&self, kind: EmbedKind, inputs: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;

    /// The `clip-image` input for an image file. Offline embedders key on the
    /// reference as written; the HTTP client sends the file's bytes in base64.
    fn image_payload(&self, reference: &str, _base_dir: &Path) -> Result<String, EmbedError> {
        Ok(reference.to_string())
    }
}

/// Cosine similarity. Inputs need not be normalized.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::Dimension(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// One entry of a recorded-embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedVector {
    pub kind: EmbedKind,
    pub input: String,
    pub vector: Vec<f32>,
}

/// Looks vectors up by exact `(kind, input)`.
#[derive(Debug, Default, Clone)]
pub struct RecordedEmbedder {
    table: HashMap<(EmbedKind, String), Vec<f32>>,
}

impl RecordedEmbedder {
    pub fn new(entries: impl IntoIterator<Item = RecordedVector>) -> Self {
        RecordedEmbedder { table: entries.into_iter().map(|e| ((e.kind, e.input), e.vector)).collect() }
    }

    /// Reads a JSON array of [`RecordedVector`]s.
    pub fn from_json_file(path: &Path) -> Result<Self, EmbedError> {
        let text = std::fs::read_to_string(path)?;
        let entries: Vec<RecordedVector> =
            serde_json::from_str(&text).map_err(|e| EmbedError::Malformed(format!("{}: {e}", path.display())))?;
        Ok(Self::new(entries))
    }

    pub fn insert(&mut self, kind: EmbedKind, input: impl Into<String>, vector: Vec<f32>) {
        self.table.insert((kind, input.into()), vector);
    }
}

impl Embedder for RecordedEmbedder {
    fn embed(&self, kind: EmbedKind, inputs: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        inputs
            .iter()
            .map(|i| {
                self.table
                    .get(&(kind, i.clone()))
                    .cloned()
                    .ok_or_else(|| EmbedError::NotRecorded { kind, input: i.clone() })
            })
            .collect()
    }
}

/// Deterministic bag-of-words embedder (feature hashing, unit-normalized).
/// Useful offline: sentences sharing vocabulary score high.
#[derive(Debug, Clone, Copy)]
pub struct TokenHashEmbedder {
    pub dim: usize,
}

impl Default for TokenHashEmbedder {
    fn default() -> Self {
        TokenHashEmbedder { dim: 256 }
    }
}

impl Embedder for TokenHashEmbedder {
    fn embed(&self, _kind: EmbedKind, inputs: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(inputs
            .iter()
            .map(|text| {
                let mut v = vec![0f32; self.dim];
                for tok in word_tokens(text) {
                    // FNV-1a
                    let hash = tok.bytes().fold(0xcbf2_9ce4_8422_2325u64, |hash, b| (hash ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
                    v[(hash % self.dim as u64) as usize] += 1.0;
                }
                let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
                v
            })
            .collect())
    }
}

/// HTTP client for the embedding service.
pub struct HttpEmbedder {
    client: Client,
    base_url: String,
    batch_size: usize,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self, EmbedError> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbedError::Service(ProviderError::Transport(e.to_string())))?;
        Ok(HttpEmbedder { client, base_url: base_url.trim_end_matches('/').to_string(), batch_size: 64 })
    }

    pub fn with_batch_size(mut self, n: usize) -> Self {
        self.batch_size = n.max(1);
        self
    }

    pub fn health(&self) -> Result<HealthStatus, EmbedError> {
        let resp = self
            .client
            .get(format!("{}/v1/health", self.base_url))
            .send()
            .map_err(|e| EmbedError::Service(classify_transport(e)))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(EmbedError::Service(classify_status(status, resp.text().unwrap_or_default())));
        }
        resp.json().map_err(|e| EmbedError::Malformed(e.to_string()))
    }

    fn embed_batch(&self, kind: EmbedKind, inputs: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let request = EmbedRequest { kind, inputs: inputs.to_vec() };
        let resp = self
            .client
            .post(format!("{}/v1/embed", self.base_url))
            .json(&request)
            .send()
            .map_err(|e| EmbedError::Service(classify_transport(e)))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(EmbedError::Service(classify_status(status, resp.text().unwrap_or_default())));
        }
        let body: EmbedResponse = resp.json().map_err(|e| EmbedError::Malformed(e.to_string()))?;
        if body.vectors.len() != inputs.len() {
            return Err(EmbedError::Malformed(format!(
                "{} vectors for {} inputs",
                body.vectors.len(),
                inputs.len()
            )));
        }
        if let Some(v) = body.vectors.iter().find(|v| v.len() != body.dim) {
            return Err(EmbedError::Dimension(v.len(), body.dim));
        }
        Ok(body.vectors)
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, kind: EmbedKind, inputs: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(self.batch_size) {
            out.extend(self.embed_batch(kind, chunk)?);
        }
        Ok(out)
    }

    fn image_payload(&self, reference: &str, base_dir: &Path) -> Result<String, EmbedError> {
        let bytes = std::fs::read(base_dir.join(reference))?;
        Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
    }
}

/// Wraps an embedder and keeps every vector it returns, so a run against a
/// live service can later be replayed with [`RecordedEmbedder`]. Image
/// entries are keyed by the file reference, not the payload sent.
pub struct RecordingEmbedder<E> {
    inner: E,
    seen: Mutex<BTreeMap<(EmbedKind, String), Vec<f32>>>,
    references: Mutex<HashMap<String, String>>,
}

impl<E: Embedder> RecordingEmbedder<E> {
    pub fn new(inner: E) -> Self {
        RecordingEmbedder { inner, seen: Mutex::default(), references: Mutex::default() }
    }

    /// Everything recorded so far, sorted by kind and input.
    pub fn recordings(&self) -> Vec<RecordedVector> {
        let seen = self.seen.lock().expect("recording lock");
        seen.iter().map(|((kind, input), vector)| RecordedVector { kind: *kind, input: input.clone(), vector: vector.clone() }).collect()
    }

    /// Writes the recordings as the JSON array [`RecordedEmbedder::from_json_file`] reads.
    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let json = serde_json::to_vec_pretty(&self.recordings()).expect("recordings serialize");
        std::fs::write(path, json)?;
        Ok(())
    }
}

impl<E: Embedder> Embedder for RecordingEmbedder<E> {
    fn embed(&self, kind: EmbedKind, inputs: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let vectors = self.inner.embed(kind, inputs)?;
        let references = self.references.lock().expect("recording lock");
        let mut seen = self.seen.lock().expect("recording lock");
        for (input, v) in inputs.iter().zip(&vectors) {
            let key = references.get(input).cloned().unwrap_or_else(|| input.clone());
            seen.insert((kind, key), v.clone());
        }
        Ok(vectors)
    }

    fn image_payload(&self, reference: &str, base_dir: &Path) -> Result<String, EmbedError> {
        let payload = self.inner.image_payload(reference, base_dir)?;
        self.references.lock().expect("recording lock").insert(payload.clone(), reference.to_string());
        Ok(payload)
    }
}

impl Embedder for Box<dyn Embedder> {
    fn embed(&self, kind: EmbedKind, inputs: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        (**self).embed(kind, inputs)
    }

    fn image_payload(&self, reference: &str, base_dir: &Path) -> Result<String, EmbedError> {
        (**self).image_payload(reference, base_dir)
    }
}
