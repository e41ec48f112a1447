use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::payload::{parse_payload, ParseFailure};
use super::provider::{CompletionProvider, CompletionRequest, Decoding, ProviderError};
use super::template::{Bindings, TemplateError, TemplateId, JSON_REMINDER};
use crate::rng::sha256_hex;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("{template}: gave up after {attempts} attempts ({})", last_failure(.ledger))]
    Exhausted { template: TemplateId, attempts: u32, ledger: Vec<AttemptRecord> },
    #[error("{template}: {source}")]
    Provider { template: TemplateId, source: ProviderError },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{template}: unusable completion in exchange {exchange_id}: {reason}")]
    Payload { template: TemplateId, exchange_id: String, reason: String },
    #[error("exchange log: {0}")]
    Log(#[from] std::io::Error),
}

fn last_failure(ledger: &[AttemptRecord]) -> &str {
    ledger.last().map_or("no attempts", |a| a.outcome.as_str())
}

impl LlmError {
    /// True when the failure came from the provider side rather than from
    /// bad input or an unusable (but delivered) completion.
    pub fn is_provider_failure(&self) -> bool {
        matches!(self, LlmError::Exhausted { .. } | LlmError::Provider { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadOutcome {
    Parsed(Value),
    Failed(ParseFailure),
}

impl PayloadOutcome {
    pub fn value(&self) -> Option<&Value> {
        match self {
            PayloadOutcome::Parsed(v) => Some(v),
            PayloadOutcome::Failed(_) => None,
        }
    }
}

/// One logical prompt/response round, including any retries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmExchange {
    pub exchange_id: String,
    pub template_id: TemplateId,
    pub rendered_prompt: String,
    pub model_id: String,
    pub raw_completion: String,
    pub parsed_payload: PayloadOutcome,
    /// Provider calls made, counting transport retries and the JSON reminder.
    pub attempts: u32,
    pub attempt_ledger: Vec<AttemptRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Cap on provider calls per exchange.
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub base_delay: Duration,
    #[serde(with = "millis")]
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 4, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(8) }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy { max_attempts, base_delay: Duration::ZERO, max_delay: Duration::ZERO }
    }

    /// Delay before call `attempt + 1`, doubling from `base_delay`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
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

/// Counting semaphore capping in-flight provider requests.
pub struct PermitLimiter {
    capacity: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    peak: AtomicU64,
}

pub struct Permit<'a>(&'a PermitLimiter);

impl PermitLimiter {
    pub fn new(capacity: usize) -> Self {
        PermitLimiter { capacity: capacity.max(1), in_flight: Mutex::new(0), freed: Condvar::new(), peak: AtomicU64::new(0) }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.capacity {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        self.peak.fetch_max(*n as u64, Ordering::Relaxed);
        Permit(self)
    }

    /// Highest number of simultaneously held permits so far.
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::Relaxed) as usize
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// What to send: a template, its bindings, and where to send it.
#[derive(Debug, Clone)]
pub struct ExchangeSpec<'a> {
    pub template: TemplateId,
    pub bindings: &'a Bindings,
    pub model_id: &'a str,
    pub decoding: Decoding,
    pub tags: BTreeMap<String, String>,
}

impl<'a> ExchangeSpec<'a> {
    pub fn new(template: TemplateId, bindings: &'a Bindings, model_id: &'a str, decoding: Decoding) -> Self {
        ExchangeSpec { template, bindings, model_id, decoding, tags: BTreeMap::new() }
    }

    pub fn tag(mut self, key: &str, value: impl Into<String>) -> Self {
        self.tags.insert(key.to_string(), value.into());
        self
    }
}

pub struct Gateway {
    provider: Arc<dyn CompletionProvider>,
    policy: RetryPolicy,
    limiter: PermitLimiter,
    log: Option<Mutex<BufWriter<File>>>,
    provider_calls: AtomicU64,
}

impl Gateway {
    pub fn new(provider: Arc<dyn CompletionProvider>, policy: RetryPolicy, max_in_flight: usize) -> Self {
        Gateway {
            provider,
            policy,
            limiter: PermitLimiter::new(max_in_flight),
            log: None,
            provider_calls: AtomicU64::new(0),
        }
    }

    /// Appends every exchange to `path` as one JSON line.
    pub fn with_log(mut self, path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.log = Some(Mutex::new(BufWriter::new(file)));
        Ok(self)
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    pub fn limiter(&self) -> &PermitLimiter {
        &self.limiter
    }

    pub fn provider_calls(&self) -> u64 {
        self.provider_calls.load(Ordering::Relaxed)
    }

    /// Sends a rendered prompt, retrying transport failures with exponential
    /// backoff. `ledger` receives one record per provider call; no more than
    /// `budget` calls are made.
    fn complete_within(
        &self,
        mut request: CompletionRequest,
        budget: u32,
        ledger: &mut Vec<AttemptRecord>,
    ) -> Result<String, LlmError> {
        let template = request.template_id;
        let mut used = 0;
        loop {
            if used >= budget {
                return Err(LlmError::Exhausted { template, attempts: ledger.len() as u32, ledger: ledger.clone() });
            }
            if used > 0 {
                std::thread::sleep(self.policy.backoff(used));
            }
            used += 1;
            request.attempt = ledger.len() as u32 + 1;
            self.provider_calls.fetch_add(1, Ordering::Relaxed);
            log::debug!("[{template}] model={} attempt={}", request.model_id, request.attempt);
            let result = {
                let _permit = self.limiter.acquire();
                self.provider.complete(&request)
            };
            match result {
                Ok(text) => {
                    ledger.push(AttemptRecord { attempt: request.attempt, outcome: "ok".into() });
                    return Ok(text);
                }
                Err(e) => {
                    log::warn!("[{template}] attempt {} failed: {e}", request.attempt);
                    ledger.push(AttemptRecord { attempt: request.attempt, outcome: e.to_string() });
                    if !e.is_retryable() {
                        return Err(LlmError::Provider { template, source: e });
                    }
                }
            }
        }
    }

    /// Sends an already-rendered prompt and returns the raw completion.
    pub fn complete(
        &self,
        template: TemplateId,
        prompt: &str,
        model_id: &str,
        decoding: Decoding,
    ) -> Result<(String, Vec<AttemptRecord>), LlmError> {
        let request = CompletionRequest {
            template_id: template,
            prompt: prompt.to_string(),
            model_id: model_id.to_string(),
            decoding,
            bindings: Bindings::new(),
            tags: BTreeMap::new(),
            attempt: 1,
        };
        let mut ledger = Vec::new();
        let text = self.complete_within(request, self.policy.max_attempts, &mut ledger)?;
        Ok((text, ledger))
    }

    /// Renders, completes and parses. A completion that does not parse is
    /// retried once with a JSON reminder appended; if that also fails the
    /// exchange is returned with a [`PayloadOutcome::Failed`] payload.
    pub fn exchange(&self, spec: &ExchangeSpec<'_>) -> Result<LlmExchange, LlmError> {
        let template = spec.template.template();
        let prompt = template.render(spec.bindings)?;
        let exchange_id = sha256_hex(format!("{}\n{}\n{}", spec.template, spec.model_id, prompt).as_bytes())[..16].to_string();
        let base = CompletionRequest {
            template_id: spec.template,
            prompt: prompt.clone(),
            model_id: spec.model_id.to_string(),
            decoding: spec.decoding,
            bindings: spec.bindings.clone(),
            tags: spec.tags.clone(),
            attempt: 1,
        };
        let mut ledger = Vec::new();
        let max = self.policy.max_attempts;
        let mut raw = self.complete_within(base.clone(), max, &mut ledger)?;
        let mut parsed = parse_payload(&raw, template.expected_payload);
        if let Err(failure) = &parsed {
            log::info!("[{}] unparseable completion ({failure}); retrying with reminder", spec.template);
            let remaining = max.saturating_sub(ledger.len() as u32);
            if remaining > 0 {
                let mut retry = base;
                retry.prompt = format!("{prompt}\n\n{JSON_REMINDER}");
                raw = self.complete_within(retry, remaining, &mut ledger)?;
                parsed = parse_payload(&raw, template.expected_payload);
            }
        }
        let exchange = LlmExchange {
            exchange_id,
            template_id: spec.template,
            rendered_prompt: prompt,
            model_id: spec.model_id.to_string(),
            raw_completion: raw,
            parsed_payload: match parsed {
                Ok(v) => PayloadOutcome::Parsed(v),
                Err(f) => PayloadOutcome::Failed(f),
            },
            attempts: ledger.len() as u32,
            attempt_ledger: ledger,
        };
        self.record(&exchange)?;
        Ok(exchange)
    }

    /// Like [`Gateway::exchange`] but a parse failure is an error.
    pub fn exchange_payload(&self, spec: &ExchangeSpec<'_>) -> Result<(Value, LlmExchange), LlmError> {
        let exchange = self.exchange(spec)?;
        match &exchange.parsed_payload {
            PayloadOutcome::Parsed(v) => Ok((v.clone(), exchange)),
            PayloadOutcome::Failed(f) => Err(LlmError::Payload {
                template: exchange.template_id,
                exchange_id: exchange.exchange_id.clone(),
                reason: f.reason.clone(),
            }),
        }
    }

    fn record(&self, exchange: &LlmExchange) -> Result<(), LlmError> {
        if let Some(log) = &self.log {
            let line = serde_json::to_string(exchange).expect("exchange serializes");
            let mut w = log.lock().unwrap();
            writeln!(w, "{line}")?;
            w.flush()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::provider::ScriptedProvider;
    use crate::llm::template::bindings;

    fn gateway(p: Arc<ScriptedProvider>, max: u32) -> Gateway {
        Gateway::new(p, RetryPolicy::immediate(max), 8)
    }

    fn judge_bindings() -> Bindings {
        bindings([("facts", "pole is black"), ("question", "what colour?")])
    }

    #[test]
    fn stub_text_passes_through() {
        let p = Arc::new(ScriptedProvider::texts(["black"]));
        let gw = gateway(p.clone(), 3);
        let b = judge_bindings();
        let ex = gw.exchange(&ExchangeSpec::new(TemplateId::Judge, &b, "m", Decoding::JUDGING)).unwrap();
        assert_eq!(ex.raw_completion, "black");
        assert_eq!(ex.attempts, 1);
        assert_eq!(p.calls()[0].decoding.temperature, 0.0);
    }

    #[test]
    fn two_transport_failures_then_success() {
        let p = Arc::new(ScriptedProvider::new([
            Err(ProviderError::Transport("reset".into())),
            Err(ProviderError::Transport("reset".into())),
            Ok("black".into()),
        ]));
        let gw = gateway(p.clone(), 4);
        let b = judge_bindings();
        let ex = gw.exchange(&ExchangeSpec::new(TemplateId::Judge, &b, "m", Decoding::JUDGING)).unwrap();
        assert_eq!(ex.attempts, 3);
        assert_eq!(p.calls().iter().map(|c| c.attempt).collect::<Vec<_>>(), [1, 2, 3]);
    }

    #[test]
    fn timeouts_exhaust_the_budget() {
        let p = Arc::new(ScriptedProvider::new((0..5).map(|_| Err(ProviderError::Timeout("slow".into())))));
        let gw = gateway(p.clone(), 3);
        let b = judge_bindings();
        let err = gw.exchange(&ExchangeSpec::new(TemplateId::Judge, &b, "m", Decoding::JUDGING)).unwrap_err();
        match err {
            LlmError::Exhausted { attempts, ledger, .. } => {
                assert_eq!(attempts, 3);
                assert_eq!(ledger.len(), 3);
                assert!(ledger.iter().all(|a| a.outcome.contains("timed out")));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.remaining(), 2);
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let p = Arc::new(ScriptedProvider::new([Err(ProviderError::Auth("bad key".into())), Ok("x".into())]));
        let gw = gateway(p.clone(), 4);
        let b = judge_bindings();
        let err = gw.exchange(&ExchangeSpec::new(TemplateId::Judge, &b, "m", Decoding::JUDGING)).unwrap_err();
        assert!(matches!(err, LlmError::Provider { source: ProviderError::Auth(_), .. }));
        assert!(err.is_provider_failure());
        assert_eq!(p.calls().len(), 1);
    }

    #[test]
    fn parse_failure_gets_one_reminder_retry() {
        let p = Arc::new(ScriptedProvider::texts(["I think the answer is q", r#"{"question": "q", "answer": "a"}"#]));
        let gw = gateway(p.clone(), 4);
        let b = bindings([("triples", "[]"), ("last_object", "a"), ("intermediate_objects", "")]);
        let (v, ex) = gw
            .exchange_payload(&ExchangeSpec::new(TemplateId::QaGeneration, &b, "m", Decoding::GENERATION))
            .unwrap();
        assert_eq!(v["answer"], "a");
        assert_eq!(ex.attempts, 2);
        let calls = p.calls();
        assert!(calls[1].prompt.ends_with(JSON_REMINDER));
        assert_eq!(ex.rendered_prompt, calls[0].prompt);
    }

    #[test]
    fn second_parse_failure_is_a_payload_error() {
        let p = Arc::new(ScriptedProvider::texts(["nope", "still nope", "{}"]));
        let gw = gateway(p.clone(), 4);
        let b = bindings([("list_of_entities", "[]")]);
        let err = gw
            .exchange_payload(&ExchangeSpec::new(TemplateId::EdgeGeneration, &b, "m", Decoding::GENERATION))
            .unwrap_err();
        assert!(matches!(err, LlmError::Payload { .. }));
        assert_eq!(p.calls().len(), 2);
    }

    #[test]
    fn exchanges_are_logged_as_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ex.jsonl");
        let p = Arc::new(ScriptedProvider::texts(["a", "b"]));
        let gw = gateway(p, 2).with_log(&path).unwrap();
        let b = judge_bindings();
        for _ in 0..2 {
            gw.exchange(&ExchangeSpec::new(TemplateId::Judge, &b, "m", Decoding::JUDGING)).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<LlmExchange> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].raw_completion, "b");
        assert_eq!(rows[0].template_id, TemplateId::Judge);
    }

    #[test]
    fn limiter_caps_concurrency() {
        let slow = |_: &CompletionRequest| {
            std::thread::sleep(Duration::from_millis(5));
            Ok::<_, ProviderError>("x".to_string())
        };
        let gw = Arc::new(Gateway::new(Arc::new(slow), RetryPolicy::immediate(1), 3));
        std::thread::scope(|s| {
            for _ in 0..12 {
                let gw = gw.clone();
                s.spawn(move || {
                    let b = judge_bindings();
                    gw.exchange(&ExchangeSpec::new(TemplateId::Judge, &b, "m", Decoding::JUDGING)).unwrap();
                });
            }
        });
        assert!(gw.limiter().peak() <= 3);
        assert_eq!(gw.provider_calls(), 12);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy { max_attempts: 6, base_delay: Duration::from_millis(100), max_delay: Duration::from_millis(350) };
        let d: Vec<u128> = (1..=4).map(|a| p.backoff(a).as_millis()).collect();
        assert_eq!(d, [100, 200, 350, 350]);
    }
}
