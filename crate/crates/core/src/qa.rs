//! Question, answer and chain-of-thought generation over sampled chains.
//!
//! A chain is serialized to subject/relation/object triples, the model writes
//! a question whose answer is the chain's answer, and then a step-by-step
//! explanation. Both outputs are checked structurally and regenerated once
//! before the chain is given up.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::context_gen::Labeler;
use crate::eval::normalize_answer;
use crate::graph::{sample_chain, AnswerKind, ChainConfig, ChainSubgraph, ContentGraph, Domain, GraphError};
use crate::llm::{bindings, decode, Decoding, ExchangeSpec, Gateway, LlmError, QaPayload, TemplateId};
use crate::rng::sha256_hex;
use crate::text::{contains_phrase, split_sentences};

/// Meta-phrases a CoT must not use: the reader never sees the subgraph.
pub const BANNED_COT_PHRASES: &[&str] = &["from the subgraph", "the relation shows", "the entity indicates"];

static FROM_IMAGE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bfrom (the )?image\b").expect("valid regex"));
static FROM_FIGURE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bfrom (the )?(figure|table)\b").expect("valid regex"));
static FROM_TEXT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bfrom the text context\b").expect("valid regex"));

/// Stages of the post-generation filter cascade, in application order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStage {
    IntermediateMentions,
    SingleModality,
    CotLength,
}

impl FilterStage {
    pub const ALL: [FilterStage; 3] =
        [FilterStage::IntermediateMentions, FilterStage::SingleModality, FilterStage::CotLength];
}

impl std::fmt::Display for FilterStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FilterStage::IntermediateMentions => "intermediate_mentions",
            FilterStage::SingleModality => "single_modality",
            FilterStage::CotLength => "cot_length",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// Stage not run (an earlier stage failed).
    Na,
    /// Judging could not complete; the record is excluded.
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub cot_sentences: Vec<String>,
    pub chain: ChainSubgraph,
    pub domain: Domain,
    pub hop_count: usize,
    #[serde(default)]
    pub filter_verdicts: BTreeMap<FilterStage, Verdict>,
    /// Exchanges that produced the accepted question and CoT.
    #[serde(default)]
    pub exchange_ids: Vec<String>,
}

impl QaRecord {
    /// Re-checks every structural property of an emitted record against the
    /// graph it was generated from.
    pub fn validate(&self, graph: &ContentGraph) -> Result<(), String> {
        self.chain.validate(graph)?;
        if self.hop_count != self.chain.hop_count {
            return Err(format!("hop_count {} but chain has {}", self.hop_count, self.chain.hop_count));
        }
        if self.domain != graph.domain {
            return Err(format!("record domain {} but graph domain {}", self.domain, graph.domain));
        }
        if self.answer.trim().is_empty() {
            return Err("empty answer".into());
        }
        let expected = chain_answer(&self.chain, graph)?;
        if normalize_answer(&expected) != normalize_answer(&self.answer) {
            return Err(format!("answer `{}` is not the chain answer `{expected}`", self.answer));
        }
        if let Some(term) = intermediate_mention(&self.question, &self.chain) {
            return Err(format!("question names intermediate entity `{term}`"));
        }
        if self.cot_sentences.is_empty() || self.cot_sentences.len() > MAX_COT_SENTENCES {
            return Err(format!("{} CoT sentences", self.cot_sentences.len()));
        }
        if self.cot_sentences.iter().any(|s| s.trim().is_empty()) {
            return Err("empty CoT sentence".into());
        }
        Ok(())
    }
}

/// Longest chain of thought a record may keep.
pub const MAX_COT_SENTENCES: usize = 10;

/// The answer a chain asks for: the attribute value, or the terminal's name.
pub fn chain_answer(chain: &ChainSubgraph, graph: &ContentGraph) -> Result<String, String> {
    match &chain.answer_kind {
        AnswerKind::Attribute { value } => Ok(value.clone()),
        AnswerKind::EntityName => graph
            .node(&chain.answer_node_id)
            .map(|n| n.name.clone())
            .ok_or_else(|| format!("unknown answer node `{}`", chain.answer_node_id)),
    }
}

/// The first intermediate-entity term (display name or proper name) the
/// question mentions, matched case-insensitively on whole words. The chain
/// head is given in the question and may be named.
pub fn intermediate_mention(question: &str, chain: &ChainSubgraph) -> Option<String> {
    for n in chain.intermediates() {
        let mut terms = vec![n.display_name.as_str()];
        if n.name != n.display_name {
            terms.push(n.name.as_str());
        }
        if let Some(t) = terms.into_iter().find(|t| contains_phrase(question, t)) {
            return Some(t.to_string());
        }
    }
    None
}

/// One chain step as the QA and CoT prompts see it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

/// Serializes a chain to triples in reasoning order, using prompt labels.
///
/// A step that walks a stored edge backwards keeps the walk direction in
/// subject/object and spells the stored fact out in the relation
/// (`"telephone pole (Image) maintained by company (X)"`), unless the stored
/// phrase already names an endpoint. An attribute answer adds a final
/// `(terminal, "is", value)` step.
pub fn chain_triples(chain: &ChainSubgraph, labeler: &Labeler) -> Vec<ChainTriple> {
    let mut out = Vec::with_capacity(chain.hop_count + 1);
    for (i, edge) in chain.edges.iter().enumerate() {
        let (from, to) = (&chain.path[i], &chain.path[i + 1]);
        let (from_label, to_label) = (labeler.label(&from.id).to_string(), labeler.label(&to.id).to_string());
        let embeds_names = contains_phrase(&edge.relation, labeler.stem(&from.id))
            || contains_phrase(&edge.relation, labeler.stem(&to.id));
        let relation = if edge.subject_id == from.id || embeds_names {
            edge.relation.clone()
        } else {
            format!("{to_label} {} {from_label}", edge.relation)
        };
        out.push(ChainTriple { subject: from_label, relation, object: to_label });
    }
    if let AnswerKind::Attribute { value } = &chain.answer_kind {
        out.push(ChainTriple {
            subject: labeler.label(&chain.terminal().id).to_string(),
            relation: "is".into(),
            object: value.clone(),
        });
    }
    out
}

/// The `subgraph` binding of the CoT prompt: the chain triples, each tagged
/// with the image (or, for papers, the figure) that shows it.
pub fn cot_subgraph(chain: &ChainSubgraph, graph: &ContentGraph, labeler: &Labeler) -> Value {
    let triples = chain_triples(chain, labeler);
    let mut out = Vec::with_capacity(triples.len());
    for (i, t) in triples.iter().enumerate() {
        let mut v = json!({"subject": t.subject, "relation": t.relation, "object": t.object});
        if let Some(edge) = chain.edges.get(i) {
            if graph.domain == Domain::SP {
                if let Some(fig) = &edge.figure_label {
                    v["figure"] = json!(fig);
                }
            } else {
                let ends = [&chain.path[i], &chain.path[i + 1]];
                let images: Vec<usize> = ends.iter().filter_map(|n| n.origin.image_index()).collect();
                if images.len() == 2 && images[0] == images[1] {
                    v["image"] = json!(labeler.image_reference(images[0]));
                }
            }
        } else if let Some(image) = chain.terminal().origin.image_index() {
            // the attribute step is seen in the terminal's image
            let key = if graph.domain == Domain::SP { "figure" } else { "image" };
            let tag = if graph.domain == Domain::SP { labeler.image_tag(image) } else { labeler.image_reference(image) };
            v[key] = json!(tag);
        }
        out.push(v);
    }
    Value::Array(out)
}

#[derive(Debug, Error)]
pub enum QaError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("question rejected after regeneration: {0}")]
    Question(String),
    #[error("chain of thought rejected after regeneration: {0}")]
    Cot(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Problems with a generated question, or `None` when acceptable.
pub fn check_question(payload: &QaPayload, chain: &ChainSubgraph, answer: &str) -> Option<String> {
    if payload.question.trim().is_empty() {
        return Some("empty question".into());
    }
    if let Some(term) = intermediate_mention(&payload.question, chain) {
        return Some(format!("question names intermediate entity `{term}`"));
    }
    if normalize_answer(&payload.answer) != normalize_answer(answer) {
        return Some(format!("model answered `{}`, expected `{answer}`", payload.answer));
    }
    None
}

/// Problems with a generated chain of thought, or `None` when acceptable.
pub fn check_cot(sentences: &[String], answer: &str, domain: Domain) -> Option<String> {
    let Some(last) = sentences.last() else {
        return Some("empty chain of thought".into());
    };
    if !contains_phrase(last, answer) && !normalize_answer(last).contains(&normalize_answer(answer)) {
        return Some(format!("last sentence does not state the answer `{answer}`"));
    }
    let text = sentences.join(" ");
    let lower = text.to_lowercase();
    if let Some(p) = BANNED_COT_PHRASES.iter().find(|p| lower.contains(*p)) {
        return Some(format!("uses banned phrase `{p}`"));
    }
    let visual = if domain == Domain::SP { &*FROM_FIGURE } else { &*FROM_IMAGE };
    if !visual.is_match(&text) {
        let what = if domain == Domain::SP { "a figure or table" } else { "an image" };
        return Some(format!("never attributes evidence to {what}"));
    }
    if !FROM_TEXT.is_match(&text) {
        return Some("never attributes evidence to the text context".into());
    }
    None
}

/// Asks for a question whose answer is `answer`; regenerates once on a
/// structural violation.
pub fn generate_question(
    chain: &ChainSubgraph,
    answer: &str,
    labeler: &Labeler,
    gateway: &Gateway,
    model_id: &str,
) -> Result<(QaPayload, Vec<String>), QaError> {
    let triples = chain_triples(chain, labeler);
    let triples_text =
        triples.iter().map(|t| serde_json::to_string(t).expect("plain struct")).collect::<Vec<_>>().join(",\n  ");
    let intermediates =
        chain.intermediates().iter().map(|n| labeler.label(&n.id).to_string()).collect::<Vec<_>>().join(", ");
    let b = bindings([
        ("triples", triples_text),
        ("last_object", answer.to_string()),
        ("intermediate_objects", intermediates),
    ]);
    let mut exchange_ids = Vec::new();
    let mut last_problem = String::new();
    for _ in 0..2 {
        let spec = ExchangeSpec::new(TemplateId::QaGeneration, &b, model_id, Decoding::GENERATION);
        let (value, ex) = match gateway.exchange_payload(&spec) {
            Ok(r) => r,
            Err(LlmError::Payload { reason, exchange_id, .. }) => {
                exchange_ids.push(exchange_id);
                last_problem = reason;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        exchange_ids.push(ex.exchange_id);
        let payload: QaPayload = decode(&value).map_err(|f| QaError::Question(f.reason))?;
        match check_question(&payload, chain, answer) {
            None => return Ok((payload, exchange_ids)),
            Some(problem) => {
                log::info!("question draft rejected: {problem}");
                last_problem = problem;
            }
        }
    }
    Err(QaError::Question(last_problem))
}

/// Asks for a step-by-step explanation; regenerates once on a structural
/// violation. Length is not checked here (the filter cascade prunes it).
pub fn generate_cot(
    chain: &ChainSubgraph,
    graph: &ContentGraph,
    question: &str,
    answer: &str,
    labeler: &Labeler,
    gateway: &Gateway,
    model_id: &str,
) -> Result<(Vec<String>, Vec<String>), QaError> {
    let subgraph = serde_json::to_string_pretty(&cot_subgraph(chain, graph, labeler)).expect("json value");
    let b = bindings([
        ("question", question.to_string()),
        ("answer", answer.to_string()),
        ("subgraph", subgraph),
    ]);
    let mut exchange_ids = Vec::new();
    let mut last_problem = String::new();
    for _ in 0..2 {
        let spec = ExchangeSpec::new(TemplateId::CotGeneration, &b, model_id, Decoding::GENERATION);
        let (value, ex) = gateway.exchange_payload(&spec)?;
        exchange_ids.push(ex.exchange_id);
        let sentences = split_sentences(value.as_str().unwrap_or_default());
        match check_cot(&sentences, answer, graph.domain) {
            None => return Ok((sentences, exchange_ids)),
            Some(problem) => {
                log::info!("CoT draft rejected: {problem}");
                last_problem = problem;
            }
        }
    }
    Err(QaError::Cot(last_problem))
}

/// Probability of each hop count when drawing a chain length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopDistribution(pub BTreeMap<usize, f64>);

impl Default for HopDistribution {
    /// Hop shares of the natural-image training split (2–5 hops).
    fn default() -> Self {
        let counts = [(2usize, 109_735f64), (3, 12_271.0), (4, 12_592.0), (5, 19_183.0)];
        let total: f64 = counts.iter().map(|(_, c)| c).sum();
        HopDistribution(counts.iter().map(|&(hop, c)| (hop, c / total)).collect())
    }
}

impl HopDistribution {
    pub fn validate(&self) -> Result<(), String> {
        if self.0.values().any(|p| !p.is_finite() || *p < 0.0) {
            return Err("hop probabilities must be finite and non-negative".into());
        }
        let sum: f64 = self.0.values().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(format!("hop probabilities sum to {sum}, not 1"));
        }
        if self.0.keys().any(|hop| *hop == 0 || *hop > Domain::NI.hop_bounds().max) {
            return Err("hop counts must lie in 1..=5".into());
        }
        Ok(())
    }

    /// Draws a hop count within `domain`'s bounds, renormalizing over the
    /// hop counts the domain allows; uniform if none of them has weight.
    pub fn sample<R: Rng + ?Sized>(&self, domain: Domain, rng: &mut R) -> usize {
        let bounds = domain.hop_bounds();
        let hops: Vec<usize> = (bounds.min..=bounds.max).collect();
        let weights: Vec<f64> = hops.iter().map(|hop| self.0.get(hop).copied().unwrap_or(0.0)).collect();
        match WeightedIndex::new(&weights) {
            Ok(dist) => hops[dist.sample(rng)],
            Err(_) => hops[rng.random_range(0..hops.len())],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaConfig {
    pub model_id: String,
    pub max_per_sample: usize,
    /// Chain draws per sample before giving up on filling `max_per_sample`.
    pub max_draws: usize,
    pub hops: HopDistribution,
    pub chain: ChainConfig,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            model_id: "stub".into(),
            max_per_sample: 3,
            max_draws: 12,
            hops: HopDistribution::default(),
            chain: ChainConfig::default(),
        }
    }
}

/// Why a drawn chain produced no record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRejection {
    pub hop_count: usize,
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QaOutcome {
    pub records: Vec<QaRecord>,
    pub rejections: Vec<QaRejection>,
    /// Draws where no chain of the drawn length existed.
    pub empty_draws: usize,
}

fn record_id(sample_key: &str, chain: &ChainSubgraph, answer: &str, question: &str) -> String {
    let path: Vec<&str> = chain.path.iter().map(|n| n.id.as_str()).collect();
    let material = format!("{sample_key}\n{}\n{answer}\n{question}", path.join("\u{1f}"));
    sha256_hex(material.as_bytes())[..16].to_string()
}

/// Draws chains from `graph` and turns them into up to `max_per_sample` records.
/// Chains repeating an earlier (path, answer) are skipped. Provider failures
/// abort the sample; unusable drafts only reject the chain.
pub fn generate_qa<R: Rng + ?Sized>(
    graph: &ContentGraph,
    sample_key: &str,
    labeler: &Labeler,
    gateway: &Gateway,
    config: &QaConfig,
    rng: &mut R,
) -> Result<QaOutcome, QaError> {
    config.hops.validate().map_err(QaError::Config)?;
    let mut outcome = QaOutcome::default();
    let mut seen = Vec::new();
    for _ in 0..config.max_draws {
        if outcome.records.len() >= config.max_per_sample {
            break;
        }
        let hops = config.hops.sample(graph.domain, rng);
        let Some(chain) = sample_chain(graph, hops, rng, &config.chain)? else {
            outcome.empty_draws += 1;
            continue;
        };
        let key = (chain.path.iter().map(|n| n.id.clone()).collect::<Vec<_>>(), chain.answer_kind.clone());
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        let answer = chain_answer(&chain, graph).map_err(|e| QaError::Graph(GraphError::Invalid(e)))?;
        let reject = |stage: &str, reason: String| QaRejection { hop_count: hops, stage: stage.into(), reason };
        let (qa, mut exchange_ids) = match generate_question(&chain, &answer, labeler, gateway, &config.model_id) {
            Ok(r) => r,
            Err(QaError::Question(reason)) => {
                outcome.rejections.push(reject("question", reason));
                continue;
            }
            Err(QaError::Llm(e)) if !e.is_provider_failure() => {
                outcome.rejections.push(reject("question", e.to_string()));
                continue;
            }
            Err(e) => return Err(e),
        };
        let cot = generate_cot(&chain, graph, &qa.question, &answer, labeler, gateway, &config.model_id);
        let (cot_sentences, cot_ids) = match cot {
            Ok(r) => r,
            Err(QaError::Cot(reason)) => {
                outcome.rejections.push(reject("cot", reason));
                continue;
            }
            Err(QaError::Llm(e)) if !e.is_provider_failure() => {
                outcome.rejections.push(reject("cot", e.to_string()));
                continue;
            }
            Err(e) => return Err(e),
        };
        exchange_ids.extend(cot_ids);
        outcome.records.push(QaRecord {
            id: record_id(sample_key, &chain, &answer, &qa.question),
            question: qa.question,
            answer,
            cot_sentences,
            domain: graph.domain,
            hop_count: chain.hop_count,
            chain,
            filter_verdicts: BTreeMap::new(),
            exchange_ids,
        });
    }
    Ok(outcome)
}
