//! SQuAD-style answer scoring (exact match and token F1) and the evaluation
//! harness for direct-answer and chain-of-thought runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Domain;
use crate::llm::{bindings, render, TemplateError, TemplateId};
use crate::text::split_sentences;

static ARTICLES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(a|an|the)\b").expect("valid regex"));

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let no_articles = ARTICLES.replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 1.0 when the normalized strings are equal, else 0.0.
pub fn exact_match(pred: &str, gold: &str) -> f64 {
    f64::from(u8::from(normalize_answer(pred) == normalize_answer(gold)))
}

/// Harmonic mean of token-bag precision and recall over normalized tokens.
/// Two empty answers score 1; one empty answer scores 0.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let pred = normalize_answer(pred);
    let gold = normalize_answer(gold);
    let pred_tokens: Vec<&str> = pred.split_whitespace().collect();
    let gold_tokens: Vec<&str> = gold.split_whitespace().collect();
    if pred_tokens.is_empty() || gold_tokens.is_empty() {
        return f64::from(u8::from(pred_tokens.is_empty() && gold_tokens.is_empty()));
    }
    let mut bag: HashMap<&str, usize> = HashMap::new();
    for t in &gold_tokens {
        *bag.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred_tokens {
        if let Some(n) = bag.get_mut(t) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred_tokens.len() as f64;
    let recall = common as f64 / gold_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    DirectAnswer,
    Cot,
}

impl EvalMode {
    pub fn template(self) -> TemplateId {
        match self {
            EvalMode::DirectAnswer => TemplateId::EvalDirect,
            EvalMode::Cot => TemplateId::EvalCot,
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "direct" | "direct_answer" | "direct-answer" => Ok(EvalMode::DirectAnswer),
            "cot" => Ok(EvalMode::Cot),
            other => Err(format!("unknown evaluation mode `{other}` (expected direct or cot)")),
        }
    }
}

/// Markers after which a CoT response states its final answer, matched
/// case-insensitively; the last occurrence of any marker wins.
pub const DEFAULT_ANSWER_MARKERS: &[&str] = &["answer is", "answer:"];

/// Pulls the scored answer out of a model response.
///
/// Direct mode takes the whole response. CoT mode takes the text after the
/// last answer marker up to the end of that line; without a marker it falls
/// back to the last sentence: the part after its last colon, else the part
/// after its last `" is "`, else the whole sentence.
pub fn extract_final_answer(response: &str, mode: EvalMode) -> String {
    extract_with_markers(response, mode, DEFAULT_ANSWER_MARKERS)
}

/// [`extract_final_answer`] with model-specific markers.
pub fn extract_with_markers(response: &str, mode: EvalMode, markers: &[&str]) -> String {
    let response = response.trim();
    if mode == EvalMode::DirectAnswer {
        return response.to_string();
    }
    let lower = response.to_lowercase();
    // lowercasing can change byte lengths outside ASCII; only trust positions
    // when it did not
    let marker_hit = if lower.len() == response.len() {
        markers
            .iter()
            .filter_map(|m| lower.rfind(&m.to_lowercase()).map(|at| at + m.len()))
            .max()
    } else {
        None
    };
    if let Some(after) = marker_hit {
        let tail = &response[after..];
        let line = tail.lines().map(str::trim).find(|l| !clean(l).is_empty()).unwrap_or("");
        return clean(line);
    }
    let last = split_sentences(response).pop().unwrap_or_default();
    let segment = if let Some((_, after)) = last.rsplit_once(':') {
        after
    } else if let Some((_, after)) = last.rsplit_once(" is ") {
        after
    } else {
        last.as_str()
    };
    clean(segment)
}

fn clean(s: &str) -> String {
    s.trim_matches(|c: char| c.is_whitespace() || matches!(c, '.' | ',' | ';' | ':' | '!' | '?' | '"' | '\'' | '*' | '`'))
        .to_string()
}

/// The evaluation prompt for one test item.
pub fn eval_prompt(mode: EvalMode, context: &str, question: &str) -> Result<String, TemplateError> {
    render(
        mode.template(),
        &bindings([("context", context.to_string()), ("question", question.to_string())]),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub response: String,
}

/// One gold test item, as flattened from a packaged test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub domain: Domain,
    pub hop_count: usize,
    pub question: String,
    pub answer: String,
    pub context: String,
    pub image_refs: Vec<String>,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction id `{0}` appears more than once")]
    DuplicatePrediction(String),
    #[error("gold id `{0}` appears more than once")]
    DuplicateItem(String),
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Mean EM and F1 over `count` items.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Score {
    pub count: usize,
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Default, Clone, Copy)]
struct Sum {
    count: usize,
    em: f64,
    f1: f64,
}

impl Sum {
    fn add(&mut self, em: f64, f1: f64) {
        self.count += 1;
        self.em += em;
        self.f1 += f1;
    }

    fn score(self) -> Score {
        if self.count == 0 {
            return Score::default();
        }
        let n = self.count as f64;
        Score { count: self.count, em: self.em / n, f1: self.f1 / n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mode: EvalMode,
    pub overall: Score,
    pub per_domain: BTreeMap<Domain, Score>,
    pub per_hop: BTreeMap<usize, Score>,
    pub per_domain_hop: BTreeMap<Domain, BTreeMap<usize, Score>>,
    /// Gold ids without a prediction; each scored 0.
    pub missing: Vec<String>,
    /// Prediction ids that match no gold item; ignored.
    pub unknown: Vec<String>,
}

/// Scores predictions against gold items. Missing predictions count as wrong;
/// predictions for unknown ids are listed and ignored. The result does not
/// depend on the order of either input.
pub fn evaluate_run(items: &[EvalItem], predictions: &[Prediction], mode: EvalMode) -> Result<EvalResult, EvalError> {
    let mut by_id: HashMap<&str, &str> = HashMap::new();
    for p in predictions {
        if by_id.insert(&p.id, &p.response).is_some() {
            return Err(EvalError::DuplicatePrediction(p.id.clone()));
        }
    }
    let mut gold_ids = BTreeSet::new();
    for it in items {
        if !gold_ids.insert(it.id.as_str()) {
            return Err(EvalError::DuplicateItem(it.id.clone()));
        }
    }
    let mut scored: Vec<(&EvalItem, Option<(f64, f64)>)> = items
        .par_iter()
        .map(|it| {
            let s = by_id.get(it.id.as_str()).map(|resp| {
                let pred = extract_final_answer(resp, mode);
                (exact_match(&pred, &it.answer), token_f1(&pred, &it.answer))
            });
            (it, s)
        })
        .collect();
    // fixed summation order keeps float results permutation-invariant
    scored.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let mut overall = Sum::default();
    let mut per_domain: BTreeMap<Domain, Sum> = BTreeMap::new();
    let mut per_hop: BTreeMap<usize, Sum> = BTreeMap::new();
    let mut per_domain_hop: BTreeMap<Domain, BTreeMap<usize, Sum>> = BTreeMap::new();
    let mut missing = Vec::new();
    for (it, s) in &scored {
        let (em, f1) = s.unwrap_or((0.0, 0.0));
        if s.is_none() {
            missing.push(it.id.clone());
        }
        overall.add(em, f1);
        per_domain.entry(it.domain).or_default().add(em, f1);
        per_hop.entry(it.hop_count).or_default().add(em, f1);
        per_domain_hop.entry(it.domain).or_default().entry(it.hop_count).or_default().add(em, f1);
    }
    let mut unknown: Vec<String> =
        predictions.iter().filter(|p| !gold_ids.contains(p.id.as_str())).map(|p| p.id.clone()).collect();
    unknown.sort();
    Ok(EvalResult {
        mode,
        overall: overall.score(),
        per_domain: per_domain.into_iter().map(|(k, v)| (k, v.score())).collect(),
        per_hop: per_hop.into_iter().map(|(k, v)| (k, v.score())).collect(),
        per_domain_hop: per_domain_hop
            .into_iter()
            .map(|(d, m)| (d, m.into_iter().map(|(hop, v)| (hop, v.score())).collect()))
            .collect(),
        missing,
        unknown,
    })
}

/// Reads a predictions JSONL file (`{"id": ..., "response": ...}` per line).
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    read_jsonl(path)
}

/// Reads a gold-item JSONL file.
pub fn read_eval_items(path: &Path) -> Result<Vec<EvalItem>, EvalError> {
    read_jsonl(path)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Aligned text table: overall, per domain, per hop, per domain and hop.
pub fn render_table(result: &EvalResult) -> String {
    let mut rows: Vec<(String, Score)> = vec![("overall".into(), result.overall)];
    rows.extend(result.per_domain.iter().map(|(d, s)| (d.to_string(), *s)));
    rows.extend(result.per_hop.iter().map(|(hop, s)| (format!("{hop}-hop"), *s)));
    for (d, hops) in &result.per_domain_hop {
        rows.extend(hops.iter().map(|(hop, s)| (format!("{d} {hop}-hop"), *s)));
    }
    let mode = match result.mode {
        EvalMode::DirectAnswer => "direct answer",
        EvalMode::Cot => "chain of thought",
    };
    let mut out = format!("mode: {mode}\n{:<12} {:>7} {:>7} {:>7}\n", "stratum", "n", "EM", "F1");
    for (name, s) in rows {
        let _ = writeln!(out, "{name:<12} {:>7} {:>7.2} {:>7.2}", s.count, s.em * 100.0, s.f1 * 100.0);
    }
    if !result.missing.is_empty() {
        let _ = writeln!(out, "missing predictions: {}", result.missing.len());
    }
    if !result.unknown.is_empty() {
        let _ = writeln!(out, "unknown prediction ids: {}", result.unknown.len());
    }
    out
}
