//! TeX papers: paragraph segmentation with figure/table reference resolution,
//! relation extraction against an entity inventory, removal of sentences that
//! restate figure content, and assembly of the paper graph.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::embed::{cosine, EmbedError, EmbedKind, Embedder};
use crate::graph::{ContentGraph, Domain, EntityNode, NodeId, Origin, RelationEdge};
use crate::llm::{bindings, Decoding, ExchangeSpec, Gateway, LlmError, TemplateId};
use crate::text::{contains_phrase, split_sentences};

/// Default similarity at or above which a sentence counts as restating a
/// figure-grounded relation.
pub const DEFAULT_SENTENCE_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error)]
pub enum PaperError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("figure manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("relation refers to `{0}`, which is not in the entity inventory")]
    UnknownEntity(String),
    #[error("relation cites `{0}`, which is not in the figure manifest")]
    UnknownFigure(String),
    #[error("embedding service returned {got} vectors for {expected} inputs")]
    EmbeddingCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParagraphKind {
    Plain,
    FigureReferencing,
}

/// One prose paragraph of the document body, with TeX markup resolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParagraphUnit {
    pub index: usize,
    /// Cleaned paragraph text; `sentences` is its sentence split.
    pub text: String,
    pub sentences: Vec<String>,
    /// Normalized labels (`Figure 4`, `Table 2`) in order of first mention.
    pub figure_refs: Vec<String>,
    pub kind: ParagraphKind,
}

impl ParagraphUnit {
    fn new(index: usize, text: String, figure_refs: Vec<String>) -> Self {
        let kind = if figure_refs.is_empty() { ParagraphKind::Plain } else { ParagraphKind::FigureReferencing };
        ParagraphUnit { index, sentences: split_sentences(&text), text, figure_refs, kind }
    }

    /// `[i] sentence` lines, the indexing the figure prompt refers to.
    pub fn indexed_sentences(&self) -> String {
        self.sentences.iter().enumerate().map(|(i, s)| format!("[{i}] {s}")).collect::<Vec<_>>().join("\n")
    }
}

/// A figure or table environment found in the source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TexFloat {
    pub label: String,
    pub keys: Vec<String>,
    pub caption: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedTex {
    pub paragraphs: Vec<ParagraphUnit>,
    pub floats: Vec<TexFloat>,
    /// `\ref` keys with no matching `\label`, in order of appearance.
    pub unresolved_refs: Vec<String>,
}

/// Reads and concatenates TeX files in the given order.
pub fn read_tex(paths: &[PathBuf]) -> Result<String, PaperError> {
    let mut out = String::new();
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(|source| PaperError::Io { path: p.clone(), source })?;
        if !out.is_empty() {
            out.push_str("\n\n");
        }
        out.push_str(&text);
    }
    Ok(out)
}

static FLOAT_BEGIN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\\begin\{((?:sideways|wrap)?(?:figure|table)|thebibliography|comment)(\*?)\}").unwrap()
});
static SECTIONING: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^\\(part|chapter|section|subsection|subsubsection|paragraph|subparagraph|title|author|date|maketitle|appendix|tableofcontents|newpage|clearpage|pagebreak|bibliography|bibliographystyle)\b",
    )
    .unwrap()
});
static ENV_MARK: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\\(begin|end)\{([^}]*)\}").unwrap());
static LITERAL_REF: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(fig(?:ure)?s?\.?|tab(?:le)?s?\.?)\s*(\d+)\b").unwrap());
static SPACE_BEFORE_PUNCT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s+([.,;:])").unwrap());
static LABEL_FORM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*(fig(?:ure)?|tab(?:le)?)\.?\s*~?\s*(\d+)\s*$").unwrap());

/// `Figure 4`, `fig. 4`, `Figure4` and `FIGURE 4` all normalize to
/// `Figure 4`; tables likewise. Other strings are not figure labels.
pub fn normalize_figure_label(s: &str) -> Option<String> {
    let c = LABEL_FORM.captures(s)?;
    let kind = if c[1].to_ascii_lowercase().starts_with("fig") { "Figure" } else { "Table" };
    Some(format!("{kind} {}", &c[2]))
}

/// Splits the document body into paragraphs.
///
/// Comments and the preamble are dropped; figure and table environments are
/// numbered (separate counters), their captions kept, and removed from the
/// prose. Paragraphs break on blank lines outside environments and at
/// sectioning commands. `\ref`-style citations resolve against the float
/// labels; they and literal `Figure N`/`Table N` mentions make up each
/// paragraph's `figure_refs`.
pub fn segment_paragraphs(tex: &str) -> SegmentedTex {
    let body = document_body(&strip_comments(tex)).to_string();
    let (prose, raw_floats) = extract_floats(&body);

    let mut labels: HashMap<String, String> = HashMap::new();
    for f in &raw_floats {
        for k in &f.keys {
            labels.insert(k.clone(), f.label.clone());
        }
    }
    let mut unresolved = Vec::new();
    let floats = raw_floats
        .into_iter()
        .map(|f| TexFloat {
            caption: f.caption.map(|c| clean_inline(&c, &labels, &mut unresolved).0),
            ..f
        })
        .collect();

    let mut paragraphs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut depth = 0usize;
    let mut flush = |current: &mut Vec<&str>, unresolved: &mut Vec<String>| {
        if current.is_empty() {
            return;
        }
        let (text, refs) = clean_inline(&current.join("\n"), &labels, unresolved);
        current.clear();
        if !text.is_empty() {
            paragraphs.push(ParagraphUnit::new(paragraphs.len(), text, refs));
        }
    };
    for line in prose.lines() {
        let trimmed = line.trim();
        if depth == 0 && (trimmed.is_empty() || SECTIONING.is_match(trimmed)) {
            flush(&mut current, &mut unresolved);
            continue;
        }
        let mut boundary = false;
        for c in ENV_MARK.captures_iter(trimmed) {
            if matches!(&c[2], "abstract" | "document") {
                boundary = true;
                continue;
            }
            if &c[1] == "begin" {
                depth += 1;
            } else {
                depth = depth.saturating_sub(1);
            }
        }
        if boundary {
            flush(&mut current, &mut unresolved);
        }
        current.push(line);
    }
    flush(&mut current, &mut unresolved);
    let mut seen = BTreeSet::new();
    unresolved.retain(|k| seen.insert(k.clone()));
    SegmentedTex { paragraphs, floats, unresolved_refs: unresolved }
}

/// Removes `%` comments. A line holding only a comment disappears entirely,
/// so it never acts as a paragraph break.
fn strip_comments(tex: &str) -> String {
    let mut out = String::with_capacity(tex.len());
    for line in tex.lines() {
        let mut cut = None;
        let mut backslashes = 0;
        for (i, ch) in line.char_indices() {
            match ch {
                '\\' => backslashes += 1,
                '%' if backslashes % 2 == 0 => {
                    cut = Some(i);
                    break;
                }
                _ => backslashes = 0,
            }
            if ch != '\\' {
                backslashes = 0;
            }
        }
        match cut {
            Some(i) if line[..i].trim().is_empty() => {}
            Some(i) => {
                out.push_str(&line[..i]);
                out.push('\n');
            }
            None => {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    out
}

fn document_body(tex: &str) -> &str {
    const BEGIN: &str = "\\begin{document}";
    let start = tex.find(BEGIN).map_or(0, |i| i + BEGIN.len());
    let end = tex[start..].find("\\end{document}").map_or(tex.len(), |i| start + i);
    &tex[start..end]
}

/// Cuts float environments out of the body; returns the remaining prose and
/// the numbered floats.
fn extract_floats(body: &str) -> (String, Vec<TexFloat>) {
    let mut prose = String::with_capacity(body.len());
    let mut floats = Vec::new();
    let (mut figures, mut tables) = (0, 0);
    let mut cursor = 0;
    while let Some(c) = FLOAT_BEGIN.captures_at(body, cursor) {
        let whole = c.get(0).unwrap();
        let end_tag = format!("\\end{{{}{}}}", &c[1], &c[2]);
        let inner_start = whole.end();
        let (inner_end, after) = match body[inner_start..].find(&end_tag) {
            Some(i) => (inner_start + i, inner_start + i + end_tag.len()),
            None => (body.len(), body.len()),
        };
        prose.push_str(&body[cursor..whole.start()]);
        let inner = &body[inner_start..inner_end];
        let name = &c[1];
        if name.ends_with("figure") || name.ends_with("table") {
            let label = if name.ends_with("figure") {
                figures += 1;
                format!("Figure {figures}")
            } else {
                tables += 1;
                format!("Table {tables}")
            };
            floats.push(TexFloat { label, keys: command_args(inner, "label"), caption: command_args(inner, "caption").into_iter().next() });
        }
        // A float on lines of its own should not leave a blank line behind.
        let at_line_start = whole.start() == 0 || body[..whole.start()].ends_with('\n');
        cursor = if at_line_start && body[after..].starts_with('\n') { after + 1 } else { after };
    }
    prose.push_str(&body[cursor..]);
    (prose, floats)
}

/// Braced arguments of every `\name{...}` in `s` (optional `[...]` skipped).
fn command_args(s: &str, name: &str) -> Vec<String> {
    let needle = format!("\\{name}");
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(i) = s[from..].find(&needle) {
        let after = from + i + needle.len();
        from = after;
        if s[after..].starts_with(|c: char| c.is_ascii_alphabetic()) {
            continue;
        }
        let mut j = skip_star_and_options(s, after);
        if let Some((arg, end)) = braced(s, j) {
            out.push(arg.trim().to_string());
            j = end;
        }
        from = from.max(j);
    }
    out
}

fn skip_star_and_options(s: &str, mut i: usize) -> usize {
    let b = s.as_bytes();
    if b.get(i) == Some(&b'*') {
        i += 1;
    }
    while b.get(i) == Some(&b'[') {
        match s[i..].find(']') {
            Some(k) => i += k + 1,
            None => break,
        }
    }
    i
}

/// The balanced `{...}` group starting at byte `i`, and the index after it.
fn braced(s: &str, i: usize) -> Option<(&str, usize)> {
    if s.as_bytes().get(i) != Some(&b'{') {
        return None;
    }
    let mut depth = 0usize;
    let mut escaped = false;
    for (k, ch) in s[i..].char_indices() {
        match ch {
            _ if escaped => escaped = false,
            '\\' => escaped = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some((&s[i + 1..i + k], i + k + 1));
                }
            }
            _ => {}
        }
    }
    None
}

const DROPPED_COMMANDS: &[&str] = &[
    "cite", "citep", "citet", "citealp", "citeauthor", "citeyear", "nocite", "label", "footnote", "footnotemark", "index",
    "vspace", "hspace", "begin", "end",
];
const UNWRAPPED_COMMANDS: &[&str] =
    &["textbf", "textit", "emph", "texttt", "textsc", "textrm", "textsf", "underline", "mbox", "text", "textnormal"];
const BARE_DROPPED: &[&str] = &["item", "noindent", "centering", "par", "xspace", "medskip", "smallskip", "bigskip"];

/// Resolves references and strips markup from a paragraph. Returns the
/// whitespace-collapsed text and the figure/table labels it mentions.
fn clean_inline(raw: &str, labels: &HashMap<String, String>, unresolved: &mut Vec<String>) -> (String, Vec<String>) {
    let mut refs: Vec<(usize, String)> = Vec::new();
    let text = rewrite(raw, labels, unresolved, &mut refs);
    for m in LITERAL_REF.captures_iter(&text) {
        let kind = if m[1].to_ascii_lowercase().starts_with("fig") { "Figure" } else { "Table" };
        refs.push((m.get(0).unwrap().start(), format!("{kind} {}", &m[2])));
    }
    refs.sort_by_key(|(pos, _)| *pos);
    let mut seen = BTreeSet::new();
    let ordered = refs.into_iter().map(|(_, l)| l).filter(|l| seen.insert(l.clone())).collect();
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    (SPACE_BEFORE_PUNCT.replace_all(&collapsed, "$1").into_owned(), ordered)
}

fn rewrite(
    raw: &str,
    labels: &HashMap<String, String>,
    unresolved: &mut Vec<String>,
    refs: &mut Vec<(usize, String)>,
) -> String {
    let mut out = String::with_capacity(raw.len());
    rewrite_into(raw, labels, unresolved, refs, &mut out);
    out
}

/// Appends the cleaned form of `raw` to `out`; reference positions are
/// byte offsets into `out`.
fn rewrite_into(
    raw: &str,
    labels: &HashMap<String, String>,
    unresolved: &mut Vec<String>,
    refs: &mut Vec<(usize, String)>,
    out: &mut String,
) {
    let mut i = 0;
    while i < raw.len() {
        let ch = raw[i..].chars().next().unwrap();
        match ch {
            '~' => {
                out.push(' ');
                i += 1;
            }
            '\\' => {
                let name_len = raw[i + 1..].find(|c: char| !c.is_ascii_alphabetic()).unwrap_or(raw.len() - i - 1);
                if name_len == 0 {
                    // Control symbol: `\%`, `\&`, `\\` ...
                    match raw[i + 1..].chars().next() {
                        Some('\\') => out.push(' '),
                        Some(c @ ('%' | '&' | '_' | '#' | '$' | '{' | '}')) => out.push(c),
                        Some(c) => {
                            out.push('\\');
                            out.push(c);
                        }
                        None => {}
                    }
                    i += 1 + raw[i + 1..].chars().next().map_or(0, char::len_utf8);
                    continue;
                }
                let name = &raw[i + 1..i + 1 + name_len];
                let after_name = i + 1 + name_len;
                let after_opts = skip_star_and_options(raw, after_name);
                let arg = braced(raw, after_opts);
                match (name, arg) {
                    ("ref" | "subref" | "autoref" | "cref" | "Cref" | "eqref" | "pageref", Some((keys, end))) => {
                        let parts: Vec<String> = keys
                            .split(',')
                            .map(str::trim)
                            .filter(|k| !k.is_empty())
                            .map(|k| match labels.get(k) {
                                Some(label) => {
                                    refs.push((out.len(), label.clone()));
                                    if matches!(name, "ref" | "subref") {
                                        label.rsplit(' ').next().unwrap_or(label).to_string()
                                    } else {
                                        label.clone()
                                    }
                                }
                                None => {
                                    unresolved.push(k.to_string());
                                    "??".to_string()
                                }
                            })
                            .collect();
                        out.push_str(&parts.join(" and "));
                        i = end;
                    }
                    (n, Some((_, end))) if DROPPED_COMMANDS.contains(&n) => i = end,
                    (n, Some((inner, end))) if UNWRAPPED_COMMANDS.contains(&n) => {
                        rewrite_into(inner, labels, unresolved, refs, out);
                        i = end;
                    }
                    (n, _) if BARE_DROPPED.contains(&n) => {
                        out.push(' ');
                        i = after_name;
                    }
                    _ => {
                        out.push_str(&raw[i..after_name]);
                        i = after_name;
                    }
                }
            }
            c => {
                out.push(c);
                i += c.len_utf8();
            }
        }
    }
}

/// A figure or rendered table the pipeline can show as an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FigureInfo {
    pub label: String,
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

/// Reads a JSON list of `{label, file, caption?}`; labels are normalized and
/// must be unique.
pub fn load_figure_manifest(path: &Path) -> Result<Vec<FigureInfo>, PaperError> {
    let text = std::fs::read_to_string(path).map_err(|source| PaperError::Io { path: path.to_path_buf(), source })?;
    parse_figure_manifest(&text, &path.display().to_string())
}

pub fn parse_figure_manifest(text: &str, origin: &str) -> Result<Vec<FigureInfo>, PaperError> {
    let bad = |reason: String| PaperError::Manifest { path: origin.to_string(), reason };
    let raw: Vec<FigureInfo> = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let mut seen = BTreeSet::new();
    raw.into_iter()
        .map(|f| {
            let label =
                normalize_figure_label(&f.label).ok_or_else(|| bad(format!("`{}` is not a figure or table label", f.label)))?;
            if !seen.insert(label.clone()) {
                return Err(bad(format!("label `{label}` listed twice")));
            }
            Ok(FigureInfo { label, ..f })
        })
        .collect()
}

/// Fills missing manifest captions from the captions found in the source.
pub fn merge_captions(manifest: &mut [FigureInfo], floats: &[TexFloat]) {
    for f in manifest.iter_mut().filter(|f| f.caption.is_none()) {
        f.caption = floats.iter().find(|t| t.label == f.label).and_then(|t| t.caption.clone());
    }
}

/// A relation stated in paragraph prose.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRelation {
    pub source_entity: String,
    pub target_entity: Option<String>,
    pub relationship_description: String,
}

/// A relation grounded in a figure or table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualRelation {
    pub source_entity: String,
    pub target_entity: Option<String>,
    pub relationship_description: String,
    pub figure: String,
    /// Indices into the paragraph's sentences; sorted, non-empty.
    pub idx: Vec<usize>,
}

/// Validated relations from one extraction exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extraction<T> {
    pub paragraph: usize,
    pub relations: Vec<T>,
    /// Items that failed validation, with the reason.
    pub dropped: Vec<String>,
    pub exchange_id: Option<String>,
}

/// Asks for the paper's entity list. Entries are trimmed, deduplicated
/// case-insensitively and kept only if they occur in the text.
pub fn entity_inventory(paragraphs: &[ParagraphUnit], gateway: &Gateway, model_id: &str) -> Result<Vec<String>, PaperError> {
    let paper_text = paragraphs.iter().map(|p| p.text.as_str()).collect::<Vec<_>>().join("\n\n");
    let b = bindings([("paper_text", paper_text.clone())]);
    let spec = ExchangeSpec::new(TemplateId::EntityInventory, &b, model_id, Decoding::GENERATION);
    let (value, _) = gateway.exchange_payload(&spec)?;
    let names: Vec<String> = serde_json::from_value(value).unwrap_or_default();
    let mut seen = BTreeSet::new();
    Ok(names
        .into_iter()
        .map(|n| n.trim().to_string())
        .filter(|n| !n.is_empty() && contains_phrase(&paper_text, n))
        .filter(|n| seen.insert(n.to_lowercase()))
        .collect())
}

/// Maps a model-supplied entity name onto the inventory: exact first, then
/// case-insensitive.
fn resolve_entity<'a>(name: &str, entities: &'a [String]) -> Option<&'a String> {
    let name = name.trim();
    entities.iter().find(|e| *e == name).or_else(|| entities.iter().find(|e| e.eq_ignore_ascii_case(name)))
}

fn endpoints(item: &Value, entities: &[String]) -> Result<(String, Option<String>, String), String> {
    let source = item.get("source_entity").and_then(Value::as_str).ok_or("missing source_entity")?;
    let source = resolve_entity(source, entities).ok_or_else(|| format!("unknown entity `{source}`"))?;
    let target = match item.get("target_entity") {
        None | Some(Value::Null) => None,
        Some(Value::String(t)) if t.trim().is_empty() => None,
        Some(Value::String(t)) => Some(resolve_entity(t, entities).ok_or_else(|| format!("unknown entity `{t}`"))?.clone()),
        Some(other) => return Err(format!("target_entity is {other}")),
    };
    if target.as_ref() == Some(source) {
        return Err(format!("`{source}` related to itself"));
    }
    let description = item
        .get("relationship_description")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|d| !d.is_empty())
        .ok_or("missing relationship_description")?;
    Ok((source.clone(), target, description.to_string()))
}

/// Relations stated in the paragraph text, closed over `entities`. Items
/// naming other entities, or lacking a description, are dropped.
pub fn extract_text_relations(
    paragraph: &ParagraphUnit,
    entities: &[String],
    gateway: &Gateway,
    model_id: &str,
) -> Result<Extraction<TextRelation>, PaperError> {
    let b = bindings([("entities_json", json!(entities).to_string()), ("paragraph", paragraph.text.clone())]);
    let spec = ExchangeSpec::new(TemplateId::ParagraphPlain, &b, model_id, Decoding::GENERATION);
    let (value, exchange) = gateway.exchange_payload(&spec)?;
    let mut out = Extraction { paragraph: paragraph.index, relations: Vec::new(), dropped: Vec::new(), exchange_id: Some(exchange.exchange_id) };
    for (i, item) in value.as_array().into_iter().flatten().enumerate() {
        match endpoints(item, entities) {
            Ok((source_entity, target_entity, relationship_description)) => {
                let rel = TextRelation { source_entity, target_entity, relationship_description };
                if !out.relations.contains(&rel) {
                    out.relations.push(rel);
                }
            }
            Err(reason) => out.dropped.push(format!("item {i}: {reason}")),
        }
    }
    Ok(out)
}

/// Relations grounded in the figures the paragraph cites. Each must name a
/// figure from `figures` (never null) and index at least one existing
/// sentence. A paragraph citing no manifest figure yields nothing without
/// an exchange.
pub fn extract_visual_relations(
    paragraph: &ParagraphUnit,
    entities: &[String],
    figures: &[FigureInfo],
    gateway: &Gateway,
    model_id: &str,
) -> Result<Extraction<VisualRelation>, PaperError> {
    let cited: Vec<&FigureInfo> = figures.iter().filter(|f| paragraph.figure_refs.contains(&f.label)).collect();
    let mut out = Extraction { paragraph: paragraph.index, relations: Vec::new(), dropped: Vec::new(), exchange_id: None };
    if cited.is_empty() {
        log::warn!("paragraph {} cites {:?}, none of which is in the figure manifest", paragraph.index, paragraph.figure_refs);
        return Ok(out);
    }
    let figures_json: Vec<Value> =
        cited.iter().map(|f| json!({"label": f.label, "caption": f.caption.clone().unwrap_or_default()})).collect();
    let b = bindings([
        ("figures_json", Value::from(figures_json).to_string()),
        ("entities_json", json!(entities).to_string()),
        ("sentences_text", paragraph.indexed_sentences()),
    ]);
    let spec = ExchangeSpec::new(TemplateId::ParagraphFigure, &b, model_id, Decoding::GENERATION);
    let (value, exchange) = gateway.exchange_payload(&spec)?;
    out.exchange_id = Some(exchange.exchange_id);
    for (i, item) in value.as_array().into_iter().flatten().enumerate() {
        match visual_item(item, entities, &cited, paragraph.sentences.len()) {
            Ok(rel) if !out.relations.contains(&rel) => out.relations.push(rel),
            Ok(_) => {}
            Err(reason) => out.dropped.push(format!("item {i}: {reason}")),
        }
    }
    Ok(out)
}

fn visual_item(item: &Value, entities: &[String], cited: &[&FigureInfo], sentences: usize) -> Result<VisualRelation, String> {
    let (source_entity, target_entity, relationship_description) = endpoints(item, entities)?;
    let figure = match item.get("figure") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.trim(),
        _ => return Err("figure is missing or null".into()),
    };
    let label = normalize_figure_label(figure)
        .filter(|l| cited.iter().any(|f| &f.label == l))
        .ok_or_else(|| format!("figure `{figure}` is not cited by the paragraph"))?;
    let idx: BTreeSet<usize> = match item.get("idx") {
        Some(Value::Array(xs)) => xs
            .iter()
            .map(|x| x.as_u64().map(|v| v as usize).filter(|&v| v < sentences).ok_or_else(|| format!("bad sentence index {x}")))
            .collect::<Result<_, _>>()?,
        _ => return Err("idx is not a list".into()),
    };
    if idx.is_empty() {
        return Err("idx is empty".into());
    }
    Ok(VisualRelation { source_entity, target_entity, relationship_description, figure: label, idx: idx.into_iter().collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub index: usize,
    /// Highest cosine against any relation description; `None` without relations.
    pub max_similarity: Option<f64>,
    pub removed: bool,
}

/// Scores each sentence against every relation description and marks it
/// removed iff its best similarity reaches `threshold`.
pub fn score_sentences(
    sentence_vectors: &[Vec<f32>],
    relation_vectors: &[Vec<f32>],
    threshold: f64,
) -> Result<Vec<SentenceScore>, EmbedError> {
    sentence_vectors
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let mut best: Option<f64> = None;
            for relation_vector in relation_vectors {
                let c = cosine(s, relation_vector)?;
                best = Some(best.map_or(c, |b| b.max(c)));
            }
            Ok(SentenceScore { index, max_similarity: best, removed: best.is_some_and(|b| b >= threshold) })
        })
        .collect()
}

/// A paragraph after sentence filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredParagraph {
    pub index: usize,
    /// Surviving text. Identical to the input when nothing was removed.
    pub text: String,
    pub removed: Vec<usize>,
    pub scores: Vec<SentenceScore>,
}

/// Drops sentences that restate the paragraph's visual relations. Plain
/// paragraphs, and paragraphs with no visual relation, pass through
/// unchanged without touching the embedder.
pub fn filter_sentences(
    paragraph: &ParagraphUnit,
    relations: &[VisualRelation],
    threshold: f64,
    embedder: &dyn Embedder,
) -> Result<FilteredParagraph, PaperError> {
    let unchanged = || FilteredParagraph { index: paragraph.index, text: paragraph.text.clone(), removed: Vec::new(), scores: Vec::new() };
    if paragraph.kind == ParagraphKind::Plain || relations.is_empty() || paragraph.sentences.is_empty() {
        return Ok(unchanged());
    }
    let descriptions: Vec<String> = relations.iter().map(|rel| rel.relationship_description.clone()).collect();
    let sv = embedder.embed(EmbedKind::Sentence, &paragraph.sentences)?;
    let rv = embedder.embed(EmbedKind::Sentence, &descriptions)?;
    for (expected, got) in [(paragraph.sentences.len(), sv.len()), (descriptions.len(), rv.len())] {
        if expected != got {
            return Err(PaperError::EmbeddingCount { expected, got });
        }
    }
    let scores = score_sentences(&sv, &rv, threshold)?;
    let removed: Vec<usize> = scores.iter().filter(|s| s.removed).map(|s| s.index).collect();
    if removed.is_empty() {
        return Ok(FilteredParagraph { scores, ..unchanged() });
    }
    let text = paragraph
        .sentences
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed.contains(i))
        .map(|(_, s)| s.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    Ok(FilteredParagraph { index: paragraph.index, text, removed, scores })
}

/// The assembled paper graph and the files of its images, by image index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperGraph {
    pub graph: ContentGraph,
    pub image_refs: Vec<String>,
    pub image_labels: Vec<String>,
}

/// Builds the paper graph, or `None` when no relation is figure-grounded
/// (no cross-modal chain could exist).
///
/// Figures cited by visual relations become images, in manifest order.
/// Entities in any visual relation are visual nodes anchored to the figure
/// of their first such relation; the rest are textual. Only entities that
/// take part in some relation become nodes.
pub fn build_paper_graph(
    inventory: &[String],
    text_relations: &[TextRelation],
    visual_relations: &[VisualRelation],
    figures: &[FigureInfo],
) -> Result<Option<PaperGraph>, PaperError> {
    if visual_relations.is_empty() {
        return Ok(None);
    }
    for rel in visual_relations {
        if !figures.iter().any(|f| f.label == rel.figure) {
            return Err(PaperError::UnknownFigure(rel.figure.clone()));
        }
    }
    let used: Vec<&FigureInfo> = figures.iter().filter(|f| visual_relations.iter().any(|rel| rel.figure == f.label)).collect();
    let image_of: BTreeMap<&str, usize> = used.iter().enumerate().map(|(i, f)| (f.label.as_str(), i)).collect();

    let mut anchor: BTreeMap<&str, usize> = BTreeMap::new();
    for rel in visual_relations {
        for e in std::iter::once(&rel.source_entity).chain(rel.target_entity.iter()) {
            anchor.entry(e.as_str()).or_insert(image_of[rel.figure.as_str()]);
        }
    }
    let mentioned: BTreeSet<&str> = text_relations
        .iter()
        .flat_map(|rel| std::iter::once(&rel.source_entity).chain(rel.target_entity.iter()))
        .map(String::as_str)
        .chain(anchor.keys().copied())
        .collect();
    for name in &mentioned {
        if !inventory.iter().any(|e| e == name) {
            return Err(PaperError::UnknownEntity(name.to_string()));
        }
    }

    let mut graph = ContentGraph::new(Domain::SP, used.len());
    let mut ids: BTreeMap<&str, NodeId> = BTreeMap::new();
    for name in inventory.iter().filter(|e| mentioned.contains(e.as_str())) {
        let id = format!("p{}", ids.len());
        let node = match anchor.get(name.as_str()) {
            Some(&image) => EntityNode::visual(id.clone(), name.clone(), image),
            None => EntityNode {
                id: NodeId::new(id.clone()),
                name: name.clone(),
                display_name: name.clone(),
                origin: Origin::Textual,
                attributes: Vec::new(),
                type_tag: None,
                provenance: None,
            },
        };
        ids.insert(name.as_str(), NodeId::new(id));
        graph.nodes.push(node);
    }
    let edge = |s: &str, t: Option<&String>, d: &str| match t {
        Some(t) => RelationEdge::new(&ids[s], &ids[t.as_str()], d),
        None => RelationEdge::solo(&ids[s], d),
    };
    for rel in visual_relations {
        let mut grounded = edge(&rel.source_entity, rel.target_entity.as_ref(), &rel.relationship_description)
            .with_image_tag(image_of[rel.figure.as_str()]);
        grounded.figure_label = Some(rel.figure.clone());
        grounded.sentence_indices = Some(rel.idx.clone());
        graph.edges.push(grounded);
    }
    for rel in text_relations {
        graph.edges.push(edge(&rel.source_entity, rel.target_entity.as_ref(), &rel.relationship_description));
    }
    Ok(Some(PaperGraph {
        graph,
        image_refs: used.iter().map(|f| f.file.clone()).collect(),
        image_labels: used.iter().map(|f| f.label.clone()).collect(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperConfig {
    pub model_id: String,
    pub sentence_threshold: f64,
}

impl Default for PaperConfig {
    fn default() -> Self {
        PaperConfig { model_id: "stub".into(), sentence_threshold: DEFAULT_SENTENCE_THRESHOLD }
    }
}

/// Everything one paper produced, kept for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperSample {
    pub inventory: Vec<String>,
    pub paragraphs: Vec<ParagraphUnit>,
    pub text_extractions: Vec<Extraction<TextRelation>>,
    pub visual_extractions: Vec<Extraction<VisualRelation>>,
    pub filtered: Vec<FilteredParagraph>,
    /// Surviving paragraph text in document order, blank-line separated.
    pub context: String,
    /// `None` when the paper has no figure-grounded relation.
    pub graph: Option<PaperGraph>,
}

/// Runs the whole paper path: inventory, per-paragraph extraction (in
/// parallel), sentence filtering and graph assembly.
pub fn ingest_paper(
    tex: &str,
    figures: &[FigureInfo],
    gateway: &Gateway,
    embedder: &dyn Embedder,
    config: &PaperConfig,
) -> Result<PaperSample, PaperError> {
    let seg = segment_paragraphs(tex);
    let mut figures = figures.to_vec();
    merge_captions(&mut figures, &seg.floats);
    let inventory = entity_inventory(&seg.paragraphs, gateway, &config.model_id)?;

    type Extracted = (Option<Extraction<TextRelation>>, Option<Extraction<VisualRelation>>);
    let extracted: Vec<Extracted> = seg
        .paragraphs
        .par_iter()
        .map(|p| match p.kind {
            ParagraphKind::Plain => extract_text_relations(p, &inventory, gateway, &config.model_id).map(|e| (Some(e), None)),
            ParagraphKind::FigureReferencing => {
                extract_visual_relations(p, &inventory, &figures, gateway, &config.model_id).map(|e| (None, Some(e)))
            }
        })
        .collect::<Result<_, _>>()?;
    let (text_extractions, visual_extractions): (Vec<_>, Vec<_>) = extracted.into_iter().unzip();
    let text_extractions: Vec<_> = text_extractions.into_iter().flatten().collect();
    let visual_extractions: Vec<_> = visual_extractions.into_iter().flatten().collect();

    let filtered = seg
        .paragraphs
        .iter()
        .map(|p| {
            let rels = visual_extractions.iter().find(|e| e.paragraph == p.index).map_or(&[][..], |e| &e.relations);
            filter_sentences(p, rels, config.sentence_threshold, embedder)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let context = filtered.iter().map(|f| f.text.as_str()).filter(|t| !t.is_empty()).collect::<Vec<_>>().join("\n\n");

    let text_rel: Vec<TextRelation> = text_extractions.iter().flat_map(|e| e.relations.clone()).collect();
    let vis_rel: Vec<VisualRelation> = visual_extractions.iter().flat_map(|e| e.relations.clone()).collect();
    let graph = build_paper_graph(&inventory, &text_rel, &vis_rel, &figures)?;
    Ok(PaperSample { inventory, paragraphs: seg.paragraphs, text_extractions, visual_extractions, filtered, context, graph })
}
