//! Released dataset files: samples as JSONL with a manifest, the training
//! conversation format, single-turn evaluation items, and summary statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{EvalItem, EvalMode};
use crate::graph::Domain;
use crate::qa::QaRecord;
use crate::rng::sha256_hex;
use crate::text::whitespace_tokens;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("sample {sample_id}: {reason}")]
    Invalid { sample_id: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    /// Deterministic split from the sample id: the first 8 bytes of its hash,
    /// read as a fraction of the `u64` range, below `test_fraction` means test.
    pub fn assign(sample_id: &str, test_fraction: f64) -> Split {
        let digest = sha256_hex(sample_id.as_bytes());
        let v = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
        if (v as f64) / (u64::MAX as f64) < test_fraction {
            Split::Test
        } else {
            Split::Train
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One released item: images, the shared context, and its QA records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub sample_id: String,
    pub domain: Domain,
    pub image_refs: Vec<String>,
    pub context: String,
    pub qa: Vec<QaRecord>,
    pub split: Split,
}

/// Content hash of `(domain, image_refs, context)`, so reruns over the same
/// inputs produce the same id.
pub fn sample_id(domain: Domain, image_refs: &[String], context: &str) -> String {
    let key = format!("{domain}\n{}\n{context}", image_refs.join("\u{1f}"));
    sha256_hex(key.as_bytes())[..16].to_string()
}

impl DatasetSample {
    pub fn new(domain: Domain, image_refs: Vec<String>, context: String, qa: Vec<QaRecord>, split: Split) -> Self {
        DatasetSample { sample_id: sample_id(domain, &image_refs, &context), domain, image_refs, context, qa, split }
    }

    /// Emitted samples need images and at least one QA of their own domain,
    /// and the id must match the content.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |reason: String| DatasetError::Invalid { sample_id: self.sample_id.clone(), reason };
        if self.image_refs.is_empty() {
            return Err(bad("no images".into()));
        }
        if self.qa.is_empty() {
            return Err(bad("no QA".into()));
        }
        if let Some(q) = self.qa.iter().find(|q| q.domain != self.domain) {
            return Err(bad(format!("QA {} is from domain {}", q.id, q.domain)));
        }
        let expected = sample_id(self.domain, &self.image_refs, &self.context);
        if expected != self.sample_id {
            return Err(bad(format!("id does not match content (expected {expected})")));
        }
        Ok(())
    }
}

/// Summary written next to every dataset file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub file: String,
    pub samples: usize,
    pub qa: usize,
    pub per_domain: BTreeMap<Domain, usize>,
    pub per_split: BTreeMap<Split, usize>,
    /// SHA-256 of the file bytes.
    pub sha256: String,
}

/// Writes one JSON value per line to a temporary file beside `path` and
/// renames it into place. Returns the SHA-256 of the bytes written.
pub fn write_jsonl_atomic<T: Serialize>(path: &Path, items: &[T]) -> Result<String, DatasetError> {
    let mut bytes = Vec::new();
    for item in items {
        serde_json::to_writer(&mut bytes, item).map_err(|e| DatasetError::Io { path: path.to_path_buf(), source: e.into() })?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Writes `bytes` to `path` via a renamed temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        w.write_all(bytes).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))?;
    }
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| DatasetError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// Reads a JSONL file; blank lines are skipped, errors carry line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// `<path>.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Validates and writes the samples, then the manifest beside them.
pub fn write_dataset(samples: &[DatasetSample], path: &Path) -> Result<DatasetManifest, DatasetError> {
    for s in samples {
        s.validate()?;
    }
    let sha256 = write_jsonl_atomic(path, samples)?;
    let mut manifest = DatasetManifest {
        file: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        samples: samples.len(),
        qa: samples.iter().map(|s| s.qa.len()).sum(),
        sha256,
        ..Default::default()
    };
    for s in samples {
        *manifest.per_domain.entry(s.domain).or_default() += 1;
        *manifest.per_split.entry(s.split).or_default() += 1;
    }
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&manifest_path(path), &json)?;
    Ok(manifest)
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetSample>, DatasetError> {
    read_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

/// A training conversation: every QA of a sample as consecutive turns after
/// a shared image-and-context prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub sample_id: String,
    pub mode: EvalMode,
    pub images: Vec<String>,
    pub messages: Vec<Message>,
}

/// Placeholder the training format puts in the first user turn, one per image.
pub const IMAGE_TOKEN: &str = "<image>";

/// Two conversations per sample: answers only, and full chains of thought.
/// The first user turn carries one image token per image and the context;
/// later turns carry only the question.
pub fn to_training_format(sample: &DatasetSample) -> [Conversation; 2] {
    [EvalMode::DirectAnswer, EvalMode::Cot].map(|mode| {
        let mut messages = Vec::with_capacity(sample.qa.len() * 2);
        for (i, qa) in sample.qa.iter().enumerate() {
            let user = if i == 0 {
                let mut prefix = String::new();
                for _ in &sample.image_refs {
                    let _ = writeln!(prefix, "{IMAGE_TOKEN}");
                }
                format!("{prefix}{}\n\n{}", sample.context, qa.question)
            } else {
                qa.question.clone()
            };
            let assistant = match mode {
                EvalMode::DirectAnswer => qa.answer.clone(),
                EvalMode::Cot => qa.cot_sentences.join(" "),
            };
            messages.push(Message { role: "user".into(), content: user });
            messages.push(Message { role: "assistant".into(), content: assistant });
        }
        let suffix = match mode {
            EvalMode::DirectAnswer => "direct",
            EvalMode::Cot => "cot",
        };
        Conversation {
            id: format!("{}-{suffix}", sample.sample_id),
            sample_id: sample.sample_id.clone(),
            mode,
            images: sample.image_refs.clone(),
            messages,
        }
    })
}

/// One single-turn evaluation item per QA.
pub fn to_eval_items(sample: &DatasetSample) -> Vec<EvalItem> {
    sample
        .qa
        .iter()
        .map(|qa| EvalItem {
            id: qa.id.clone(),
            domain: sample.domain,
            hop_count: qa.hop_count,
            question: qa.question.clone(),
            answer: qa.answer.clone(),
            context: sample.context.clone(),
            image_refs: sample.image_refs.clone(),
        })
        .collect()
}

/// One row of the statistics table. Text tokens are whitespace tokens of the
/// context alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub domain: Domain,
    pub split: Split,
    pub samples: usize,
    pub avg_images: f64,
    pub avg_text_tokens: f64,
    pub qa: usize,
    /// QA count per hop count (edges in the chain).
    pub per_hop: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Every domain × split, in that order, including empty ones.
    pub rows: Vec<StatsRow>,
}

#[derive(Debug, Clone, Default)]
struct Tally {
    samples: usize,
    images: usize,
    tokens: usize,
    qa: usize,
    per_hop: BTreeMap<usize, usize>,
}

impl Tally {
    fn merge(mut self, other: Tally) -> Tally {
        self.samples += other.samples;
        self.images += other.images;
        self.tokens += other.tokens;
        self.qa += other.qa;
        for (hop, n) in other.per_hop {
            *self.per_hop.entry(hop).or_default() += n;
        }
        self
    }
}

/// Per domain and split: sample count, mean images and context tokens per
/// sample, QA count and QA count per hop. Sums are integers, so the result
/// does not depend on sample order.
pub fn compute_stats(samples: &[DatasetSample]) -> DatasetStats {
    let tallies: BTreeMap<(Domain, Split), Tally> = samples
        .par_iter()
        .fold(BTreeMap::new, |mut acc: BTreeMap<(Domain, Split), Tally>, s| {
            let t = acc.entry((s.domain, s.split)).or_default();
            t.samples += 1;
            t.images += s.image_refs.len();
            t.tokens += whitespace_tokens(&s.context);
            t.qa += s.qa.len();
            for q in &s.qa {
                *t.per_hop.entry(q.hop_count).or_default() += 1;
            }
            acc
        })
        .reduce(BTreeMap::new, |mut a, b| {
            for (k, t) in b {
                let merged = a.remove(&k).unwrap_or_default().merge(t);
                a.insert(k, merged);
            }
            a
        });
    let mut rows = Vec::with_capacity(6);
    for domain in Domain::ALL {
        for split in Split::ALL {
            let t = tallies.get(&(domain, split)).cloned().unwrap_or_default();
            let avg = |total: usize| if t.samples == 0 { 0.0 } else { total as f64 / t.samples as f64 };
            rows.push(StatsRow {
                domain,
                split,
                samples: t.samples,
                avg_images: avg(t.images),
                avg_text_tokens: avg(t.tokens),
                qa: t.qa,
                per_hop: t.per_hop,
            });
        }
    }
    DatasetStats { rows }
}

impl DatasetStats {
    pub fn row(&self, domain: Domain, split: Split) -> &StatsRow {
        self.rows.iter().find(|r| r.domain == domain && r.split == split).expect("all rows present")
    }

    /// Aligned text table; hop columns cover every hop count seen.
    pub fn render_table(&self) -> String {
        let hops: Vec<usize> = {
            let mut hop: Vec<usize> = self.rows.iter().flat_map(|r| r.per_hop.keys().copied()).collect();
            hop.sort_unstable();
            hop.dedup();
            hop
        };
        let mut header = vec!["domain".to_string(), "split".into(), "samples".into(), "avg_images".into(), "avg_tokens".into(), "qa".into()];
        header.extend(hops.iter().map(|hop| format!("{hop}-hop")));
        let mut lines = vec![header];
        for r in &self.rows {
            let mut cells = vec![
                r.domain.to_string(),
                r.split.to_string(),
                r.samples.to_string(),
                format!("{:.2}", r.avg_images),
                format!("{:.2}", r.avg_text_tokens),
                r.qa.to_string(),
            ];
            cells.extend(hops.iter().map(|hop| r.per_hop.get(hop).copied().unwrap_or(0).to_string()));
            lines.push(cells);
        }
        let widths: Vec<usize> =
            (0..lines[0].len()).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for l in &lines {
            let row: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| if c < 2 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            out.push_str(row.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}
