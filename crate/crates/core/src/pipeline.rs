//! Stage orchestration over on-disk interchange files.
//!
//! Each stage reads [`PipelineItem`]s (or raw sources, for ingestion), does
//! its work item-parallel, and writes its outputs atomically together with a
//! [`StageManifest`] recording input, config and output hashes. A stage
//! whose manifest still matches is skipped, so reruns are byte-wise no-ops
//! and an interrupted run resumes at the first stage without a valid
//! manifest.
//!
//! Per-item failures that are not the provider's fault (an unusable bundle,
//! a paper without figure-grounded relations, a context that keeps failing
//! verification) drop the item with a note and the stage carries on.
//! Provider failures abort the stage without writing anything.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{
    generate_text_edges, generate_text_nodes, scene_captions, AugmentConfig, AugmentError, AugmentEvent,
    ImageCaptions,
};
use crate::context_gen::{generate_context, ContextError, ContextStyle, GeneratedContext, Labeler};
use crate::dataset::{
    read_jsonl, sample_id, to_eval_items, to_training_format, write_atomic, write_dataset, DatasetError,
    DatasetSample, Split,
};
use crate::embed::{EmbedError, Embedder, HttpEmbedder, RecordedEmbedder, TokenHashEmbedder};
use crate::eval::normalize_answer;
use crate::filter::{run_filters, FilterConfig, FilterLedger};
use crate::graph::{
    extract_context_subgraph, extract_full_context, filter_unique_entities, merge_scene_graphs, ChainConfig,
    ContentGraph, Domain, EdgeAssignment, GraphError, HopBounds,
};
use crate::ingest::paper::{ingest_paper, load_figure_manifest, read_tex, PaperConfig, PaperError};
use crate::ingest::scene::{load_catalog, sample_image_sets, SceneIngestError};
use crate::ingest::video::{ingest_video, VideoError, VideoSource};
use crate::llm::{
    CompletionProvider, Gateway, HttpChatProvider, HttpEndpoint, ProviderError, RecordedProvider,
    RetryPolicy, SyntheticProvider,
};
use crate::qa::{
    chain_answer, chain_triples, generate_qa, intermediate_mention, ChainTriple, FilterStage, HopDistribution,
    QaConfig, QaError, QaRecord, QaRejection, Verdict,
};
use crate::rng::{rng_for, sha256_hex};

/// Most images a merged sample may hold.
pub const MAX_IMAGES_PER_SAMPLE: usize = 6;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Scene(#[from] SceneIngestError),
    #[error("video {video_id}: {source}")]
    Video { video_id: String, source: VideoError },
    #[error("paper {paper_id}: {source}")]
    Paper { paper_id: String, source: PaperError },
    #[error("item {item_id}: augmentation: {source}")]
    Augment { item_id: String, source: AugmentError },
    #[error("item {item_id}: context: {source}")]
    Context { item_id: String, source: ContextError },
    #[error("item {item_id}: QA: {source}")]
    Qa { item_id: String, source: QaError },
    #[error("embedder: {0}")]
    Embed(#[from] EmbedError),
    #[error("provider setup: {0}")]
    Provider(ProviderError),
    #[error("item {item_id}: {reason}")]
    Item { item_id: String, reason: String },
    #[error("invalid output: {0}")]
    Invalid(String),
}

fn embed_is_provider(e: &EmbedError) -> bool {
    matches!(e, EmbedError::Service(_))
}

impl PipelineError {
    /// True when the text model or embedding service failed (as opposed to
    /// bad input or configuration).
    pub fn is_provider_failure(&self) -> bool {
        match self {
            PipelineError::Video { source: VideoError::Llm(e), .. }
            | PipelineError::Paper { source: PaperError::Llm(e), .. }
            | PipelineError::Augment { source: AugmentError::Llm(e), .. }
            | PipelineError::Context { source: ContextError::Llm(e), .. }
            | PipelineError::Qa { source: QaError::Llm(e), .. } => e.is_provider_failure(),
            PipelineError::Video { source: VideoError::Embed(e), .. }
            | PipelineError::Paper { source: PaperError::Embed(e), .. }
            | PipelineError::Embed(e) => embed_is_provider(e),
            _ => false,
        }
    }

    /// Process exit status: 2 for provider failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_provider_failure() {
            2
        } else {
            1
        }
    }

    /// Whether the error must stop the stage rather than drop one item.
    fn aborts_stage(&self) -> bool {
        self.is_provider_failure()
            || matches!(
                self,
                PipelineError::Config(_)
                    | PipelineError::Io { .. }
                    | PipelineError::Dataset(_)
                    | PipelineError::Embed(_)
                    | PipelineError::Provider(_)
                    | PipelineError::Invalid(_)
                    | PipelineError::Qa { source: QaError::Config(_), .. }
            )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Pipeline stages, named as the CLI subcommands that run them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    IngestScene,
    IngestVideo,
    IngestPaper,
    Augment,
    GenContext,
    GenQa,
    Filter,
    Package,
    AuditExport,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::IngestScene => "ingest-scene",
            Stage::IngestVideo => "ingest-video",
            Stage::IngestPaper => "ingest-paper",
            Stage::Augment => "augment",
            Stage::GenContext => "gen-context",
            Stage::GenQa => "gen-qa",
            Stage::Filter => "filter",
            Stage::Package => "package",
            Stage::AuditExport => "audit-export",
        }
    }

    fn is_ingest(self) -> bool {
        matches!(self, Stage::IngestScene | Stage::IngestVideo | Stage::IngestPaper)
    }

    /// The item-level stage that must precede this one.
    fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Augment => None, // any ingest stage
            Stage::GenContext => Some(Stage::Augment),
            Stage::GenQa => Some(Stage::GenContext),
            Stage::Filter | Stage::AuditExport => Some(Stage::GenQa),
            Stage::Package => Some(Stage::Filter),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageCountRange {
    pub min: usize,
    pub max: usize,
}

/// Augmentation knobs; the model is the pipeline's generation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSettings {
    pub max_nodes_per_image: usize,
    pub min_categories: usize,
    pub max_categories: usize,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        let d = AugmentConfig::default();
        AugmentSettings {
            max_nodes_per_image: d.max_nodes_per_image,
            min_categories: d.min_categories,
            max_categories: d.max_categories,
        }
    }
}

/// Where completions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    /// Offline rule-based stub; fully deterministic.
    Synthetic,
    /// Replays completions recorded as JSONL.
    Recorded { path: PathBuf },
    /// An OpenAI-compatible chat server; the key is read from the named env var.
    Http(HttpEndpoint),
}

/// Where embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    TokenHash { dim: usize },
    /// A JSON array of recorded `(kind, input, vector)` entries.
    Recorded { path: PathBuf },
    Http { base_url: String, timeout_secs: u64 },
}

/// Every tunable of a run. Loaded from a JSON file; missing fields take
/// their defaults, unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Images per natural-image sample.
    pub image_count: ImageCountRange,
    /// Natural-image samples drawn from the scene catalog.
    pub scene_samples: usize,
    pub hops: HopDistribution,
    /// Optional per-domain narrowing of the hop range.
    pub hop_bounds: BTreeMap<Domain, HopBounds>,
    pub qa_per_sample: usize,
    pub max_chain_draws: usize,
    pub chain: ChainConfig,
    pub judges: Vec<String>,
    pub generation_model: String,
    pub sentence_threshold: f64,
    /// Cap on concurrent provider requests (and worker threads in the CLI).
    pub concurrency: usize,
    /// Share of samples assigned to the test split.
    pub test_fraction: f64,
    pub augment: AugmentSettings,
    pub retry: RetryPolicy,
    pub provider: ProviderConfig,
    pub embedder: EmbedderConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            image_count: ImageCountRange { min: 1, max: MAX_IMAGES_PER_SAMPLE },
            scene_samples: 8,
            hops: HopDistribution::default(),
            hop_bounds: BTreeMap::new(),
            qa_per_sample: 3,
            max_chain_draws: 12,
            chain: ChainConfig::default(),
            judges: FilterConfig::default().judges,
            generation_model: "stub".into(),
            sentence_threshold: crate::ingest::paper::DEFAULT_SENTENCE_THRESHOLD,
            concurrency: 8,
            test_fraction: 0.2,
            augment: AugmentSettings::default(),
            retry: RetryPolicy::default(),
            provider: ProviderConfig::Synthetic,
            embedder: EmbedderConfig::TokenHash { dim: 256 },
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        // replay files are named relative to the config file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in config.recorded_paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let ImageCountRange { min, max } = self.image_count;
        if min == 0 || min > max || max > MAX_IMAGES_PER_SAMPLE {
            return bad(format!("image_count {min}..={max} must lie within 1..={MAX_IMAGES_PER_SAMPLE}"));
        }
        self.hops.validate().map_err(|e| PipelineError::Config(format!("hops: {e}")))?;
        for (domain, b) in &self.hop_bounds {
            let limit = domain.hop_bounds();
            if b.min < limit.min || b.min > b.max || b.max > limit.max {
                return bad(format!(
                    "hop_bounds for {domain}: {}..={} is outside {}..={}",
                    b.min, b.max, limit.min, limit.max
                ));
            }
        }
        for domain in Domain::ALL {
            self.hops_for(domain)?;
        }
        if self.qa_per_sample == 0 || self.max_chain_draws == 0 {
            return bad("qa_per_sample and max_chain_draws must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.chain.attribute_answer_probability) || self.chain.max_attempts == 0 {
            return bad("chain.attribute_answer_probability must be in [0, 1] and max_attempts positive".into());
        }
        if self.judges.is_empty() || self.judges.iter().any(|j| j.trim().is_empty()) {
            return bad("at least one non-empty judge model id is required".into());
        }
        if self.generation_model.trim().is_empty() {
            return bad("generation_model is empty".into());
        }
        if !(-1.0..=1.0).contains(&self.sentence_threshold) {
            return bad(format!("sentence_threshold {} is not a cosine", self.sentence_threshold));
        }
        if self.concurrency == 0 {
            return bad("concurrency must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction {} is not in [0, 1]", self.test_fraction));
        }
        let a = self.augment;
        if a.min_categories == 0 || a.min_categories > a.max_categories {
            return bad("augment categories need 1 <= min_categories <= max_categories".into());
        }
        if self.retry.max_attempts == 0 {
            return bad("retry.max_attempts must be positive".into());
        }
        if let EmbedderConfig::TokenHash { dim: 0 } = self.embedder {
            return bad("embedder dim must be positive".into());
        }
        Ok(())
    }

    /// The hop distribution used for `domain`: the configured shares,
    /// restricted to the domain's (possibly narrowed) bounds and renormalized.
    pub fn hops_for(&self, domain: Domain) -> Result<HopDistribution, PipelineError> {
        let bounds = self.hop_bounds.get(&domain).copied().unwrap_or_else(|| domain.hop_bounds());
        let kept: BTreeMap<usize, f64> =
            self.hops.0.iter().filter(|(hop, _)| bounds.contains(**hop)).map(|(hop, p)| (*hop, *p)).collect();
        let mass: f64 = kept.values().sum();
        if mass <= 0.0 {
            return Err(PipelineError::Config(format!(
                "hop distribution has no mass within {}..={} for {domain}",
                bounds.min, bounds.max
            )));
        }
        Ok(HopDistribution(kept.into_iter().map(|(hop, p)| (hop, p / mass)).collect()))
    }

    /// SHA-256 of the canonical JSON form; stage manifests record it.
    pub fn sha256(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Replay files the config points at. Their contents affect outputs, so
    /// stage manifests hash them alongside the stage inputs.
    pub fn recorded_files(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        if let ProviderConfig::Recorded { path } = &self.provider {
            out.push(path.clone());
        }
        if let EmbedderConfig::Recorded { path } = &self.embedder {
            out.push(path.clone());
        }
        out
    }

    fn recorded_paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        let provider = match &mut self.provider {
            ProviderConfig::Recorded { path } => Some(path),
            _ => None,
        };
        let embedder = match &mut self.embedder {
            EmbedderConfig::Recorded { path } => Some(path),
            _ => None,
        };
        provider.into_iter().chain(embedder)
    }

    fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            model_id: self.generation_model.clone(),
            max_nodes_per_image: self.augment.max_nodes_per_image,
            min_categories: self.augment.min_categories,
            max_categories: self.augment.max_categories,
        }
    }
}

/// Builds the gateway for the configured provider, optionally logging every
/// exchange to `log`.
pub fn build_gateway(config: &PipelineConfig, log: Option<&Path>) -> Result<Gateway, PipelineError> {
    let provider: Arc<dyn CompletionProvider> = match &config.provider {
        ProviderConfig::Synthetic => Arc::new(SyntheticProvider::new()),
        ProviderConfig::Recorded { path } => Arc::new(RecordedProvider::from_jsonl(path).map_err(io_err(path))?),
        ProviderConfig::Http(endpoint) => Arc::new(HttpChatProvider::new(endpoint).map_err(PipelineError::Provider)?),
    };
    let gateway = Gateway::new(provider, config.retry, config.concurrency);
    match log {
        Some(path) => gateway.with_log(path).map_err(io_err(path)),
        None => Ok(gateway),
    }
}

pub fn build_embedder(config: &PipelineConfig) -> Result<Box<dyn Embedder>, PipelineError> {
    Ok(match &config.embedder {
        EmbedderConfig::TokenHash { dim } => Box::new(TokenHashEmbedder { dim: *dim }),
        EmbedderConfig::Recorded { path } => Box::new(RecordedEmbedder::from_json_file(path)?),
        EmbedderConfig::Http { base_url, timeout_secs } => {
            Box::new(HttpEmbedder::new(base_url, Duration::from_secs(*timeout_secs))?)
        }
    })
}

/// Why an item left the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropNote {
    pub stage: Stage,
    pub reason: String,
}

/// One sample in flight between stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineItem {
    pub item_id: String,
    pub domain: Domain,
    pub image_refs: Vec<String>,
    pub graph: ContentGraph,
    /// Per-image captions for augmentation, when the source supplied them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub captions: Vec<ImageCaptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contexts: Vec<GeneratedContext>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub augment_events: Vec<AugmentEvent>,
    #[serde(default)]
    pub qa: Vec<QaRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub qa_rejections: Vec<QaRejection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_ledger: Option<FilterLedger>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped: Option<DropNote>,
    /// Stages applied so far, in order.
    pub stages: Vec<Stage>,
}

impl PipelineItem {
    fn new(item_id: String, domain: Domain, image_refs: Vec<String>, graph: ContentGraph, stage: Stage) -> Self {
        PipelineItem {
            item_id,
            domain,
            image_refs,
            graph,
            captions: Vec::new(),
            context: None,
            contexts: Vec::new(),
            augment_events: Vec::new(),
            qa: Vec::new(),
            qa_rejections: Vec::new(),
            filter_ledger: None,
            dropped: None,
            stages: vec![stage],
        }
    }

    fn drop_at(&mut self, stage: Stage, reason: impl Into<String>) {
        self.dropped = Some(DropNote { stage, reason: reason.into() });
    }

    fn has(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    /// Checks that `stage` may run on this item: its prerequisite ran and it
    /// did not run already.
    fn check_ready(&self, stage: Stage) -> Result<(), PipelineError> {
        let item_err = |reason: String| PipelineError::Config(format!("item {}: {reason}", self.item_id));
        if self.has(stage) {
            return Err(item_err(format!("already went through {stage}")));
        }
        let ready = match stage.prerequisite() {
            None => self.stages.iter().any(|s| s.is_ingest()),
            Some(p) => self.has(p),
        };
        if ready {
            Ok(())
        } else {
            let need = stage.prerequisite().map_or("an ingest stage".to_string(), |p| p.to_string());
            Err(item_err(format!("has not been through {need} (stages so far: {:?})", self.stages)))
        }
    }

    pub fn is_live(&self) -> bool {
        self.dropped.is_none()
    }
}

/// Runs `work` over the live items in parallel (dropped items pass through)
/// and marks each item with `stage`. Errors that only concern one item drop
/// it; the first stage-aborting error (in item order) is returned.
fn apply_stage<F>(items: Vec<PipelineItem>, stage: Stage, work: F) -> Result<Vec<PipelineItem>, PipelineError>
where
    F: Fn(&mut PipelineItem) -> Result<(), PipelineError> + Sync + Send,
{
    for item in &items {
        item.check_ready(stage)?;
    }
    let results: Vec<Result<PipelineItem, PipelineError>> = items
        .into_par_iter()
        .map(|mut item| {
            if item.is_live() {
                match work(&mut item) {
                    Ok(()) => {}
                    Err(e) if e.aborts_stage() => return Err(e),
                    Err(e) => {
                        log::warn!("{stage}: dropping {}: {e}", item.item_id);
                        item.drop_at(stage, e.to_string());
                    }
                }
            }
            item.stages.push(stage);
            Ok(item)
        })
        .collect();
    results.into_iter().collect()
}

/// Samples natural-image sets from scene-graph files and merges each set.
pub fn ingest_scenes(paths: &[PathBuf], config: &PipelineConfig) -> Result<Vec<PipelineItem>, PipelineError> {
    let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    let (raws, diagnostics, errors) = load_catalog(&refs);
    for d in &diagnostics {
        log::warn!("scene diagnostic: {d:?}");
    }
    if let Some(first) = errors.into_iter().next() {
        return Err(first.into());
    }
    let by_id: BTreeMap<&str, _> = raws.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let catalog: Vec<String> = raws.iter().map(|r| r.image_id.clone()).collect();
    let mut rng = rng_for(config.seed, &[Stage::IngestScene.as_str()]);
    let sets = sample_image_sets(&catalog, config.scene_samples, config.image_count.min..=config.image_count.max, &mut rng)?;

    let mut seen = BTreeSet::new();
    let mut items = Vec::new();
    for set in sets {
        let item_id = format!("ni-{}", &sha256_hex(set.join("\u{1f}").as_bytes())[..12]);
        if !seen.insert(item_id.clone()) {
            continue;
        }
        let scenes: Vec<_> = set.iter().map(|id| filter_unique_entities(&by_id[id.as_str()].to_scene_graph()).scene).collect();
        let image_refs = set.iter().map(|id| by_id[id.as_str()].image_file()).collect();
        let merged = merge_scene_graphs(&scenes, Domain::NI).and_then(|graph| graph.validate(false).map(|()| graph));
        let item = match merged {
            Ok(graph) => PipelineItem::new(item_id, Domain::NI, image_refs, graph, Stage::IngestScene),
            Err(e) => dropped_item(item_id, Domain::NI, image_refs, Stage::IngestScene, e),
        };
        items.push(item);
    }
    Ok(items)
}

fn dropped_item(item_id: String, domain: Domain, image_refs: Vec<String>, stage: Stage, why: impl fmt::Display) -> PipelineItem {
    let mut item = PipelineItem::new(item_id, domain, image_refs, ContentGraph::new(domain, 0), stage);
    item.drop_at(stage, why.to_string());
    item
}

/// Ingests every video of a JSONL listing of [`VideoSource`]s. Frame paths
/// are relative to the listing's directory. Returns the items and, per
/// video, the full ingestion record (or `null` when it was dropped).
pub fn ingest_videos(
    listing: &Path,
    gateway: &Gateway,
    embedder: &dyn Embedder,
    config: &PipelineConfig,
) -> Result<(Vec<PipelineItem>, Vec<serde_json::Value>), PipelineError> {
    let sources: Vec<VideoSource> = read_jsonl(listing)?;
    let base = listing.parent().unwrap_or(Path::new("."));
    let results: Vec<Result<(PipelineItem, serde_json::Value), PipelineError>> = sources
        .par_iter()
        .map(|src| {
            let item_id = format!("vf-{}", src.video_id);
            match ingest_video(src, base, embedder, gateway, &config.generation_model) {
                Ok(sample) => {
                    let scene = scene_captions(&sample.graph);
                    let captions = sample
                        .captions
                        .iter()
                        .zip(scene)
                        .map(|(c, s)| ImageCaptions { caption: c.text.clone(), object_captions: s.object_captions })
                        .collect();
                    let mut item =
                        PipelineItem::new(item_id, Domain::VF, sample.image_refs.clone(), sample.graph.clone(), Stage::IngestVideo);
                    item.captions = captions;
                    Ok((item, serde_json::to_value(&sample).expect("sample serializes")))
                }
                Err(source) => {
                    let e = PipelineError::Video { video_id: src.video_id.clone(), source };
                    if e.aborts_stage() {
                        return Err(e);
                    }
                    log::warn!("ingest-video: dropping {item_id}: {e}");
                    Ok((dropped_item(item_id, Domain::VF, Vec::new(), Stage::IngestVideo, e), serde_json::Value::Null))
                }
            }
        })
        .collect();
    Ok(results.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().unzip())
}

/// One paper of an ingest listing: TeX files in reading order and the figure
/// manifest, both relative to the listing's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaperSource {
    pub paper_id: String,
    pub tex: Vec<PathBuf>,
    pub figures: PathBuf,
}

/// Ingests every paper of a JSONL listing of [`PaperSource`]s.
pub fn ingest_papers(
    listing: &Path,
    gateway: &Gateway,
    embedder: &dyn Embedder,
    config: &PipelineConfig,
) -> Result<(Vec<PipelineItem>, Vec<serde_json::Value>), PipelineError> {
    let sources: Vec<PaperSource> = read_jsonl(listing)?;
    let base = listing.parent().unwrap_or(Path::new("."));
    let paper_config = PaperConfig { model_id: config.generation_model.clone(), sentence_threshold: config.sentence_threshold };
    let results: Vec<Result<(PipelineItem, serde_json::Value), PipelineError>> = sources
        .par_iter()
        .map(|src| {
            let item_id = format!("sp-{}", src.paper_id);
            let paper_err = |source| PipelineError::Paper { paper_id: src.paper_id.clone(), source };
            let tex_paths: Vec<PathBuf> = src.tex.iter().map(|p| base.join(p)).collect();
            // unreadable inputs are the user's problem, not one item's
            let tex = read_tex(&tex_paths).map_err(|e| PipelineError::Config(paper_err(e).to_string()))?;
            let figures =
                load_figure_manifest(&base.join(&src.figures)).map_err(|e| PipelineError::Config(paper_err(e).to_string()))?;
            let sample = match ingest_paper(&tex, &figures, gateway, embedder, &paper_config) {
                Ok(s) => s,
                Err(source) => {
                    let e = paper_err(source);
                    if e.aborts_stage() {
                        return Err(e);
                    }
                    log::warn!("ingest-paper: dropping {item_id}: {e}");
                    return Ok((dropped_item(item_id, Domain::SP, Vec::new(), Stage::IngestPaper, e), serde_json::Value::Null));
                }
            };
            let detail = serde_json::to_value(&sample).expect("sample serializes");
            let item = match sample.graph {
                Some(pg) => {
                    let mut item = PipelineItem::new(item_id, Domain::SP, pg.image_refs, pg.graph, Stage::IngestPaper);
                    item.context = Some(sample.context);
                    item
                }
                None => dropped_item(item_id, Domain::SP, Vec::new(), Stage::IngestPaper, "no figure-grounded relation"),
            };
            Ok((item, detail))
        })
        .collect();
    Ok(results.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().unzip())
}

/// Every file an ingest listing refers to (that exists), after the listing
/// itself: frames for videos, TeX and figure manifests for papers.
pub fn listing_inputs(stage: Stage, listing: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let base = listing.parent().unwrap_or(Path::new("."));
    let mut out = vec![listing.to_path_buf()];
    match stage {
        Stage::IngestVideo => {
            for v in read_jsonl::<VideoSource>(listing)? {
                out.extend(v.frames.iter().map(|f| base.join(&f.path)).filter(|p| p.is_file()));
            }
        }
        Stage::IngestPaper => {
            for p in read_jsonl::<PaperSource>(listing)? {
                out.extend(p.tex.iter().map(|t| base.join(t)));
                out.push(base.join(&p.figures));
            }
        }
        _ => {}
    }
    Ok(out)
}

/// Adds textual entities and relations. Natural images are captioned from
/// their own scene graphs, video frames use the ingest captions; papers
/// already carry textual entities and pass through.
pub fn augment(items: Vec<PipelineItem>, gateway: &Gateway, config: &PipelineConfig) -> Result<Vec<PipelineItem>, PipelineError> {
    let aug = config.augment_config();
    apply_stage(items, Stage::Augment, |item| {
        let captions = match item.domain {
            Domain::SP => return Ok(()),
            Domain::NI => scene_captions(&item.graph),
            Domain::VF => item.captions.clone(),
        };
        let err = |source| PipelineError::Augment { item_id: item.item_id.clone(), source };
        let mut rng = rng_for(config.seed, &[Stage::Augment.as_str(), &item.item_id]);
        let (graph, mut events) = generate_text_nodes(&item.graph, &captions, gateway, &aug, &mut rng).map_err(err)?;
        let (graph, edge_events) = generate_text_edges(&graph, gateway, &config.generation_model).map_err(err)?;
        events.extend(edge_events);
        item.augment_events = events;
        graph.validate(true).map_err(|e| PipelineError::Item { item_id: item.item_id.clone(), reason: e.to_string() })?;
        item.graph = graph;
        Ok(())
    })
}

/// Writes the narrative context: one passage per image for natural images
/// (joined in image order), one passage over the whole graph for videos.
/// Paper items keep their filtered source text.
pub fn gen_context(items: Vec<PipelineItem>, gateway: &Gateway, config: &PipelineConfig) -> Result<Vec<PipelineItem>, PipelineError> {
    apply_stage(items, Stage::GenContext, |item| {
        let graph = &item.graph;
        let labeler = Labeler::new(graph);
        let mut rng = rng_for(config.seed, &[Stage::GenContext.as_str(), &item.item_id]);
        let item_id = item.item_id.clone();
        let ctx_err = |source| PipelineError::Context { item_id: item_id.clone(), source };
        let graph_err = |e: GraphError| PipelineError::Item { item_id: item_id.clone(), reason: e.to_string() };
        let views = match item.domain {
            Domain::SP => return Ok(()),
            Domain::VF => vec![extract_full_context(graph)],
            Domain::NI => {
                let assignment = EdgeAssignment::random(graph, &mut rng);
                (0..graph.image_count)
                    .map(|i| extract_context_subgraph(graph, i, &assignment))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(graph_err)?
            }
        };
        let mut contexts = Vec::new();
        for view in &views {
            let style = ContextStyle::random(&mut rng);
            match generate_context(view, style, &labeler, gateway, &config.generation_model) {
                Ok(c) => contexts.push(c),
                Err(ContextError::NothingToNarrate) => {}
                Err(e) => return Err(ctx_err(e)),
            }
        }
        if contexts.is_empty() {
            return Err(ctx_err(ContextError::NothingToNarrate));
        }
        item.context = Some(contexts.iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join("\n\n"));
        item.contexts = contexts;
        Ok(())
    })
}

/// Samples chains and generates QA records with chain-of-thought.
pub fn gen_qa(items: Vec<PipelineItem>, gateway: &Gateway, config: &PipelineConfig) -> Result<Vec<PipelineItem>, PipelineError> {
    let per_domain: BTreeMap<Domain, QaConfig> = Domain::ALL
        .iter()
        .map(|&d| {
            let hops = config.hops_for(d)?;
            Ok((
                d,
                QaConfig {
                    model_id: config.generation_model.clone(),
                    max_per_sample: config.qa_per_sample,
                    max_draws: config.max_chain_draws,
                    hops,
                    chain: config.chain,
                },
            ))
        })
        .collect::<Result<_, PipelineError>>()?;
    apply_stage(items, Stage::GenQa, |item| {
        let labeler = Labeler::new(&item.graph);
        let mut rng = rng_for(config.seed, &[Stage::GenQa.as_str(), &item.item_id]);
        let outcome = generate_qa(&item.graph, &item.item_id, &labeler, gateway, &per_domain[&item.domain], &mut rng)
            .map_err(|source| PipelineError::Qa { item_id: item.item_id.clone(), source })?;
        item.qa = outcome.records;
        item.qa_rejections = outcome.rejections;
        if item.qa.is_empty() {
            return Err(PipelineError::Item {
                item_id: item.item_id.clone(),
                reason: format!("no usable QA record ({} draws found no chain)", outcome.empty_draws),
            });
        }
        Ok(())
    })
}

/// Runs the filter cascade on every item's records.
pub fn filter(items: Vec<PipelineItem>, gateway: &Gateway, config: &PipelineConfig) -> Result<Vec<PipelineItem>, PipelineError> {
    let filter_config = FilterConfig { judges: config.judges.clone() };
    apply_stage(items, Stage::Filter, |item| {
        let (survivors, ledger) = run_filters(std::mem::take(&mut item.qa), &item.graph, gateway, &filter_config);
        item.qa = survivors;
        item.filter_ledger = Some(ledger);
        if item.qa.is_empty() {
            return Err(PipelineError::Item { item_id: item.item_id.clone(), reason: "no record survived filtering".into() });
        }
        Ok(())
    })
}

/// Filter ledgers of all items, merged.
pub fn merged_ledger(items: &[PipelineItem]) -> FilterLedger {
    let mut total = FilterLedger::default();
    for l in items.iter().filter_map(|i| i.filter_ledger.clone()) {
        total.merge(l);
    }
    total
}

/// Turns filtered items into dataset samples, re-validating every record
/// against its graph. Samples with identical content are emitted once.
pub fn package(items: &[PipelineItem], config: &PipelineConfig) -> Result<Vec<DatasetSample>, PipelineError> {
    let mut seen = BTreeSet::new();
    let mut samples = Vec::new();
    for item in items {
        item.check_ready(Stage::Package)?;
        if !item.is_live() {
            continue;
        }
        for r in &item.qa {
            r.validate(&item.graph).map_err(|e| PipelineError::Invalid(format!("{} record {}: {e}", item.item_id, r.id)))?;
            if r.filter_verdicts.values().any(|v| *v != Verdict::Pass) || r.filter_verdicts.len() != FilterStage::ALL.len() {
                return Err(PipelineError::Invalid(format!("{} record {} has not passed every filter", item.item_id, r.id)));
            }
        }
        let context = item
            .context
            .clone()
            .ok_or_else(|| PipelineError::Invalid(format!("{} reached packaging without context", item.item_id)))?;
        let id = sample_id(item.domain, &item.image_refs, &context);
        if !seen.insert(id.clone()) {
            continue;
        }
        let split = Split::assign(&id, config.test_fraction);
        let sample = DatasetSample::new(item.domain, item.image_refs.clone(), context, item.qa.clone(), split);
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Files written by [`write_package`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackageFiles {
    pub dataset: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
}

impl PackageFiles {
    pub fn in_dir(dir: &Path) -> Self {
        PackageFiles { dataset: dir.join("dataset.jsonl"), train: dir.join("train.jsonl"), test: dir.join("test.jsonl") }
    }

    pub fn all(&self) -> Vec<PathBuf> {
        vec![self.dataset.clone(), crate::dataset::manifest_path(&self.dataset), self.train.clone(), self.test.clone()]
    }
}

/// Writes the dataset (with its manifest), the training conversations of
/// the train split and the evaluation items of the test split.
pub fn write_package(samples: &[DatasetSample], files: &PackageFiles) -> Result<(), PipelineError> {
    write_dataset(samples, &files.dataset)?;
    let train: Vec<_> = samples.iter().filter(|s| s.split == Split::Train).flat_map(to_training_format).collect();
    let test: Vec<_> = samples.iter().filter(|s| s.split == Split::Test).flat_map(to_eval_items).collect();
    crate::dataset::write_jsonl_atomic(&files.train, &train)?;
    crate::dataset::write_jsonl_atomic(&files.test, &test)?;
    Ok(())
}

/// One line of the human-verification checklist. `auto` is set when the
/// property can be decided mechanically; raters judge the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecklistItem {
    pub key: String,
    pub criterion: String,
    pub auto: Option<bool>,
}

/// What a rater sees for one QA pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditBundle {
    pub record_id: String,
    pub item_id: String,
    pub domain: Domain,
    pub images: Vec<String>,
    pub context: String,
    pub question: String,
    pub answer: String,
    pub cot_sentences: Vec<String>,
    pub hop_count: usize,
    pub subgraph: Vec<ChainTriple>,
    pub filter_verdicts: BTreeMap<FilterStage, Verdict>,
    pub checklist: Vec<ChecklistItem>,
    /// `keep`, `discard` or `unsure`, filled in by the rater.
    pub decision: Option<String>,
}

fn checklist(record: &QaRecord, graph: &ContentGraph, triples: &[ChainTriple]) -> Vec<ChecklistItem> {
    let chain = &record.chain;
    let item = |key: &str, criterion: &str, auto: Option<bool>| ChecklistItem {
        key: key.into(),
        criterion: criterion.into(),
        auto,
    };
    let both = chain.path.iter().any(|n| n.is_visual()) && chain.path.iter().any(|n| !n.is_visual());
    let matches = chain_answer(chain, graph).map(|a| normalize_answer(&a) == normalize_answer(&record.answer)).ok();
    let single_modality = record.filter_verdicts.get(&FilterStage::SingleModality).map(|v| *v == Verdict::Pass);
    vec![
        item("needs_image_and_text", "Answering requires both the image(s) and the text", Some(both && single_modality != Some(false))),
        item("multi_hop", "The reasoning links more than one fact", Some(triples.len() >= 2)),
        item("answer_correct", "The answer is correct, complete and consistent with the evidence", matches),
        item("no_reasoning_leak", "The question does not reveal the reasoning trace", Some(intermediate_mention(&record.question, chain).is_none())),
        item("natural_question", "The question is natural, clear and well-posed", None),
        item("single_answer", "Exactly one valid, non-subjective answer exists", None),
        item("faithful_to_subgraph", "Question and answer convey the chain subgraph faithfully", None),
    ]
}

/// One audit bundle per record of every live item.
pub fn audit_bundles(items: &[PipelineItem]) -> Result<Vec<AuditBundle>, PipelineError> {
    let mut out = Vec::new();
    for item in items {
        item.check_ready(Stage::AuditExport)?;
        if !item.is_live() {
            continue;
        }
        let labeler = Labeler::new(&item.graph);
        for r in &item.qa {
            let subgraph = chain_triples(&r.chain, &labeler);
            out.push(AuditBundle {
                record_id: r.id.clone(),
                item_id: item.item_id.clone(),
                domain: item.domain,
                images: item.image_refs.clone(),
                context: item.context.clone().unwrap_or_default(),
                question: r.question.clone(),
                answer: r.answer.clone(),
                cot_sentences: r.cot_sentences.clone(),
                hop_count: r.hop_count,
                checklist: checklist(r, &item.graph, &subgraph),
                subgraph,
                filter_verdicts: r.filter_verdicts.clone(),
                decision: None,
            });
        }
    }
    Ok(out)
}

/// Written beside a stage's primary output as `<output>.stage.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub config_sha256: String,
    /// Input path (as given) -> SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub items: usize,
    pub dropped: usize,
}

pub fn stage_manifest_path(primary_output: &Path) -> PathBuf {
    let mut s = primary_output.as_os_str().to_owned();
    s.push(".stage.json");
    PathBuf::from(s)
}

pub fn file_sha256(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&std::fs::read(path).map_err(io_err(path))?))
}

fn hash_files(paths: &[PathBuf]) -> Result<BTreeMap<String, String>, PipelineError> {
    paths.iter().map(|p| Ok((p.display().to_string(), file_sha256(p)?))).collect()
}

/// What a stage run did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub stage: Stage,
    /// True when a matching manifest made the run unnecessary.
    pub skipped: bool,
    pub manifest: StageManifest,
}

/// Counts a stage body reports back.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageCounts {
    pub items: usize,
    pub dropped: usize,
}

impl StageCounts {
    pub fn of(items: &[PipelineItem]) -> Self {
        StageCounts { items: items.len(), dropped: items.iter().filter(|i| !i.is_live()).count() }
    }
}

/// Runs `body` unless the manifest beside `outputs[0]` shows the same stage
/// already ran on identical inputs and config and its outputs are intact.
/// `body` writes every file in `outputs`; the manifest is written last, so a
/// crash mid-stage leaves no valid manifest and the stage reruns.
pub fn run_stage<F>(
    stage: Stage,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    config: &PipelineConfig,
    force: bool,
    body: F,
) -> Result<StageReport, PipelineError>
where
    F: FnOnce() -> Result<StageCounts, PipelineError>,
{
    let primary = outputs.first().ok_or_else(|| PipelineError::Config(format!("{stage}: no output path")))?;
    let manifest_path = stage_manifest_path(primary);
    let input_hashes = hash_files(inputs)?;
    let config_sha256 = config.sha256();
    if !force {
        if let Some(m) = read_manifest(&manifest_path) {
            let outputs_intact = m.outputs.len() == outputs.len()
                && outputs.iter().all(|p| {
                    m.outputs.get(&p.display().to_string()).is_some_and(|digest| file_sha256(p).ok().as_ref() == Some(digest))
                });
            if m.stage == stage && m.config_sha256 == config_sha256 && m.inputs == input_hashes && outputs_intact {
                log::info!("{stage}: outputs are up to date, skipping");
                return Ok(StageReport { stage, skipped: true, manifest: m });
            }
        }
    }
    for dir in outputs.iter().filter_map(|p| p.parent()).filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let counts = body()?;
    let manifest = StageManifest {
        stage,
        config_sha256,
        inputs: input_hashes,
        outputs: hash_files(outputs)?,
        items: counts.items,
        dropped: counts.dropped,
    };
    write_atomic(&manifest_path, &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;
    Ok(StageReport { stage, skipped: false, manifest })
}

fn read_manifest(path: &Path) -> Option<StageManifest> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

/// Reads and concatenates item files in order.
pub fn read_items(paths: &[PathBuf]) -> Result<Vec<PipelineItem>, PipelineError> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_jsonl::<PipelineItem>(p)?);
    }
    Ok(out)
}

pub fn write_items(path: &Path, items: &[PipelineItem]) -> Result<(), PipelineError> {
    crate::dataset::write_jsonl_atomic(path, items)?;
    Ok(())
}

/// The details file written next to an ingest output.
pub fn details_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".details.jsonl");
    PathBuf::from(s)
}
