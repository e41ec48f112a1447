//! `hopweave`: runs the dataset pipeline stage by stage over JSONL files.
//!
//! Exit status: 0 on success, 1 for user errors (bad arguments, config or
//! input), 2 when the text model or embedding service failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hopweave::dataset::{compute_stats, read_dataset, write_atomic};
use hopweave::embed::{Embedder, RecordingEmbedder};
use hopweave::eval::{evaluate_run, read_eval_items, read_predictions, render_table, EvalMode};
use hopweave::llm::Gateway;
use hopweave::pipeline::{
    self, audit_bundles, build_embedder, build_gateway, details_path, read_items, run_stage, write_items,
    PackageFiles, PipelineConfig, PipelineError, PipelineItem, Stage, StageCounts, StageReport,
};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "hopweave", version, about = "Build cross-modal multi-hop QA datasets from images, videos and papers")]
struct Cli {
    /// Pipeline config (JSON). Omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Rerun stages even when their manifests say the outputs are current.
    #[arg(long, global = true)]
    force: bool,
    /// Append every model exchange to this JSONL file.
    #[arg(long, global = true)]
    log_exchanges: Option<PathBuf>,
    /// Save every embedding used to this JSON file, for later replay.
    #[arg(long, global = true)]
    record_embeddings: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct StageIo {
    /// Item files from the previous stage, concatenated in order.
    #[arg(long = "input", short, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Direct,
    Cot,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Direct => EvalMode::DirectAnswer,
            ModeArg::Cot => EvalMode::Cot,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample natural-image sets from scene-graph files and merge them.
    IngestScene {
        #[arg(long, required = true, num_args = 1..)]
        scenes: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Select frames and build graphs for a JSONL listing of captioned videos.
    IngestVideo {
        #[arg(long)]
        videos: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Segment, extract and filter a JSONL listing of TeX papers.
    IngestPaper {
        #[arg(long)]
        papers: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Add textual entities and relations.
    Augment(StageIo),
    /// Write narrative context passages.
    GenContext(StageIo),
    /// Sample reasoning chains and generate QA with chain of thought.
    GenQa(StageIo),
    /// Apply the filter cascade.
    Filter(StageIo),
    /// Emit the dataset, training conversations and test items.
    Package {
        #[arg(long = "input", short, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Per-domain, per-split statistics of a packaged dataset.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        /// Also write the table as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Score model predictions against a packaged test split.
    Eval {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum, default_value = "direct")]
        mode: ModeArg,
        /// Write the full result as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one human-verification bundle per QA record.
    AuditExport(StageIo),
    /// Run every stage into a work directory, resuming where possible.
    RunAll {
        #[arg(long, num_args = 1..)]
        scenes: Vec<PathBuf>,
        #[arg(long)]
        videos: Option<PathBuf>,
        #[arg(long)]
        papers: Option<PathBuf>,
        #[arg(long)]
        work_dir: PathBuf,
    },
    /// Print the default configuration.
    DefaultConfig,
}

/// Lazily built provider handles shared by the stages of one invocation.
struct Runtime {
    config: PipelineConfig,
    force: bool,
    log_exchanges: Option<PathBuf>,
    record_embeddings: Option<PathBuf>,
    gateway: Option<Gateway>,
}

impl Runtime {
    fn gateway(&mut self) -> Result<&Gateway> {
        if self.gateway.is_none() {
            self.gateway = Some(build_gateway(&self.config, self.log_exchanges.as_deref())?);
        }
        Ok(self.gateway.as_ref().expect("just built"))
    }

    /// Runs `f` with the configured embedder, saving recordings afterwards
    /// when asked to.
    fn with_embedder<T>(&self, f: impl FnOnce(&dyn Embedder) -> Result<T>) -> Result<T> {
        let embedder = build_embedder(&self.config)?;
        match &self.record_embeddings {
            None => f(embedder.as_ref()),
            Some(path) => {
                let recording = RecordingEmbedder::new(embedder);
                let out = f(&recording)?;
                recording.save(path).with_context(|| format!("saving embeddings to {}", path.display()))?;
                Ok(out)
            }
        }
    }

    fn stage(&self, stage: Stage, inputs: &[PathBuf], outputs: &[PathBuf], body: impl FnOnce() -> Result<StageCounts, PipelineError>) -> Result<StageReport> {
        let mut inputs = inputs.to_vec();
        inputs.extend(self.config.recorded_files());
        let report = run_stage(stage, &inputs, outputs, &self.config, self.force, body)?;
        print_report(&report);
        Ok(report)
    }

    fn ingest_scene(&self, scenes: &[PathBuf], out: &Path) -> Result<StageReport> {
        self.stage(Stage::IngestScene, scenes, &[out.to_path_buf()], || {
            let items = pipeline::ingest_scenes(scenes, &self.config)?;
            write_items(out, &items)?;
            Ok(StageCounts::of(&items))
        })
    }

    fn ingest_with<F>(&mut self, stage: Stage, listing: &Path, out: &Path, ingest: F) -> Result<StageReport>
    where
        F: FnOnce(&Path, &Gateway, &dyn Embedder, &PipelineConfig) -> Result<(Vec<PipelineItem>, Vec<serde_json::Value>), PipelineError>,
    {
        let details = details_path(out);
        let outputs = [out.to_path_buf(), details.clone()];
        let mut inputs = pipeline::listing_inputs(stage, listing)?;
        inputs.extend(self.config.recorded_files());
        self.gateway()?;
        let gateway = self.gateway.as_ref().expect("built above");
        let report = self.with_embedder(|embedder| {
            Ok(run_stage(stage, &inputs, &outputs, &self.config, self.force, || {
                let (items, detail) = ingest(listing, gateway, embedder, &self.config)?;
                write_items(out, &items)?;
                hopweave::dataset::write_jsonl_atomic(&details, &detail)?;
                Ok(StageCounts::of(&items))
            })?)
        })?;
        print_report(&report);
        Ok(report)
    }

    fn item_stage<F>(&mut self, stage: Stage, inputs: &[PathBuf], out: &Path, work: F) -> Result<StageReport>
    where
        F: FnOnce(Vec<PipelineItem>, &Gateway, &PipelineConfig) -> Result<Vec<PipelineItem>, PipelineError>,
    {
        self.gateway()?;
        let gateway = self.gateway.as_ref().expect("built above");
        self.stage(stage, inputs, &[out.to_path_buf()], || {
            let items = work(read_items(inputs)?, gateway, &self.config)?;
            write_items(out, &items)?;
            Ok(StageCounts::of(&items))
        })
    }

    fn package(&self, inputs: &[PathBuf], out_dir: &Path) -> Result<StageReport> {
        let files = PackageFiles::in_dir(out_dir);
        self.stage(Stage::Package, inputs, &files.all(), || {
            let items = read_items(inputs)?;
            let samples = pipeline::package(&items, &self.config)?;
            pipeline::write_package(&samples, &files)?;
            Ok(StageCounts { items: samples.len(), dropped: items.len() - items.iter().filter(|i| i.is_live()).count() })
        })
    }

    fn audit_export(&self, inputs: &[PathBuf], out: &Path) -> Result<StageReport> {
        self.stage(Stage::AuditExport, inputs, &[out.to_path_buf()], || {
            let bundles = audit_bundles(&read_items(inputs)?)?;
            hopweave::dataset::write_jsonl_atomic(out, &bundles)?;
            Ok(StageCounts { items: bundles.len(), dropped: 0 })
        })
    }
}

/// One JSON line per stage on stdout.
fn print_report(report: &StageReport) {
    let m = &report.manifest;
    println!(
        "{}",
        json!({"stage": report.stage, "skipped": report.skipped, "items": m.items, "dropped": m.dropped, "outputs": m.outputs})
    );
}

fn stats(dataset: &Path, json_out: Option<&Path>) -> Result<()> {
    let samples = read_dataset(dataset)?;
    let stats = compute_stats(&samples);
    print!("{}", stats.render_table());
    if let Some(path) = json_out {
        write_atomic(path, &serde_json::to_vec_pretty(&stats)?)?;
    }
    Ok(())
}

fn eval(test: &Path, predictions: &Path, mode: EvalMode, out: Option<&Path>) -> Result<()> {
    let items = read_eval_items(test)?;
    let preds = read_predictions(predictions)?;
    let result = evaluate_run(&items, &preds, mode)?;
    if !result.unknown.is_empty() {
        log::warn!("{} predictions match no test item and were ignored", result.unknown.len());
    }
    if !result.missing.is_empty() {
        log::warn!("{} test items have no prediction and score 0", result.missing.len());
    }
    print!("{}", render_table(&result));
    if let Some(path) = out {
        write_atomic(path, &serde_json::to_vec_pretty(&result)?)?;
    }
    Ok(())
}

fn run_all(rt: &mut Runtime, scenes: &[PathBuf], videos: Option<&Path>, papers: Option<&Path>, work: &Path) -> Result<()> {
    if scenes.is_empty() && videos.is_none() && papers.is_none() {
        bail!("run-all needs at least one of --scenes, --videos, --papers");
    }
    std::fs::create_dir_all(work).with_context(|| format!("creating {}", work.display()))?;
    let mut ingested = Vec::new();
    if !scenes.is_empty() {
        let out = work.join("ingest-scene.jsonl");
        rt.ingest_scene(scenes, &out)?;
        ingested.push(out);
    }
    if let Some(listing) = videos {
        let out = work.join("ingest-video.jsonl");
        rt.ingest_with(Stage::IngestVideo, listing, &out, pipeline::ingest_videos)?;
        ingested.push(out);
    }
    if let Some(listing) = papers {
        let out = work.join("ingest-paper.jsonl");
        rt.ingest_with(Stage::IngestPaper, listing, &out, pipeline::ingest_papers)?;
        ingested.push(out);
    }
    let augmented = work.join("augmented.jsonl");
    rt.item_stage(Stage::Augment, &ingested, &augmented, pipeline::augment)?;
    let contexts = work.join("contexts.jsonl");
    rt.item_stage(Stage::GenContext, &[augmented], &contexts, pipeline::gen_context)?;
    let qa = work.join("qa.jsonl");
    rt.item_stage(Stage::GenQa, &[contexts], &qa, pipeline::gen_qa)?;
    let filtered = work.join("filtered.jsonl");
    rt.item_stage(Stage::Filter, &[qa], &filtered, pipeline::filter)?;
    let dataset_dir = work.join("dataset");
    rt.package(std::slice::from_ref(&filtered), &dataset_dir)?;
    rt.audit_export(&[filtered], &work.join("audit.jsonl"))?;
    let files = PackageFiles::in_dir(&dataset_dir);
    stats(&files.dataset, Some(&dataset_dir.join("stats.json")))?;
    println!("{}", json!({"dataset": files.dataset, "sha256": pipeline::file_sha256(&files.dataset)?}));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::from_json_file(path)?,
        None => PipelineConfig::default(),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency)
        .build_global()
        .context("starting worker pool")?;
    let mut rt = Runtime {
        config,
        force: cli.force,
        log_exchanges: cli.log_exchanges,
        record_embeddings: cli.record_embeddings,
        gateway: None,
    };
    match cli.command {
        Command::IngestScene { scenes, out } => rt.ingest_scene(&scenes, &out).map(drop),
        Command::IngestVideo { videos, out } => rt.ingest_with(Stage::IngestVideo, &videos, &out, pipeline::ingest_videos).map(drop),
        Command::IngestPaper { papers, out } => rt.ingest_with(Stage::IngestPaper, &papers, &out, pipeline::ingest_papers).map(drop),
        Command::Augment(io) => rt.item_stage(Stage::Augment, &io.inputs, &io.out, pipeline::augment).map(drop),
        Command::GenContext(io) => rt.item_stage(Stage::GenContext, &io.inputs, &io.out, pipeline::gen_context).map(drop),
        Command::GenQa(io) => rt.item_stage(Stage::GenQa, &io.inputs, &io.out, pipeline::gen_qa).map(drop),
        Command::Filter(io) => rt.item_stage(Stage::Filter, &io.inputs, &io.out, pipeline::filter).map(drop),
        Command::Package { inputs, out_dir } => rt.package(&inputs, &out_dir).map(drop),
        Command::Stats { dataset, json } => stats(&dataset, json.as_deref()),
        Command::Eval { test, predictions, mode, out } => eval(&test, &predictions, mode.into(), out.as_deref()),
        Command::AuditExport(io) => rt.audit_export(&io.inputs, &io.out).map(drop),
        Command::RunAll { scenes, videos, papers, work_dir } => {
            run_all(&mut rt, &scenes, videos.as_deref(), papers.as_deref(), &work_dir)
        }
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&PipelineConfig::default())?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<PipelineError>().map_or(1, PipelineError::exit_code);
            let kind = if code == 2 { "provider_failure" } else { "user_error" };
            eprintln!("error: {e:#}");
            eprintln!("{}", json!({"status": "error", "kind": kind, "exit_code": code, "message": format!("{e:#}")}));
            ExitCode::from(code as u8)
        }
    }
}
