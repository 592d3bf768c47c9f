//! Command-line front end: rationale generation, synthetic corpora,
//! model training, evaluation, report rendering, and grid search.
//!
//! Every subcommand writes its artifacts under `--out` with fixed names,
//! so a run directory is self-describing. Existing outputs are never
//! clobbered without `--force`.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use medvqa_core::{
    build_report, build_vocab, generate_synthetic, grid_search, load_checkpoint, load_dataset,
    make_backend, predict_examples, prepare_examples, run_pipeline, save_checkpoint, train,
    BackendConfig, FusionMode, GridConfig, ModelError, ModelParams, MoeConfig, PipelineOptions,
    Prediction, PromptTemplates, RationaleRecord, RecordStore, RoutingLog, SynthConfig,
    TrainConfig,
};

const RECORDS_FILE: &str = "records.jsonl";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const TRAIN_TRACE_FILE: &str = "train-report.json";
const REPORT_JSON_FILE: &str = "report.json";
const REPORT_TEXT_FILE: &str = "report.txt";
const PREDICTIONS_FILE: &str = "predictions.jsonl";
const ROUTING_FILE: &str = "routing.jsonl";
const GRID_CSV_FILE: &str = "grid.csv";

#[derive(Parser)]
#[command(
    name = "medvqa",
    version,
    about = "Medical VQA at desk scale: rationale pipeline, expert-routing model, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the rationale pipeline: initial, review, regenerate, caption
    Rationale(RationaleArgs),
    /// Generate the bundled synthetic corpus
    Synth(SynthArgs),
    /// Train a diagnostic model and write a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint: predictions, metrics, routing log
    Eval(EvalArgs),
    /// Rebuild a report from stored predictions and routing
    Report(ReportArgs),
    /// Sweep expert count and top-k on one dataset
    Gridsearch(GridArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum BackendArg {
    /// Replay a canned transcript (offline, deterministic)
    Mock,
    /// POST prompts to a JSON endpoint
    Http,
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    s.parse().map_err(|e: ModelError| e.to_string())
}

#[derive(Args)]
struct RationaleArgs {
    /// Dataset JSONL file
    #[arg(long)]
    dataset: PathBuf,
    /// Language model backend
    #[arg(long, value_enum, default_value_t = BackendArg::Mock)]
    backend: BackendArg,
    /// Canned-response transcript JSONL (mock backend)
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Endpoint URL (http backend)
    #[arg(long)]
    endpoint: Option<String>,
    /// Environment variable holding the API key (http backend)
    #[arg(long)]
    api_key_env: Option<String>,
    /// Request timeout in seconds (http backend)
    #[arg(long, default_value_t = 30)]
    timeout: u64,
    /// Retries per request after the first attempt (http backend)
    #[arg(long, default_value_t = 2)]
    retries: u32,
    /// Base backoff between retries, in milliseconds (http backend)
    #[arg(long, default_value_t = 50)]
    backoff_ms: u64,
    /// Prompt template TOML; defaults to the compiled-in templates
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Fail on transcript misses instead of synthesizing a reply (mock)
    #[arg(long)]
    strict: bool,
    /// Concurrent backend calls within a phase
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Extra verdict requests after an unparseable review reply
    #[arg(long, default_value_t = 2)]
    max_reasks: u32,
    /// Rerun stages whose results already exist in the store
    #[arg(long)]
    force: bool,
    /// Output directory for the record store
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the corpus
    #[arg(long)]
    out: PathBuf,
    /// Number of items
    #[arg(long, default_value_t = 512)]
    items: usize,
    /// Feature width
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Feature rows per item
    #[arg(long, default_value_t = 4)]
    patches: usize,
    /// Feature noise seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite an existing corpus
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset JSONL file
    #[arg(long)]
    dataset: PathBuf,
    /// Rationale store from `rationale`; without it contexts hold only
    /// question and options
    #[arg(long)]
    records: Option<PathBuf>,
    /// Number of experts
    #[arg(long, default_value_t = 4)]
    experts: usize,
    /// Experts kept per routed row
    #[arg(long, default_value_t = 2)]
    topk: usize,
    /// Expert hidden width
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    /// Model dimension; must match the feature width
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Fusion mode: moe | gate
    #[arg(long, default_value = "moe", value_parser = parse_fusion)]
    fusion: FusionMode,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Learning rate
    #[arg(long, default_value_t = 8e-5)]
    lr: f64,
    /// Batch size
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Shuffle and init seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for checkpoint and loss trace
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset JSONL file
    #[arg(long)]
    dataset: PathBuf,
    /// Rationale store used at training time
    #[arg(long)]
    records: Option<PathBuf>,
    /// Checkpoint written by `train`
    #[arg(long)]
    model: PathBuf,
    /// Decode cap in tokens
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    /// Output directory for report, predictions, and routing log
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Predictions JSONL written by `eval`
    #[arg(long)]
    predictions: PathBuf,
    /// Routing log JSONL written by `eval`
    #[arg(long)]
    routing: Option<PathBuf>,
    /// Optional directory to rewrite report.json and report.txt into
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GridArgs {
    /// Dataset JSONL file
    #[arg(long)]
    dataset: PathBuf,
    /// Rationale store from `rationale`
    #[arg(long)]
    records: Option<PathBuf>,
    /// Expert counts to sweep (comma-separated)
    #[arg(long, value_delimiter = ',', default_value = "2,4")]
    experts: Vec<usize>,
    /// Top-k values to sweep (comma-separated)
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    topk: Vec<usize>,
    /// Expert hidden width
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    /// Model dimension; must match the feature width
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Learning rate
    #[arg(long, default_value_t = 8e-5)]
    lr: f64,
    /// Batch size
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Shared per-cell seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Decode cap when evaluating each cell
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    /// Output directory for the CSV table
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs
    #[arg(long)]
    force: bool,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Rationale(a) => cmd_rationale(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Gridsearch(a) => cmd_grid(a),
    }
}

fn ensure_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!(
            "{} already exists; pass --force to overwrite",
            path.display()
        );
    }
    Ok(())
}

fn load_records(path: Option<&Path>) -> Result<BTreeMap<String, RationaleRecord>> {
    match path {
        Some(p) => {
            if !p.exists() {
                bail!("records file not found: {}", p.display());
            }
            Ok(RecordStore::open(p).load()?)
        }
        None => Ok(BTreeMap::new()),
    }
}

fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut s = String::new();
    for p in predictions {
        s.push_str(&serde_json::to_string(p)?);
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = fs::File::open(path).with_context(|| format!("open {}", path.display()))?;
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("read {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{} line {}", path.display(), idx + 1))?,
        );
    }
    Ok(out)
}

fn cmd_rationale(a: RationaleArgs) -> Result<()> {
    let items = load_dataset(&a.dataset)?;
    let mut cfg = match a.backend {
        BackendArg::Mock => {
            let t = a
                .transcript
                .clone()
                .context("mock backend requires --transcript")?;
            BackendConfig::mock(t)
        }
        BackendArg::Http => {
            let e = a
                .endpoint
                .clone()
                .context("http backend requires --endpoint")?;
            BackendConfig::http(e)
        }
    };
    cfg.strict = a.strict;
    cfg.timeout_secs = a.timeout;
    cfg.max_retries = a.retries;
    cfg.backoff_ms = a.backoff_ms;
    cfg.api_key_env = a.api_key_env.clone();
    let backend = make_backend(&cfg)?;
    let templates = match &a.templates {
        Some(p) => PromptTemplates::from_file(p)?,
        None => PromptTemplates::builtin(),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("create {}", a.out.display()))?;
    let store = RecordStore::open(a.out.join(RECORDS_FILE));
    let opts = PipelineOptions {
        parallelism: a.parallel,
        force: a.force,
        max_reasks: a.max_reasks,
    };
    let report = run_pipeline(&items, backend.as_ref(), &templates, &store, &opts)?;
    println!("items: {}", report.records.len());
    println!("initial rationales generated: {}", report.initial_generated);
    println!("verdicts resolved: {}", report.verdicts_resolved);
    println!("rationales regenerated: {}", report.regenerated);
    println!("captions generated: {}", report.captions_generated);
    println!("stages skipped (already stored): {}", report.skipped_stages);
    println!("record store: {}", store.path().display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    ensure_writable(&a.out.join("dataset.jsonl"), a.force)?;
    let out = generate_synthetic(
        &a.out,
        &SynthConfig {
            items: a.items,
            dim: a.dim,
            patches: a.patches,
            seed: a.seed,
        },
    )?;
    println!("dataset: {}", out.dataset.display());
    println!("transcript: {}", out.transcript.display());
    println!("features: {}", out.features_dir.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("create {}", a.out.display()))?;
    let checkpoint_path = a.out.join(CHECKPOINT_FILE);
    let trace_path = a.out.join(TRAIN_TRACE_FILE);
    ensure_writable(&checkpoint_path, a.force)?;
    ensure_writable(&trace_path, a.force)?;

    let items = load_dataset(&a.dataset)?;
    let records = load_records(a.records.as_deref())?;
    let vocab = build_vocab(&items, &records);
    let examples = prepare_examples(&items, &records, &vocab, a.dim)?;
    let moe_cfg = MoeConfig {
        num_experts: a.experts,
        top_k: a.topk,
        expert_hidden: a.hidden,
        load_balance: false,
    };
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        fusion: a.fusion,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut params = ModelParams::init(vocab.len(), a.dim, &moe_cfg, &mut rng)?;
    let report = train(&examples, &mut params, &cfg)?;

    save_checkpoint(&checkpoint_path, &params, &vocab, a.fusion)?;
    let trace = serde_json::json!({ "config": cfg, "loss_trace": report.loss_trace });
    fs::write(&trace_path, serde_json::to_string_pretty(&trace)?)
        .with_context(|| format!("write {}", trace_path.display()))?;

    println!("examples: {}  vocab: {}", examples.len(), vocab.len());
    if let (Some(first), Some(last)) = (report.loss_trace.first(), report.loss_trace.last()) {
        println!(
            "loss: {first} -> {last} over {} epochs",
            report.loss_trace.len()
        );
    }
    println!("checkpoint: {}", checkpoint_path.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("create {}", a.out.display()))?;
    for name in [
        REPORT_JSON_FILE,
        REPORT_TEXT_FILE,
        PREDICTIONS_FILE,
        ROUTING_FILE,
    ] {
        ensure_writable(&a.out.join(name), a.force)?;
    }

    let (params, vocab, fusion) = load_checkpoint(&a.model)?;
    let items = load_dataset(&a.dataset)?;
    let records = load_records(a.records.as_deref())?;
    let examples = prepare_examples(&items, &records, &vocab, params.dim)?;
    let (predictions, routing) = predict_examples(&params, fusion, &examples, &vocab, a.max_len)?;
    let report = build_report(&predictions, Some(&routing))?;

    fs::write(a.out.join(REPORT_JSON_FILE), report.to_json()?)?;
    fs::write(a.out.join(REPORT_TEXT_FILE), report.to_text())?;
    write_predictions(&a.out.join(PREDICTIONS_FILE), &predictions)?;
    if !routing.is_empty() {
        routing.write_jsonl(&a.out.join(ROUTING_FILE))?;
    }
    print!("{}", report.to_text());
    println!("outputs: {}", a.out.display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let predictions = read_predictions(&a.predictions)?;
    let routing = match &a.routing {
        Some(p) => Some(RoutingLog::read_jsonl(p)?),
        None => None,
    };
    let report = build_report(&predictions, routing.as_ref())?;
    if let Some(out) = &a.out {
        fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
        for name in [REPORT_JSON_FILE, REPORT_TEXT_FILE] {
            ensure_writable(&out.join(name), a.force)?;
        }
        fs::write(out.join(REPORT_JSON_FILE), report.to_json()?)?;
        fs::write(out.join(REPORT_TEXT_FILE), report.to_text())?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_grid(a: GridArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("create {}", a.out.display()))?;
    let csv_path = a.out.join(GRID_CSV_FILE);
    ensure_writable(&csv_path, a.force)?;

    let items = load_dataset(&a.dataset)?;
    let records = load_records(a.records.as_deref())?;
    let vocab = build_vocab(&items, &records);
    let examples = prepare_examples(&items, &records, &vocab, a.dim)?;
    let cfg = GridConfig {
        expert_counts: a.experts.clone(),
        top_ks: a.topk.clone(),
        expert_hidden: a.hidden,
        train: TrainConfig {
            learning_rate: a.lr,
            batch_size: a.batch,
            epochs: a.epochs,
            seed: a.seed,
            fusion: FusionMode::Moe,
        },
        max_len: a.max_len,
    };
    let table = grid_search(&examples, &vocab, a.dim, &cfg)?;
    fs::write(&csv_path, table.to_csv())
        .with_context(|| format!("write {}", csv_path.display()))?;
    print!("{}", table.to_text());
    println!("csv: {}", csv_path.display());
    Ok(())
}
