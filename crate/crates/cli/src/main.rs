//! Command-line workflows: dataset generation, training, evaluation, state
//! caching, souping, querying, and the latency benchmark.
//!
//! Exit codes: 0 ok, 2 usage, 3 data error, 4 incompatible state/fingerprint,
//! 5 internal.

mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use statesoup_core::data::vocab::DOC_SEP_ID;
use statesoup_core::data::{gen_multihop, gen_niah, gen_singlehop, read_jsonl, write_jsonl, Vocab};
use statesoup_core::error::Error as CoreError;
use statesoup_core::eval::{
    evaluate, generate, reports_to_csv, DecodeConfig, EvalMode, EvalOptions,
};
use statesoup_core::model::{load_checkpoint, Model, ModelConfig};
use statesoup_core::soup::SoupConfig;
use statesoup_core::store::{bench_latency, latency_csv, load_state, StateCacheRecord, StateStore};
use statesoup_core::train::{train, TrainConfig, TrainSink};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "statesoup", version, about = "State souping for a small selective state-space model: encode documents once, pool their recurrent states, decode answers from the pooled state.")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic task dataset (JSONL)
    GenData(GenDataArgs),
    /// Finetune a model on a dataset
    Train(TrainArgs),
    /// Score a checkpoint on a dataset, one CSV row per test-segment count
    Eval(EvalArgs),
    /// Encode one document file into a cached .state record
    Encode(EncodeArgs),
    /// Pool cached document states into one .state file
    Soup(SoupArgs),
    /// Answer a question from a .state file
    Ask(AskArgs),
    /// Compare joint-pass latency against cached-state latency
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskKind {
    Niah,
    Multihop,
    Singlehop,
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    /// Which synthetic task family to generate
    #[arg(long, value_enum)]
    task: TaskKind,
    /// Output JSONL path
    #[arg(long)]
    out: PathBuf,
    /// Base seed; example i uses seed + i
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of examples
    #[arg(long, default_value_t = 1000)]
    examples: usize,
    /// niah: key-value pairs per example
    #[arg(long, default_value_t = 32)]
    pairs: usize,
    /// niah: documents per example
    #[arg(long, default_value_t = 4)]
    segments: usize,
    /// multihop/singlehop: distractor documents per example
    #[arg(long, default_value_t = 3)]
    distractors: usize,
}

impl Serialize for TaskKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match self {
            TaskKind::Niah => "niah",
            TaskKind::Multihop => "multihop",
            TaskKind::Singlehop => "singlehop",
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with {"model": {...}, "train": {...}}
    #[arg(long)]
    config: PathBuf,
    /// Training dataset (JSONL from gen-data)
    #[arg(long)]
    data: PathBuf,
    /// Output directory (manifest, log CSV, checkpoints)
    #[arg(long)]
    out: PathBuf,
    /// Also save a checkpoint every N optimizer steps (0 = final only)
    #[arg(long, default_value_t = 0)]
    ckpt_every: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Soup,
    Concat,
}

#[derive(Args)]
struct DecodeArgs {
    /// Sample instead of greedy argmax decoding
    #[arg(long)]
    sample: bool,
    /// Sampling temperature
    #[arg(long, default_value_t = 0.3)]
    temperature: f64,
    /// Nucleus (top-p) cutoff
    #[arg(long, default_value_t = 0.5)]
    top_p: f64,
    /// Top-k cutoff
    #[arg(long, default_value_t = 20)]
    top_k: usize,
    /// Maximum generated tokens
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DecodeArgs {
    fn to_config(&self) -> DecodeConfig {
        DecodeConfig {
            greedy: !self.sample,
            temperature: self.temperature,
            top_p: self.top_p,
            top_k: self.top_k,
            max_len: self.max_len,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Eval dataset (JSONL)
    #[arg(long)]
    data: PathBuf,
    /// Re-split the context into these segment counts (comma separated);
    /// empty = keep documents as authored
    #[arg(long, value_delimiter = ',')]
    test_segments: Vec<usize>,
    /// Soup config JSON, e.g. {"op":"average","norm_before":false,"norm_after":false}
    #[arg(long)]
    soup: Option<String>,
    /// Context integration at eval time
    #[arg(long, value_enum, default_value_t = ModeArg::Soup)]
    mode: ModeArg,
    /// Train-segments label for the report rows
    #[arg(long, default_value_t = 0)]
    train_segments: usize,
    /// Task label for the report rows (default: data file stem)
    #[arg(long)]
    task: Option<String>,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct EncodeArgs {
    /// Model checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Plain-text document file (lexicon words, whitespace separated)
    #[arg(long)]
    doc: PathBuf,
    /// Cache root directory
    #[arg(long)]
    cache: PathBuf,
    /// Document id (default: file stem)
    #[arg(long)]
    id: Option<String>,
    /// Do not append the document separator before encoding
    #[arg(long)]
    no_doc_sep: bool,
}

#[derive(Args)]
struct SoupArgs {
    /// Cache root directory
    #[arg(long)]
    cache: PathBuf,
    /// Cached document ids to pool (comma separated)
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    /// Soup config JSON
    #[arg(long)]
    soup: Option<String>,
    /// Output .state file
    #[arg(long)]
    out: PathBuf,
    /// Pin the model cache to this checkpoint's fingerprint
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Id stored in the pooled record (default: ids joined with '+')
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args)]
struct AskArgs {
    /// Model checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Injected .state file
    #[arg(long)]
    state: PathBuf,
    /// Question text
    #[arg(long)]
    question: String,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Model checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Document lengths in tokens (comma separated)
    #[arg(long, value_delimiter = ',')]
    lengths: Vec<usize>,
    /// Timed trials per length (one extra warmup trial is discarded)
    #[arg(long, default_value_t = 5)]
    trials: usize,
    /// Query length in tokens
    #[arg(long, default_value_t = 32)]
    query_len: usize,
    /// Cache directory for the benchmark states (default: a temp dir)
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Benchmark seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: msg.into(),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::Vocab(_)
            | CoreError::InvalidExample(_)
            | CoreError::Split { .. }
            | CoreError::Format(_)
            | CoreError::Corrupt
            | CoreError::CacheMiss(_)
            | CoreError::Json(_)
            | CoreError::Io(_) => 3,
            CoreError::StaleState | CoreError::IncompatibleStates => 4,
            _ => 5,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure {
            code: 5,
            message: format!("{e:#}"),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 3,
            message: e.to_string(),
        }
    }
}

fn parse_soup(flag: &Option<String>) -> Result<SoupConfig, Failure> {
    match flag {
        None => Ok(SoupConfig::default()),
        Some(s) => serde_json::from_str(s)
            .map_err(|e| Failure::usage(format!("bad --soup JSON: {e}"))),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainFileConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Encode(args) => cmd_encode(args),
        Cmd::Soup(args) => cmd_soup(args),
        Cmd::Ask(args) => cmd_ask(args),
        Cmd::Bench(args) => cmd_bench(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), Failure> {
    let vocab = Vocab::synthetic();
    RunManifest::new("gen-data", serde_json::to_value(&args).map_err(CoreError::from)?)
        .with_seed(args.seed)
        .write_beside(&args.out)?;
    let mut examples = Vec::with_capacity(args.examples);
    for i in 0..args.examples as u64 {
        let seed = args.seed + i;
        let ex = match args.task {
            TaskKind::Niah => gen_niah(args.pairs, args.segments, seed, &vocab)?,
            TaskKind::Multihop => gen_multihop(args.distractors, seed, &vocab)?,
            TaskKind::Singlehop => gen_singlehop(args.distractors, seed, &vocab)?,
        };
        examples.push(ex);
    }
    write_jsonl(&args.out, &examples)?;
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let raw = std::fs::read_to_string(&args.config)?;
    let file_cfg: TrainFileConfig = serde_json::from_str(&raw)
        .map_err(|e| Failure::usage(format!("bad train config {}: {e}", args.config.display())))?;
    file_cfg.model.validate()?;
    file_cfg.train.validate()?;
    let data = read_jsonl(&args.data)?;
    let vocab = Vocab::synthetic();
    if file_cfg.model.vocab_size != vocab.size() {
        return Err(Failure::usage(format!(
            "model vocab_size {} must match the lexicon size {}",
            file_cfg.model.vocab_size,
            vocab.size()
        )));
    }

    let mut model = Model::<f32>::init(file_cfg.model.clone())?;
    RunManifest::new("train", serde_json::to_value(&file_cfg).map_err(CoreError::from)?)
        .with_seed(file_cfg.train.seed)
        .with_fingerprint(&model.fingerprint())
        .with_data_file(&args.data)?
        .write_into_dir(&args.out)?;

    let sink = TrainSink {
        log_csv: Some(args.out.join("train_log.csv")),
        ckpt_dir: Some(args.out.clone()),
        ckpt_every: args.ckpt_every,
    };
    train(&mut model, &data, &file_cfg.train, &vocab, Some(&sink))?;
    println!("{}", args.out.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let model = load_checkpoint(&args.ckpt)?;
    let data = read_jsonl(&args.data)?;
    let vocab = Vocab::synthetic();
    let soup = parse_soup(&args.soup)?;
    let task = args.task.clone().unwrap_or_else(|| {
        args.data
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "task".into())
    });
    let cells: Vec<Option<usize>> = if args.test_segments.is_empty() {
        vec![None]
    } else {
        args.test_segments.iter().map(|&n| Some(n)).collect()
    };
    let mut reports = Vec::new();
    for ts in cells {
        let opts = EvalOptions {
            mode: match args.mode {
                ModeArg::Soup => EvalMode::Soup(soup),
                ModeArg::Concat => EvalMode::Concat,
            },
            test_segments: ts,
            decode: args.decode.to_config(),
        };
        reports.push(evaluate(&model, &data, &vocab, &opts, &task, args.train_segments)?);
    }
    let csv = reports_to_csv(&reports);
    match &args.out {
        Some(path) => {
            RunManifest::new("eval", serde_json::json!({"ckpt": args.ckpt, "data": args.data}))
                .with_fingerprint(&model.fingerprint())
                .with_data_file(&args.data)?
                .write_beside(path)?;
            std::fs::write(path, csv)?;
            println!("{}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_encode(args: EncodeArgs) -> Result<(), Failure> {
    let model = load_checkpoint(&args.ckpt)?;
    let vocab = Vocab::synthetic();
    let text = std::fs::read_to_string(&args.doc)?;
    let mut tokens = vocab.tokenize(&text)?;
    if tokens.is_empty() {
        return Err(CoreError::InvalidExample(format!("{} is empty", args.doc.display())).into());
    }
    if !args.no_doc_sep {
        tokens.push(DOC_SEP_ID);
    }
    let id = args.id.clone().unwrap_or_else(|| {
        args.doc
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "doc".into())
    });
    let state = model.encode(&tokens, None)?;
    let store = StateStore::new(&args.cache);
    let path = store.save(&StateCacheRecord::from_state(id, &state))?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_soup(args: SoupArgs) -> Result<(), Failure> {
    if args.ids.is_empty() {
        return Err(Failure::usage("--ids must name at least one cached document"));
    }
    let soup = parse_soup(&args.soup)?;
    let store = StateStore::new(&args.cache);
    let fingerprint = match &args.ckpt {
        Some(p) => load_checkpoint(p)?.fingerprint(),
        None => store.resolve_fingerprint(&args.ids)?,
    };
    RunManifest::new("soup", serde_json::json!({"ids": args.ids, "soup": soup}))
        .with_fingerprint(&fingerprint)
        .write_beside(&args.out)?;
    let pooled = store.compose(&args.ids, &soup, &fingerprint)?;
    let id = args.id.clone().unwrap_or_else(|| args.ids.join("+"));
    statesoup_core::store::save_state(&StateCacheRecord::from_state(id, &pooled), &args.out)?;
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_ask(args: AskArgs) -> Result<(), Failure> {
    let model = load_checkpoint(&args.ckpt)?;
    let vocab = Vocab::synthetic();
    let record = load_state(&args.state)?;
    if record.model_fingerprint != model.fingerprint() {
        return Err(CoreError::StaleState.into());
    }
    let question = vocab.tokenize(&args.question)?;
    if question.is_empty() {
        return Err(Failure::usage("--question must be nonempty"));
    }
    let out = generate(&model, &record.to_state(), &question, &args.decode.to_config(), &vocab)?;
    if out.truncated {
        eprintln!("note: hit --max-len before <eos>");
    }
    println!("{}", out.text);
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    if args.lengths.is_empty() {
        return Err(Failure::usage("--lengths must name at least one doc length"));
    }
    let model = load_checkpoint(&args.ckpt)?;
    let (cache, ephemeral) = match &args.cache {
        Some(dir) => (dir.clone(), false),
        None => (
            std::env::temp_dir().join(format!("statesoup-bench-{}", std::process::id())),
            true,
        ),
    };
    let rows = bench_latency(&model, &args.lengths, args.trials, args.query_len, &cache, args.seed)?;
    if ephemeral {
        let _ = std::fs::remove_dir_all(&cache);
    }
    let csv = latency_csv(&rows);
    match &args.out {
        Some(path) => {
            RunManifest::new(
                "bench",
                serde_json::json!({"lengths": args.lengths, "trials": args.trials, "query_len": args.query_len}),
            )
            .with_seed(args.seed)
            .with_fingerprint(&model.fingerprint())
            .write_beside(path)?;
            std::fs::write(path, csv)?;
            println!("{}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
