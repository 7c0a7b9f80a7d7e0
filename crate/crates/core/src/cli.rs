//! Command-line front end: one subcommand per pipeline stage, configured by
//! a flat TOML file with flag overrides.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
//! failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{ingest_corpus, PassageStore, DEFAULT_CHUNK_SIZE};
use crate::decode::{decode, BeamConfig, DecodeStrategy};
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ndocs_sweep, EvalConfig, Metric};
use crate::generator::GeneratorConfig;
use crate::index::{HnswParams, IndexHandle, SearchMode, PASSAGES_FILE};
use crate::model::{ModelConfig, RagModel, RetrieverRef};
use crate::rag::{token_doc_posterior, RagMode};
use crate::retriever::{Bm25Index, Bm25Params};
use crate::synthetic::Recipe;
use crate::train::{collapse_diagnostics, read_examples, train, Example, RetrieverKind, TrainConfig};
use crate::vocab::Vocabulary;

/// Resolved settings echoed into every output directory.
pub const RUN_CONFIG_FILE: &str = "run_config.toml";
/// Pointer file inside a model directory naming its active index.
pub const ACTIVE_INDEX_FILE: &str = "active_index";
/// Model written by `build-index` next to the index it embedded.
pub const INDEX_MODEL_DIR: &str = "model";

/// Every setting of every stage, each with a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub chunk_size: usize,

    pub hnsw_m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub hnsw_seed: u64,
    pub search: SearchMode,

    pub model_seed: u64,
    pub encoder_dim: usize,
    pub encoder_kind: EncoderKind,
    pub tie_query_init: bool,
    pub gen_dim: usize,
    pub gen_heads: usize,
    pub gen_enc_layers: usize,
    pub gen_dec_layers: usize,
    pub gen_ff_dim: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,

    pub mode: RagMode,
    pub k: usize,
    pub retriever: RetrieverKind,
    pub freeze_retriever: bool,
    pub retriever_warmup_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub train_seed: u64,
    pub clip_norm: f64,
    pub checkpoint_every: Option<usize>,
    pub single_threaded: bool,
    pub collapse_threshold: f64,
    pub collapse_window: usize,

    pub decode: DecodeStrategy,
    pub beam: usize,
    pub max_len: usize,
    pub length_penalty: f64,
    pub n_docs: usize,
    pub metrics: String,
    pub ks: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hnsw = HnswParams::default();
        let enc = EncoderConfig::default();
        let gen = GeneratorConfig::default();
        let tr = TrainConfig::default();
        let beam = BeamConfig::default();
        RunConfig {
            chunk_size: DEFAULT_CHUNK_SIZE,
            hnsw_m: hnsw.m,
            ef_construction: hnsw.ef_construction,
            ef_search: hnsw.ef_search,
            hnsw_seed: hnsw.seed,
            search: SearchMode::Exact,
            model_seed: 0,
            encoder_dim: enc.dim,
            encoder_kind: enc.kind,
            tie_query_init: true,
            gen_dim: gen.dim,
            gen_heads: gen.heads,
            gen_enc_layers: gen.enc_layers,
            gen_dec_layers: gen.dec_layers,
            gen_ff_dim: gen.ff_dim,
            max_source_len: gen.max_source_len,
            max_target_len: gen.max_target_len,
            mode: tr.mode,
            k: tr.k,
            retriever: tr.retriever,
            freeze_retriever: tr.freeze_retriever,
            retriever_warmup_steps: tr.retriever_warmup_steps,
            lr: tr.lr,
            batch_size: tr.batch_size,
            epochs: tr.epochs,
            max_steps: tr.max_steps,
            train_seed: tr.seed,
            clip_norm: tr.clip_norm,
            checkpoint_every: tr.checkpoint_every,
            single_threaded: tr.single_threaded,
            collapse_threshold: 0.95,
            collapse_window: 50,
            // Short answers: greedy per-document search, Thorough rescoring.
            decode: DecodeStrategy::Thorough,
            beam: 1,
            max_len: beam.max_len,
            length_penalty: beam.length_penalty,
            n_docs: 5,
            metrics: "em,recall".into(),
            ks: vec![1, 3, 5, 10],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the resolved config into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_CONFIG_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }

    /// Defaults overridden by a task recipe.
    pub fn from_recipe(r: &Recipe) -> Self {
        let (m, t, e) = (&r.model, &r.train, &r.eval);
        RunConfig {
            model_seed: m.seed,
            encoder_dim: m.encoder.dim,
            encoder_kind: m.encoder.kind,
            tie_query_init: m.tie_query_init,
            gen_dim: m.generator.dim,
            gen_heads: m.generator.heads,
            gen_enc_layers: m.generator.enc_layers,
            gen_dec_layers: m.generator.dec_layers,
            gen_ff_dim: m.generator.ff_dim,
            max_source_len: m.generator.max_source_len,
            max_target_len: m.generator.max_target_len,
            mode: t.mode,
            k: t.k,
            retriever: t.retriever,
            freeze_retriever: t.freeze_retriever,
            retriever_warmup_steps: t.retriever_warmup_steps,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            max_steps: t.max_steps,
            train_seed: t.seed,
            clip_norm: t.clip_norm,
            checkpoint_every: t.checkpoint_every,
            single_threaded: t.single_threaded,
            search: t.search,
            decode: e.strategy,
            beam: e.beam.beam,
            max_len: e.beam.max_len,
            length_penalty: e.beam.length_penalty,
            n_docs: e.n_docs,
            metrics: e.metrics.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
            ..RunConfig::default()
        }
    }

    pub fn hnsw(&self) -> HnswParams {
        HnswParams {
            m: self.hnsw_m,
            ef_construction: self.ef_construction,
            ef_search: self.ef_search,
            level_mult: None,
            seed: self.hnsw_seed,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                dim: self.encoder_dim,
                kind: self.encoder_kind,
                ..EncoderConfig::default()
            },
            generator: GeneratorConfig {
                dim: self.gen_dim,
                heads: self.gen_heads,
                enc_layers: self.gen_enc_layers,
                dec_layers: self.gen_dec_layers,
                ff_dim: self.gen_ff_dim,
                max_source_len: self.max_source_len,
                max_target_len: self.max_target_len,
                ..GeneratorConfig::default()
            },
            seed: self.model_seed,
            tie_query_init: self.tie_query_init,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            k: self.k,
            retriever: self.retriever,
            freeze_retriever: self.freeze_retriever,
            retriever_warmup_steps: self.retriever_warmup_steps,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            max_steps: self.max_steps,
            seed: self.train_seed,
            search: self.search,
            clip_norm: self.clip_norm,
            single_threaded: self.single_threaded,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            beam: self.beam,
            max_len: self.max_len,
            length_penalty: self.length_penalty,
            trace: false,
        }
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            n_docs: self.n_docs,
            mode: self.mode,
            strategy: self.decode,
            beam: self.beam_config(),
            search: self.search,
            metrics: Metric::parse_list(&self.metrics)?,
            single_threaded: self.single_threaded,
        })
    }

    /// Rejects settings that cannot work together.
    pub fn validate(&self) -> Result<()> {
        self.hnsw().validate()?;
        self.train().validate()?;
        self.beam_config().validate()?;
        self.eval()?;
        if self.n_docs == 0 || self.chunk_size == 0 {
            return Err(Error::Config("n_docs and chunk_size must be at least 1".into()));
        }
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("ks must be positive and strictly ascending".into()));
        }
        if !(0.0..=1.0).contains(&self.collapse_threshold) || self.collapse_window == 0 {
            return Err(Error::Config(
                "collapse threshold must be in [0, 1] and window positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "ragx", version, about = "Retrieval-augmented generation at desk scale")]
pub struct Cli {
    /// TOML file of settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk a JSONL corpus of documents into a passage store.
    Ingest(IngestArgs),
    /// Embed a passage store and build its dense index.
    BuildIndex(BuildIndexArgs),
    /// Fine-tune a model against an index.
    Train(TrainArgs),
    /// Generate answers for one input or a file of inputs.
    Generate(GenerateArgs),
    /// Score a model on a labelled dataset.
    Eval(EvalArgs),
    /// Point a model at a different index.
    SwapIndex(SwapIndexArgs),
    /// Per-token document posterior for one input.
    Posterior(PosteriorArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub chunk_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    /// Directory written by `ingest`.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Embed with this model's document encoder instead of a fresh one.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Extra JSONL files whose string fields join the fresh vocabulary.
    #[arg(long)]
    pub vocab_text: Vec<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub hnsw_m: Option<usize>,
    #[arg(long)]
    pub ef_construction: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSONL of `{"input", "target"}` records.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// Starting model; defaults to the one saved with the index.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<RagMode>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub retriever: Option<RetrieverKind>,
    #[arg(long)]
    pub freeze_retriever: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub single_threaded: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Defaults to the model's active index.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub decode: Option<DecodeStrategy>,
    #[arg(long)]
    pub mode: Option<RagMode>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub n_docs: Option<usize>,
    #[arg(long, conflicts_with = "batch", required_unless_present = "batch")]
    pub input: Option<String>,
    /// Text file with one input per line.
    #[arg(long)]
    pub batch: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated: em, recall, distinctN.
    #[arg(long)]
    pub metrics: Option<String>,
    /// Comma-separated document counts for the sweep table.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long)]
    pub n_docs: Option<usize>,
    #[arg(long)]
    pub decode: Option<DecodeStrategy>,
    #[arg(long)]
    pub single_threaded: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SwapIndexArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub new_index: PathBuf,
}

#[derive(Debug, Args)]
pub struct PosteriorArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub input: String,
    /// Score this target instead of the decoded answer.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub n_docs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Diagnostics go to stderr, results to stdout.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs one command and returns its summary line.
pub fn run(cli: &Cli) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::Ingest(a) => {
            set(&mut cfg.chunk_size, a.chunk_size);
            cfg.validate()?;
            cmd_ingest(a, &cfg)
        }
        Command::BuildIndex(a) => {
            set(&mut cfg.hnsw_m, a.hnsw_m);
            set(&mut cfg.ef_construction, a.ef_construction);
            set(&mut cfg.hnsw_seed, a.seed);
            cfg.validate()?;
            cmd_build_index(a, &cfg)
        }
        Command::Train(a) => {
            set(&mut cfg.mode, a.mode);
            set(&mut cfg.k, a.k);
            set(&mut cfg.retriever, a.retriever);
            set(&mut cfg.train_seed, a.seed);
            set(&mut cfg.epochs, a.epochs);
            set(&mut cfg.lr, a.lr);
            if a.max_steps.is_some() {
                cfg.max_steps = a.max_steps;
            }
            cfg.freeze_retriever |= a.freeze_retriever;
            cfg.single_threaded |= a.single_threaded;
            cfg.validate()?;
            cmd_train(a, &cfg)
        }
        Command::Generate(a) => {
            set(&mut cfg.decode, a.decode);
            set(&mut cfg.mode, a.mode);
            set(&mut cfg.beam, a.beam);
            set(&mut cfg.n_docs, a.n_docs);
            cfg.validate()?;
            cmd_generate(a, &cfg)
        }
        Command::Eval(a) => {
            set(&mut cfg.metrics, a.metrics.clone());
            set(&mut cfg.ks, a.ks.clone());
            set(&mut cfg.n_docs, a.n_docs);
            set(&mut cfg.decode, a.decode);
            cfg.single_threaded |= a.single_threaded;
            cfg.validate()?;
            cmd_eval(a, &cfg)
        }
        Command::SwapIndex(a) => cmd_swap_index(a),
        Command::Posterior(a) => {
            set(&mut cfg.n_docs, a.n_docs);
            cfg.validate()?;
            cmd_posterior(a, &cfg)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} directory not found")),
        ))
    }
}

/// Refuses to write outputs into a directory the command reads from.
fn distinct_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let o = canon(out);
    if inputs.iter().any(|i| canon(i) == o) {
        return Err(Error::Config(format!(
            "output directory {} is also an input; choose a new one",
            out.display()
        )));
    }
    Ok(())
}

pub fn cmd_ingest(a: &IngestArgs, cfg: &RunConfig) -> Result<String> {
    let store = ingest_corpus(&a.corpus, cfg.chunk_size)?;
    if store.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    store.save(&a.out.join(PASSAGES_FILE))?;
    cfg.echo(&a.out)?;
    Ok(format!("ingested {} passages into {}", store.len(), a.out.display()))
}

/// Every string value in each JSONL record of `path`.
fn jsonl_strings(path: &Path) -> Result<Vec<String>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        collect_strings(&v, &mut out);
    }
    Ok(out)
}

fn collect_strings(v: &serde_json::Value, out: &mut Vec<String>) {
    match v {
        serde_json::Value::String(s) => out.push(s.clone()),
        serde_json::Value::Array(xs) => xs.iter().for_each(|x| collect_strings(x, out)),
        serde_json::Value::Object(m) => m.values().for_each(|x| collect_strings(x, out)),
        _ => {}
    }
}

pub fn cmd_build_index(a: &BuildIndexArgs, cfg: &RunConfig) -> Result<String> {
    require_dir(&a.store, "store")?;
    let mut inputs = vec![a.store.as_path()];
    if let Some(m) = &a.model {
        inputs.push(m);
    }
    distinct_output(&a.out, &inputs)?;
    let store = PassageStore::load(&a.store.join(PASSAGES_FILE))?;
    let model = match &a.model {
        Some(dir) => RagModel::load(dir)?,
        None => {
            let mut texts: Vec<String> = store.iter().flat_map(|p| [p.title.clone(), p.text.clone()]).collect();
            for path in &a.vocab_text {
                texts.extend(jsonl_strings(path)?);
            }
            let vocab = Vocabulary::build(texts.iter().map(String::as_str), 1)?;
            RagModel::init(vocab, cfg.model())?
        }
    };
    let label = a.label.clone().unwrap_or_else(|| {
        a.store
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let handle = model.build_index(store, cfg.hnsw(), &label)?;
    handle.save(&a.out)?;
    if a.model.is_none() {
        model.save(&a.out.join(INDEX_MODEL_DIR))?;
    }
    cfg.echo(&a.out)?;
    Ok(format!(
        "indexed {} passages (dim {}) into {}",
        handle.len(),
        handle.dim(),
        a.out.display()
    ))
}

pub fn cmd_train(a: &TrainArgs, cfg: &RunConfig) -> Result<String> {
    require_dir(&a.index, "index")?;
    let model_dir = a.model.clone().unwrap_or_else(|| a.index.join(INDEX_MODEL_DIR));
    distinct_output(&a.out, &[&a.index, &model_dir])?;
    let mut model = RagModel::load(&model_dir)?;
    let handle = IndexHandle::load(&a.index)?;
    let data = read_examples(&a.data)?;
    let tcfg = cfg.train();
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    cfg.echo(&a.out)?;
    let bm25;
    let retriever = match tcfg.retriever {
        RetrieverKind::Dense => RetrieverRef::Dense {
            handle: &handle,
            mode: cfg.search,
        },
        RetrieverKind::Bm25 => {
            bm25 = Bm25Index::build(handle.store(), &model.vocab, Bm25Params::default());
            RetrieverRef::Bm25 {
                index: &bm25,
                store: handle.store(),
            }
        }
    };
    let log = train(&mut model, &data, retriever, &tcfg, Some(&a.out))?;
    let window = cfg.collapse_window.min(log.steps.len());
    let collapse = collapse_diagnostics(&log, window, cfg.collapse_threshold)?;
    let path = a.out.join("collapse.json");
    let json = serde_json::to_string_pretty(&collapse).expect("report serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    if collapse.collapsed {
        log::warn!(
            "retrieval collapsed: {:.0}% of recent queries share top passage {}",
            100.0 * collapse.concentration,
            collapse.modal_passage
        );
    }
    let last = log.steps.last().map(|s| s.loss).unwrap_or(f64::NAN);
    Ok(format!(
        "trained {} steps, final batch loss {last:.4}, model in {}",
        log.steps.len(),
        a.out.join("model").display()
    ))
}

/// The explicit index, else the model's active-index pointer.
fn resolve_index(model_dir: &Path, index: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(i) = index {
        return Ok(i.clone());
    }
    let pointer = model_dir.join(ACTIVE_INDEX_FILE);
    match fs::read_to_string(&pointer) {
        Ok(s) => Ok(PathBuf::from(s.trim())),
        Err(_) => Err(Error::Config(format!(
            "no --index given and {} has no active index",
            model_dir.display()
        ))),
    }
}

fn load_pair(model_dir: &Path, index: &Option<PathBuf>) -> Result<(RagModel, IndexHandle)> {
    let model = RagModel::load(model_dir)?;
    let handle = IndexHandle::load(&resolve_index(model_dir, index)?)?;
    if handle.dim() != model.config.encoder.dim {
        return Err(Error::DimensionMismatch {
            expected: model.config.encoder.dim,
            actual: handle.dim(),
        });
    }
    Ok((model, handle))
}

#[derive(Debug, Serialize)]
struct Prediction<'a> {
    input: &'a str,
    prediction: String,
    score: f64,
    retrieved: Vec<usize>,
}

pub fn cmd_generate(a: &GenerateArgs, cfg: &RunConfig) -> Result<String> {
    let (model, handle) = load_pair(&a.model, &a.index)?;
    let inputs: Vec<String> = match (&a.input, &a.batch) {
        (Some(s), _) => vec![s.clone()],
        (None, Some(p)) => fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect(),
        (None, None) => return Err(Error::Config("give --input or --batch".into())),
    };
    let retriever = RetrieverRef::Dense {
        handle: &handle,
        mode: cfg.search,
    };
    let beam = cfg.beam_config();
    let mut preds = Vec::with_capacity(inputs.len());
    for x in &inputs {
        let ids = model.encode_text(x);
        let set = model.retrieve(&ids, cfg.n_docs, retriever)?;
        let out = decode(&model.generator(), &ids, &set, cfg.decode, cfg.mode, &beam)?;
        let (prediction, score) = out
            .best()
            .map(|h| (model.vocab.decode(&h.tokens), h.score))
            .unwrap_or((String::new(), f64::NEG_INFINITY));
        preds.push(Prediction {
            input: x,
            prediction,
            score,
            retrieved: set.passage_ids(),
        });
    }
    if let Some(out) = &a.out {
        cfg.echo(out)?;
        crate::corpus::write_jsonl(&out.join("predictions.jsonl"), &preds)?;
    }
    Ok(preds
        .iter()
        .map(|p| p.prediction.as_str())
        .collect::<Vec<_>>()
        .join("\n"))
}

pub fn cmd_eval(a: &EvalArgs, cfg: &RunConfig) -> Result<String> {
    let (model, handle) = load_pair(&a.model, &a.index)?;
    distinct_output(&a.out, &[&a.model, resolve_index(&a.model, &a.index)?.as_path()])?;
    let data: Vec<Example> = read_examples(&a.data)?;
    let ecfg = cfg.eval()?;
    let retriever = RetrieverRef::Dense {
        handle: &handle,
        mode: cfg.search,
    };
    let task = a
        .data
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let report = evaluate(&model, retriever, &data, &ecfg, &task)?;
    report.write(&a.out)?;
    let sweep = ndocs_sweep(&model, retriever, &data, &cfg.ks, &ecfg)?;
    let path = a.out.join("sweep.tsv");
    fs::write(&path, sweep.to_tsv()).map_err(|e| Error::io(&path, e))?;
    cfg.echo(&a.out)?;
    let metrics: Vec<String> = report.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    Ok(format!("{} examples: {}", report.records.len(), metrics.join(" ")))
}

/// Validates the new index against the model, then replaces the pointer
/// file by rename so readers see either the old or the new path.
pub fn cmd_swap_index(a: &SwapIndexArgs) -> Result<String> {
    let model = RagModel::load(&a.model)?;
    let handle = IndexHandle::load(&a.new_index)?;
    if handle.dim() != model.config.encoder.dim {
        return Err(Error::DimensionMismatch {
            expected: model.config.encoder.dim,
            actual: handle.dim(),
        });
    }
    let target = fs::canonicalize(&a.new_index).map_err(|e| Error::io(&a.new_index, e))?;
    let pointer = a.model.join(ACTIVE_INDEX_FILE);
    let tmp = a.model.join(format!("{ACTIVE_INDEX_FILE}.tmp"));
    fs::write(&tmp, format!("{}\n", target.display())).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &pointer).map_err(|e| Error::io(&pointer, e))?;
    Ok(format!(
        "active index is now {} ('{}', {} passages)",
        target.display(),
        handle.meta().corpus_label,
        handle.len()
    ))
}

pub fn cmd_posterior(a: &PosteriorArgs, cfg: &RunConfig) -> Result<String> {
    let (model, handle) = load_pair(&a.model, &a.index)?;
    let ids = model.encode_text(&a.input);
    let retriever = RetrieverRef::Dense {
        handle: &handle,
        mode: cfg.search,
    };
    let set = model.retrieve(&ids, cfg.n_docs, retriever)?;
    let gen = model.generator();
    let y = match &a.target {
        Some(t) => model.vocab.encode_target(t),
        None => decode(&gen, &ids, &set, cfg.decode, cfg.mode, &cfg.beam_config())?
            .best()
            .map(|h| h.tokens.clone())
            .ok_or(Error::EmptyInput("decoded answer"))?,
    };
    let post = token_doc_posterior(&gen, &ids, &y, &set)?;
    let tsv = post.to_tsv(Some(&model.vocab));
    if let Some(out) = &a.out {
        cfg.echo(out)?;
        post.write_tsv(&out.join("posterior.tsv"), Some(&model.vocab))?;
    }
    Ok(tsv.trim_end().to_string())
}
