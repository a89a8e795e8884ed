//! Command-line front end: `train`, `calibrate`, `generate`, `audit`, `evaluate`.
//!
//! Exit codes: 0 success, 1 failed certificate, 2 usage or configuration
//! error, 3 provider error, 4 state space too large for exact enumeration.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::{AccountingReport, AdjacencyNotion, ClippingStrategy, ConversionMethod};
use crate::engine::{
    generate_corpus, partition, ClipSource, Dataset, EngineError, GenerationConfig,
    GenerationParams, GenerationRecord, JsonlRecord,
};
use crate::eval::{
    certify_batch, evaluate, write_rows_csv, Certificate, EvalError, ExactError, ALPHA_GRID,
};
use crate::provider::ngram::NGramError;
use crate::provider::{ContextLayout, LogitProvider, NGramModel, NGramProvider, RemoteProvider};
use crate::vocab::{TokenSequence, Vocabulary};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("provider error: {0}")]
    Provider(String),
    #[error("{0}")]
    StateSpace(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Usage(_) | CliError::File { .. } => 2,
            CliError::Provider(_) => 3,
            CliError::StateSpace(_) => 4,
        }
    }

    fn file(path: &Path, message: impl ToString) -> Self {
        CliError::File {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        if e.is_provider() {
            CliError::Provider(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<ExactError> for CliError {
    fn from(e: ExactError) -> Self {
        match e {
            ExactError::StateSpace { .. } => CliError::StateSpace(e.to_string()),
            ExactError::Engine(e) => e.into(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Provider(p) => CliError::Provider(p.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dpdecode",
    version,
    about = "Differentially private text decoding"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a character n-gram model and write it as JSON.
    Train(TrainArgs),
    /// Solve for the clip norm that meets a privacy target.
    Calibrate(CalibrateArgs),
    /// Generate one text per disjoint batch of references.
    Generate(GenerateArgs),
    /// Print the privacy accounting for a configuration.
    Audit(AuditArgs),
    /// Score generations against references under an evaluation model.
    Evaluate(EvaluateArgs),
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Dclip,
    NaiveClip,
}

/// Mechanism flags shared by the commands that take a configuration. Each
/// one overrides the matching `[generation]` key.
#[derive(Debug, Clone, Default, Args)]
pub struct MechanismFlags {
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Sequence-level zCDP target.
    #[arg(long)]
    pub rho: Option<f64>,
    /// References per batch.
    #[arg(long = "B")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Token budget per generation.
    #[arg(long = "T")]
    pub max_tokens: Option<usize>,
    /// Clip norm; bypasses calibration.
    #[arg(long = "C")]
    pub clip_norm: Option<f64>,
    /// replace_by_null | zero_out
    #[arg(long, value_parser = parse_enum::<AdjacencyNotion>)]
    pub adjacency: Option<AdjacencyNotion>,
    /// dclip | naive_clip
    #[arg(long, value_parser = parse_enum::<StrategyName>)]
    pub strategy: Option<StrategyName>,
    /// Naive clipping only: account with C/B under replace-by-null.
    #[arg(long)]
    pub sensitivity_advantage: bool,
    /// tight | loose
    #[arg(long, value_parser = parse_enum::<ConversionMethod>)]
    pub method: Option<ConversionMethod>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Text file, one document per line.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub order: usize,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse the vocabulary of an existing model or vocabulary file.
    #[arg(long)]
    pub vocab_from: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: MechanismFlags,
}

/// Inputs that locate the provider and data, overriding the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct DataFlags {
    /// N-gram model file; replaces the `[provider]` section.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Reference file, one reference per line.
    #[arg(long)]
    pub references: Option<PathBuf>,
    #[arg(long)]
    pub query: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: MechanismFlags,
    #[command(flatten)]
    pub data: DataFlags,
    /// JSONL output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accounting sidecar path; defaults to the output path plus `.accounting.json`.
    #[arg(long)]
    pub accounting: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Keep per-step effective-k traces in the output.
    #[arg(long)]
    pub trace: bool,
    /// Validate inputs and print the provider request bound without generating.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: MechanismFlags,
    #[command(flatten)]
    pub data: DataFlags,
    /// Number of generations; defaults to the batch count of the data, or 1.
    #[arg(long)]
    pub generations: Option<usize>,
    /// Enumerate the exact output law of the first batch and check it against
    /// every neighbouring batch.
    #[arg(long)]
    pub certify: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// JSONL written by `generate`.
    #[arg(long)]
    pub generations: PathBuf,
    /// Reference file, one reference per line.
    #[arg(long)]
    pub references: PathBuf,
    /// N-gram model used for scoring; should not be the generation model.
    #[arg(long)]
    pub eval_model: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-generation rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// `[generation]` table. Every key is optional in the file; see
/// [`RunConfig::resolve`] for defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<ConversionMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensitivity_advantage: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<AdjacencyNotion>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Ngram {
        path: PathBuf,
        #[serde(default)]
        reference_first: bool,
        /// Token placed after a non-empty reference.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        separator: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference_weight: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_context: Option<usize>,
    },
    Remote {
        url: String,
        /// Vocabulary JSON or n-gram model file holding the shared vocabulary.
        vocabulary: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_context: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        retries: Option<u32>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub references: PathBuf,
    /// Public prompt shared by every batch.
    #[serde(default)]
    pub query: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub generations: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accounting: Option<PathBuf>,
}

/// Reproducible run description, stored as TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<ProviderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSection>,
}

fn rebase(dir: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = dir.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| CliError::file(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        match &mut cfg.provider {
            Some(ProviderConfig::Ngram { path, .. }) => rebase(dir, path),
            Some(ProviderConfig::Remote { vocabulary, .. }) => rebase(dir, vocabulary),
            None => {}
        }
        if let Some(d) = &mut cfg.data {
            rebase(dir, &mut d.references);
        }
        if let Some(o) = &mut cfg.output {
            rebase(dir, &mut o.generations);
            if let Some(a) = &mut o.accounting {
                rebase(dir, a);
            }
        }
        Ok(cfg)
    }

    fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map(Self::load)
            .transpose()
            .map(Option::unwrap_or_default)
    }

    pub fn apply_flags(&mut self, f: &MechanismFlags) {
        let g = &mut self.generation;
        if f.clip_norm.is_some() || f.rho.is_some() || f.epsilon.is_some() {
            g.clip_norm = f.clip_norm;
            g.rho = f.rho;
            g.epsilon = f.epsilon;
        }
        macro_rules! set {
            ($($dst:ident <- $src:expr),*) => {$( if let Some(v) = $src { g.$dst = Some(v); } )*};
        }
        set!(delta <- f.delta, batch_size <- f.batch_size, temperature <- f.tau, top_k <- f.k,
             max_tokens <- f.max_tokens, adjacency <- f.adjacency, strategy <- f.strategy,
             method <- f.method, seed <- f.seed);
        if f.sensitivity_advantage {
            g.sensitivity_advantage = Some(true);
        }
    }

    pub fn apply_data_flags(&mut self, f: &DataFlags) {
        if let Some(path) = &f.model {
            self.provider = Some(ProviderConfig::Ngram {
                path: path.clone(),
                reference_first: false,
                separator: None,
                reference_weight: None,
                max_context: None,
            });
        }
        if let Some(r) = &f.references {
            let query = self
                .data
                .as_ref()
                .map(|d| d.query.clone())
                .unwrap_or_default();
            self.data = Some(DataSection {
                references: r.clone(),
                query,
            });
        }
        if let (Some(q), Some(d)) = (&f.query, &mut self.data) {
            d.query = q.clone();
        }
    }

    /// Fills defaults and checks that exactly one clip source is given.
    pub fn resolve(&mut self) -> Result<GenerationParams, CliError> {
        let g = &mut self.generation;
        let need = |v: Option<usize>, what: &str| {
            v.ok_or_else(|| CliError::Usage(format!("missing {what}")))
        };
        let batch_size = need(g.batch_size, "batch size (--B or generation.batch_size)")?;
        let max_tokens = need(g.max_tokens, "token budget (--T or generation.max_tokens)")?;
        let temperature = *g.temperature.get_or_insert(1.0);
        let top_k = *g.top_k.get_or_insert(10);
        let method = *g.method.get_or_insert(ConversionMethod::Tight);
        let adjacency = *g.adjacency.get_or_insert(AdjacencyNotion::ReplaceByNull);
        let seed = *g.seed.get_or_insert(0);
        let trace = *g.trace.get_or_insert(false);
        let strategy = match *g.strategy.get_or_insert(StrategyName::Dclip) {
            StrategyName::Dclip => {
                if g.sensitivity_advantage == Some(true) {
                    return Err(CliError::Usage(
                        "sensitivity_advantage only applies to naive_clip".into(),
                    ));
                }
                ClippingStrategy::Dclip
            }
            StrategyName::NaiveClip => ClippingStrategy::NaiveClip {
                sensitivity_advantage: *g.sensitivity_advantage.get_or_insert(false),
            },
        };
        let clip = match (g.clip_norm, g.rho, g.epsilon) {
            (Some(c), None, None) => ClipSource::Fixed(c),
            (None, Some(rho), None) => ClipSource::TargetRho(rho),
            (None, None, Some(epsilon)) => {
                let delta = g.delta.ok_or_else(|| {
                    CliError::Usage("an epsilon target needs delta (--delta)".into())
                })?;
                ClipSource::TargetEpsilon {
                    epsilon,
                    delta,
                    method,
                }
            }
            (None, None, None) => {
                return Err(CliError::Usage(
                    "give exactly one of --C, --rho or --epsilon".into(),
                ))
            }
            _ => {
                return Err(CliError::Usage(
                    "--C, --rho and --epsilon are mutually exclusive".into(),
                ))
            }
        };
        Ok(
            GenerationParams::new(batch_size, temperature, top_k, max_tokens, clip)
                .with_strategy(strategy)
                .with_adjacency(adjacency)
                .with_seed(seed)
                .with_trace(trace),
        )
    }

    /// Report for `generations` texts, with ε filled in whenever δ is known.
    fn report(
        &self,
        config: &GenerationConfig,
        generations: usize,
    ) -> Result<AccountingReport, CliError> {
        let mut report = config
            .report(generations)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if report.epsilon.is_none() {
            if let Some(delta) = self.generation.delta {
                let method = self.generation.method.unwrap_or(ConversionMethod::Tight);
                report = report
                    .with_epsilon_at(delta, method)
                    .map_err(|e| CliError::Usage(e.to_string()))?;
            }
        }
        Ok(report)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::file(path, e))
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

/// Loads a vocabulary from either a vocabulary JSON or an n-gram model file.
pub fn load_vocabulary(path: &Path) -> Result<Vocabulary, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
    if let Ok(v) = serde_json::from_str::<Vocabulary>(&text) {
        return Ok(v);
    }
    NGramModel::from_json(&text)
        .map(|m| m.vocabulary().clone())
        .map_err(|e| CliError::file(path, format!("neither a vocabulary nor a model file: {e}")))
}

fn load_model(path: &Path) -> Result<NGramModel, CliError> {
    NGramModel::load(path).map_err(|e| CliError::file(path, e))
}

pub fn build_provider(provider: &ProviderConfig) -> Result<Box<dyn LogitProvider>, CliError> {
    match provider {
        ProviderConfig::Ngram {
            path,
            reference_first,
            separator,
            reference_weight,
            max_context,
        } => {
            let model = load_model(path)?;
            let separator = separator
                .as_deref()
                .map(|s| {
                    model.vocabulary().id(s).ok_or_else(|| {
                        CliError::Usage(format!("separator {s:?} is not in the model vocabulary"))
                    })
                })
                .transpose()?;
            let mut p = NGramProvider::new(model).with_layout(ContextLayout {
                reference_first: *reference_first,
                separator,
            });
            if let Some(w) = reference_weight {
                p = p.with_reference_weight(*w);
            }
            if let Some(m) = max_context {
                p = p.with_max_context(*m);
            }
            Ok(Box::new(p))
        }
        ProviderConfig::Remote {
            url,
            vocabulary,
            max_context,
            retries,
        } => {
            let mut p = RemoteProvider::new(url, load_vocabulary(vocabulary)?).with_env_token();
            if let Some(m) = max_context {
                p = p.with_max_context(*m);
            }
            if let Some(r) = retries {
                p = p.with_retries(*r, std::time::Duration::from_millis(200));
            }
            Ok(Box::new(p))
        }
    }
}

fn encode_line(
    vocab: &Vocabulary,
    path: &Path,
    line_no: usize,
    text: &str,
) -> Result<TokenSequence, CliError> {
    vocab
        .encode(text)
        .map_err(|e| CliError::file(path, format!("line {line_no}: {e}")))
}

pub fn load_dataset(data: &DataSection, vocab: &Vocabulary) -> Result<Dataset, CliError> {
    let lines = read_lines(&data.references)?;
    let references = lines
        .iter()
        .enumerate()
        .map(|(i, l)| encode_line(vocab, &data.references, i + 1, l))
        .collect::<Result<Vec<_>, _>>()?;
    let query = vocab
        .encode(&data.query)
        .map_err(|e| CliError::Usage(format!("query: {e}")))?;
    Ok(Dataset::new(query, references))
}

fn require<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T, CliError> {
    v.as_ref()
        .ok_or_else(|| CliError::Usage(format!("missing {what}")))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    model: &'a Path,
    order: usize,
    alpha: f64,
    vocab_size: usize,
    vocab_hash: String,
    documents: usize,
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let docs = read_lines(&args.corpus)?;
    let vocab = match &args.vocab_from {
        Some(p) => load_vocabulary(p)?,
        None => Vocabulary::from_texts(&docs).map_err(|e| CliError::file(&args.corpus, e))?,
    };
    let corpus = docs
        .iter()
        .enumerate()
        .map(|(i, d)| encode_line(&vocab, &args.corpus, i + 1, d))
        .collect::<Result<Vec<_>, _>>()?;
    let model = NGramModel::train(vocab, &corpus, args.order, args.alpha).map_err(|e| match e {
        NGramError::EmptyCorpus => CliError::file(&args.corpus, e),
        other => CliError::Usage(other.to_string()),
    })?;
    model
        .save(&args.out)
        .map_err(|e| CliError::file(&args.out, e))?;
    print_json(&TrainSummary {
        model: &args.out,
        order: model.order(),
        alpha: model.alpha(),
        vocab_size: model.vocabulary().size(),
        vocab_hash: model.vocabulary().hash(),
        documents: corpus.len(),
    });
    Ok(())
}

#[derive(Serialize)]
struct CalibrateOutput<'a> {
    inputs: &'a GenerationSection,
    clip_norm: f64,
    sequence_rho: f64,
    per_token_rho: f64,
    sensitivity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    conversion_method: Option<ConversionMethod>,
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    cfg.apply_flags(&args.flags);
    if cfg.generation.clip_norm.is_some() {
        return Err(CliError::Usage(
            "calibrate solves for C; give --rho or --epsilon instead of --C".into(),
        ));
    }
    let params = cfg.resolve()?;
    let config = params.calibrate()?;
    let report = cfg.report(&config, 1)?;
    print_json(&CalibrateOutput {
        inputs: &cfg.generation,
        clip_norm: config.clip_norm(),
        sequence_rho: report.sequence_rho,
        per_token_rho: report.per_token_rho,
        sensitivity: report.sensitivity,
        epsilon: report.epsilon,
        delta: report.delta,
        conversion_method: report.conversion_method,
    });
    Ok(())
}

#[derive(Serialize)]
struct DryRun<'a> {
    dry_run: bool,
    config: &'a RunConfig,
    clip_norm: f64,
    batches: usize,
    leftover: usize,
    /// `n·(B+1)·T`.
    request_bound: u64,
}

#[derive(Serialize)]
struct BatchFailureOut {
    batch: usize,
    error: String,
}

#[derive(Serialize)]
struct AccountingFile<'a> {
    config: &'a RunConfig,
    clip_norm: f64,
    generations: usize,
    batches: usize,
    leftover_references: &'a [usize],
    provider_requests: u64,
    failures: Vec<BatchFailureOut>,
    report: &'a AccountingReport,
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".accounting.json");
    PathBuf::from(s)
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    cfg.apply_flags(&args.flags);
    cfg.apply_data_flags(&args.data);
    if args.trace {
        cfg.generation.trace = Some(true);
    }
    if let Some(out) = &args.out {
        let accounting = args
            .accounting
            .clone()
            .or(cfg.output.as_ref().and_then(|o| o.accounting.clone()));
        cfg.output = Some(OutputSection {
            generations: out.clone(),
            accounting,
        });
    } else if let (Some(a), Some(o)) = (&args.accounting, &mut cfg.output) {
        o.accounting = Some(a.clone());
    }

    // Nothing is written unless calibration succeeds.
    let params = cfg.resolve()?;
    let config = params.calibrate()?;

    let provider = build_provider(require(&cfg.provider, "provider (--model or [provider])")?)?;
    let dataset = load_dataset(
        require(&cfg.data, "references (--references or [data])")?,
        provider.vocabulary(),
    )?;
    let part = partition(&dataset, config.batch_size())?;

    if args.dry_run {
        print_json(&DryRun {
            dry_run: true,
            config: &cfg,
            clip_norm: config.clip_norm(),
            batches: part.batches.len(),
            leftover: part.leftover.len(),
            request_bound: config.request_bound(part.batches.len()),
        });
        return Ok(());
    }

    let output = require(&cfg.output, "output path (--out or [output])")?;
    let out_path = output.generations.clone();
    let acc_path = output
        .accounting
        .clone()
        .unwrap_or_else(|| sidecar_path(&out_path));

    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let run = generate_corpus(&config, &dataset, &provider, jobs)?;

    let file = fs::File::create(&out_path).map_err(|e| CliError::file(&out_path, e))?;
    let mut w = BufWriter::new(file);
    for r in &run.records {
        writeln!(w, "{}", r.to_jsonl_line(provider.vocabulary()))
            .map_err(|e| CliError::file(&out_path, e))?;
    }
    w.flush().map_err(|e| CliError::file(&out_path, e))?;

    let report = cfg.report(&config, run.batches)?;
    write_json(
        &acc_path,
        &AccountingFile {
            config: &cfg,
            clip_norm: config.clip_norm(),
            generations: run.records.len(),
            batches: run.batches,
            leftover_references: &run.leftover,
            provider_requests: run.total_requests(),
            failures: run
                .failures
                .iter()
                .map(|f| BatchFailureOut {
                    batch: f.batch_index,
                    error: f.error.to_string(),
                })
                .collect(),
            report: &report,
        },
    )?;
    eprintln!(
        "wrote {} generation(s) to {} and accounting to {}",
        run.records.len(),
        out_path.display(),
        acc_path.display()
    );
    if let Some(f) = run.failures.first() {
        return Err(CliError::Provider(format!(
            "{} of {} batches failed; first: {}",
            run.failures.len(),
            run.batches,
            f.error
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct AuditOutput<'a> {
    config: &'a RunConfig,
    clip_norm: f64,
    generations: usize,
    report: &'a AccountingReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    certificate: Option<&'a Certificate>,
}

fn cmd_audit(args: &AuditArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    cfg.apply_flags(&args.flags);
    cfg.apply_data_flags(&args.data);
    let params = cfg.resolve()?;
    let config = params.calibrate()?;

    let needs_data = args.certify || (args.generations.is_none() && cfg.data.is_some());
    let loaded = if needs_data {
        let provider = build_provider(require(&cfg.provider, "provider (--model or [provider])")?)?;
        let dataset = load_dataset(
            require(&cfg.data, "references (--references or [data])")?,
            provider.vocabulary(),
        )?;
        let part = partition(&dataset, config.batch_size())?;
        Some((provider, part))
    } else {
        None
    };
    let generations = args
        .generations
        .or(loaded.as_ref().map(|(_, p)| p.batches.len()))
        .unwrap_or(1);
    let report = cfg.report(&config, generations)?;
    let certificate = match (&loaded, args.certify) {
        (Some((provider, part)), true) => Some(certify_batch(
            &config,
            &part.batches[0],
            provider,
            &ALPHA_GRID,
        )?),
        _ => None,
    };
    print_json(&AuditOutput {
        config: &cfg,
        clip_norm: config.clip_norm(),
        generations,
        report: &report,
        certificate: certificate.as_ref(),
    });
    match certificate {
        Some(c) if !c.passed => Err(CliError::CheckFailed(format!(
            "exact check failed: max D_α/α = {} exceeds ρ = {}",
            c.max_divergence_per_alpha, c.rho
        ))),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct EvaluateOutput<'a> {
    generations: &'a Path,
    references: &'a Path,
    eval_model: &'a Path,
    metrics: &'a crate::eval::MetricReport,
}

/// Reads `generate` output, checking every line against `vocab`.
pub fn read_generations(
    path: &Path,
    vocab: &Vocabulary,
) -> Result<Vec<GenerationRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let rec: JsonlRecord = serde_json::from_str(line)
            .map_err(|e| CliError::file(path, format!("line {}: {e}", i + 1)))?;
        let tokens = TokenSequence::new(rec.tokens);
        vocab
            .check(&tokens)
            .map_err(|e| CliError::file(path, format!("line {}: {e}", i + 1)))?;
        if vocab.decode(&tokens) != rec.text {
            return Err(CliError::file(
                path,
                format!(
                    "line {}: tokens do not decode to the recorded text; vocabulary mismatch",
                    i + 1
                ),
            ));
        }
        out.push(GenerationRecord {
            batch_index: rec.batch,
            tokens,
            finished_by: rec.finished_by,
            trace: rec.trace,
            provider_requests: 0,
        });
    }
    Ok(out)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let model = load_model(&args.eval_model)?;
    let eval = NGramProvider::new(model);
    let vocab = eval.vocabulary().clone();
    let records = read_generations(&args.generations, &vocab)?;
    // References are complete texts, so they are scored with a closing EOS
    // like generations that stopped on EOS.
    let references = read_lines(&args.references)?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut s = encode_line(&vocab, &args.references, i + 1, l)?;
            s.push(vocab.eos());
            Ok(s)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let (metrics, rows) = evaluate(&records, &references, &eval)?;
    let out = EvaluateOutput {
        generations: &args.generations,
        references: &args.references,
        eval_model: &args.eval_model,
        metrics: &metrics,
    };
    match &args.out {
        Some(p) => write_json(p, &out)?,
        None => print_json(&out),
    }
    if let Some(p) = &args.csv {
        let f = fs::File::create(p).map_err(|e| CliError::file(p, e))?;
        write_rows_csv(&rows, f).map_err(|e| CliError::file(p, e))?;
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
