//! Decoding loop, dataset partitioning and corpus-level generation.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::{
    calibrate_clip_norm, AccountingError, AccountingReport, AdjacencyNotion, ClippingStrategy,
    ConversionMethod, MechanismParams, PrivacyBudget,
};
use crate::mechanism::{
    aggregate, expanded_top_vocabulary, next_token_distribution, sample_token, AggregatedLogits,
    ClipParams, MechanismError, Recentering, TopKPlusSet,
};
use crate::provider::{LogitProvider, ProviderError};
use crate::vocab::{LogitRequest, LogitVector, TokenId, TokenSequence, Vocabulary};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset has {available} references, fewer than the batch size {batch_size}")]
    NotEnoughReferences { available: usize, batch_size: usize },
    #[error("batch {batch} has {actual} references, expected {expected}")]
    BatchSize {
        batch: usize,
        expected: usize,
        actual: usize,
    },
    #[error("provider failed in batch {batch} at token {position}: {source}")]
    Provider {
        batch: usize,
        position: usize,
        #[source]
        source: ProviderError,
    },
}

impl EngineError {
    pub fn is_provider(&self) -> bool {
        matches!(self, EngineError::Provider { .. })
    }
}

/// How the clip norm is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipSource {
    /// Use this `C`; the budget follows from it.
    Fixed(f64),
    /// Sequence-level zCDP target; `C` is solved for.
    TargetRho(f64),
    /// `(ε, δ)` target, converted to ρ first.
    TargetEpsilon {
        epsilon: f64,
        delta: f64,
        method: ConversionMethod,
    },
}

/// Unresolved generation settings. Call [`GenerationParams::calibrate`] to
/// obtain a [`GenerationConfig`] the engine will accept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub batch_size: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub max_tokens: usize,
    pub clip: ClipSource,
    pub strategy: ClippingStrategy,
    pub adjacency: AdjacencyNotion,
    pub seed: u64,
    pub trace: bool,
    pub recentering: Recentering,
}

impl GenerationParams {
    pub fn new(
        batch_size: usize,
        temperature: f64,
        top_k: usize,
        max_tokens: usize,
        clip: ClipSource,
    ) -> Self {
        Self {
            batch_size,
            temperature,
            top_k,
            max_tokens,
            clip,
            strategy: ClippingStrategy::Dclip,
            adjacency: AdjacencyNotion::ReplaceByNull,
            seed: 0,
            trace: false,
            recentering: Recentering::None,
        }
    }

    pub fn with_strategy(mut self, strategy: ClippingStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn with_adjacency(mut self, adjacency: AdjacencyNotion) -> Self {
        self.adjacency = adjacency;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_trace(mut self, trace: bool) -> Self {
        self.trace = trace;
        self
    }

    /// Resolves the clip norm and the sequence budget.
    pub fn calibrate(&self) -> Result<GenerationConfig, EngineError> {
        if self.batch_size == 0 {
            return Err(EngineError::Config(
                "batch size B must be at least 1".into(),
            ));
        }
        if self.top_k == 0 {
            return Err(EngineError::Config("top-k must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(EngineError::Config(
                "token budget T must be at least 1".into(),
            ));
        }
        let calibrate = |rho: f64| {
            calibrate_clip_norm(
                rho,
                self.batch_size,
                self.temperature,
                self.max_tokens,
                self.strategy,
                self.adjacency,
            )
        };
        let (clip_norm, target) = match self.clip {
            ClipSource::Fixed(c) => (c, None),
            ClipSource::TargetRho(rho) => {
                let budget = PrivacyBudget::from_rho(rho)?;
                (calibrate(rho)?, Some(budget))
            }
            ClipSource::TargetEpsilon {
                epsilon,
                delta,
                method,
            } => {
                let budget = PrivacyBudget::from_epsilon(epsilon, delta, method)?;
                (calibrate(budget.rho)?, Some(budget))
            }
        };
        let clip = ClipParams::new(clip_norm, self.strategy)?.with_recentering(self.recentering);
        let mechanism = MechanismParams {
            strategy: self.strategy,
            adjacency: self.adjacency,
            clip_norm,
            batch_size: self.batch_size,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        };
        // Validates the remaining domain (τ, adjacency) and fixes ρ_seq.
        let report = AccountingReport::for_disjoint_batches(&mechanism, 1)?;
        let budget = match target {
            Some(b) => PrivacyBudget {
                rho: report.sequence_rho,
                ..b
            },
            None => PrivacyBudget::from_rho(report.sequence_rho)?,
        };
        Ok(GenerationConfig {
            batch_size: self.batch_size,
            temperature: self.temperature,
            top_k: self.top_k,
            max_tokens: self.max_tokens,
            clip,
            adjacency: self.adjacency,
            seed: self.seed,
            trace: self.trace,
            budget,
        })
    }
}

/// Calibrated mechanism settings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerationConfig {
    batch_size: usize,
    temperature: f64,
    top_k: usize,
    max_tokens: usize,
    clip: ClipParams,
    adjacency: AdjacencyNotion,
    seed: u64,
    trace: bool,
    budget: PrivacyBudget,
}

impl GenerationConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn clip(&self) -> &ClipParams {
        &self.clip
    }

    pub fn clip_norm(&self) -> f64 {
        self.clip.clip_norm
    }

    pub fn adjacency(&self) -> AdjacencyNotion {
        self.adjacency
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trace(&self) -> bool {
        self.trace
    }

    /// Per-sequence budget. ρ is exact; ε, δ are present when requested.
    pub fn budget(&self) -> &PrivacyBudget {
        &self.budget
    }

    pub fn mechanism_params(&self) -> MechanismParams {
        MechanismParams {
            strategy: self.clip.strategy,
            adjacency: self.adjacency,
            clip_norm: self.clip.clip_norm,
            batch_size: self.batch_size,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }

    /// Accounting for a run producing `generations` texts from disjoint batches.
    pub fn report(&self, generations: usize) -> Result<AccountingReport, AccountingError> {
        let report = AccountingReport::for_disjoint_batches(&self.mechanism_params(), generations)?;
        match (self.budget.delta, self.budget.conversion_method) {
            (Some(delta), Some(method)) => report.with_epsilon_at(delta, method),
            _ => Ok(report),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_trace(mut self, trace: bool) -> Self {
        self.trace = trace;
        self
    }

    /// Upper bound on provider requests for `batches` generations.
    pub fn request_bound(&self, batches: usize) -> u64 {
        batches as u64 * (self.batch_size as u64 + 1) * self.max_tokens as u64
    }
}

/// One batch of `B` sensitive references sharing a public query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBatch {
    pub index: usize,
    pub query: TokenSequence,
    pub references: Vec<TokenSequence>,
    /// Positions of `references` in the source dataset.
    pub reference_ids: Vec<usize>,
}

impl ReferenceBatch {
    pub fn new(index: usize, query: TokenSequence, references: Vec<TokenSequence>) -> Self {
        let reference_ids = (0..references.len()).collect();
        Self {
            index,
            query,
            references,
            reference_ids,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub query: TokenSequence,
    pub references: Vec<TokenSequence>,
}

impl Dataset {
    pub fn new(query: TokenSequence, references: Vec<TokenSequence>) -> Self {
        Self { query, references }
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub batches: Vec<ReferenceBatch>,
    /// Dataset positions that fell into no batch.
    pub leftover: Vec<usize>,
}

/// Splits into `⌊N/B⌋` batches of consecutive references. Positions only,
/// never content, decide membership.
pub fn partition(dataset: &Dataset, batch_size: usize) -> Result<Partition, EngineError> {
    if batch_size == 0 {
        return Err(EngineError::Config(
            "batch size B must be at least 1".into(),
        ));
    }
    let n = dataset.len();
    if n < batch_size {
        return Err(EngineError::NotEnoughReferences {
            available: n,
            batch_size,
        });
    }
    let full = n / batch_size;
    let batches = (0..full)
        .map(|j| {
            let ids: Vec<usize> = (j * batch_size..(j + 1) * batch_size).collect();
            ReferenceBatch {
                index: j,
                query: dataset.query.clone(),
                references: ids.iter().map(|&i| dataset.references[i].clone()).collect(),
                reference_ids: ids,
            }
        })
        .collect();
    let leftover: Vec<usize> = (full * batch_size..n).collect();
    if !leftover.is_empty() {
        log::info!(
            "{} reference(s) left over after partitioning {n} into batches of {batch_size}; they are not used",
            leftover.len()
        );
    }
    Ok(Partition { batches, leftover })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinishReason {
    #[serde(rename = "eos")]
    Eos,
    #[serde(rename = "budget_T")]
    BudgetT,
}

impl FinishReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FinishReason::Eos => "eos",
            FinishReason::BudgetT => "budget_T",
        }
    }
}

/// Public-only statistics of one decoding step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTrace {
    /// `|V_k+|`.
    pub effective_k: usize,
    /// `|V_k|`, larger than `k` only on ties.
    pub core_size: usize,
    /// The sampled token lies in `V_k+ \ V_k`.
    pub from_expansion: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub batch_index: usize,
    pub tokens: TokenSequence,
    pub finished_by: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<StepTrace>>,
    pub provider_requests: u64,
}

impl GenerationRecord {
    /// Tokens sampled from the expansion band, if a trace was kept.
    pub fn expansion_tokens(&self) -> Option<usize> {
        self.trace
            .as_ref()
            .map(|t| t.iter().filter(|s| s.from_expansion).count())
    }

    pub fn to_jsonl_line(&self, vocab: &Vocabulary) -> String {
        let line = JsonlRecord {
            batch: self.batch_index,
            tokens: self.tokens.0.clone(),
            text: vocab.decode(&self.tokens),
            finished_by: self.finished_by,
            trace: self.trace.clone(),
        };
        serde_json::to_string(&line).expect("record serializes")
    }
}

/// On-disk form of a record: one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonlRecord {
    pub batch: usize,
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub finished_by: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<StepTrace>>,
}

/// Aggregate and support for one step, given the raw logits.
pub fn mechanism_step(
    config: &GenerationConfig,
    phis: &[LogitVector],
    phi_pub: &LogitVector,
) -> Result<(AggregatedLogits, TopKPlusSet), MechanismError> {
    let allowed = expanded_top_vocabulary(
        phi_pub,
        config.top_k,
        config.clip.clip_norm,
        config.batch_size,
    )?;
    let agg = aggregate(phis, phi_pub, &config.clip)?;
    Ok((agg, allowed))
}

fn step_requests(batch: &ReferenceBatch, prefix: &TokenSequence) -> Vec<LogitRequest> {
    let mut requests: Vec<LogitRequest> = batch
        .references
        .iter()
        .map(|r| LogitRequest::private(batch.query.clone(), r.clone(), prefix.clone()))
        .collect();
    requests.push(LogitRequest::public(batch.query.clone(), prefix.clone()));
    requests
}

fn check_batch(config: &GenerationConfig, batch: &ReferenceBatch) -> Result<(), EngineError> {
    if batch.references.len() != config.batch_size {
        return Err(EngineError::BatchSize {
            batch: batch.index,
            expected: config.batch_size,
            actual: batch.references.len(),
        });
    }
    Ok(())
}

/// Private and public logits for one step: `B` private vectors in reference
/// order, then the public vector.
pub fn step_logits<P: LogitProvider + ?Sized>(
    provider: &P,
    batch: &ReferenceBatch,
    prefix: &TokenSequence,
) -> Result<(Vec<LogitVector>, LogitVector), EngineError> {
    let wrap = |source| EngineError::Provider {
        batch: batch.index,
        position: prefix.len(),
        source,
    };
    let requests = step_requests(batch, prefix);
    let mut out = provider.logits(&requests).map_err(wrap)?;
    let size = provider.vocabulary().size();
    if out.len() != requests.len() {
        return Err(wrap(ProviderError::Protocol(format!(
            "expected {} logit vectors, got {}",
            requests.len(),
            out.len()
        ))));
    }
    if let Some(bad) = out.iter().find(|v| v.len() != size) {
        return Err(wrap(ProviderError::VocabularyMismatch(format!(
            "got {} logits for a vocabulary of {size}",
            bad.len()
        ))));
    }
    let phi_pub = out.pop().expect("public request present");
    Ok((out, phi_pub))
}

/// Exact next-token law after `prefix`, over the full vocabulary.
pub fn step_distribution<P: LogitProvider + ?Sized>(
    config: &GenerationConfig,
    batch: &ReferenceBatch,
    provider: &P,
    prefix: &TokenSequence,
) -> Result<Vec<f64>, EngineError> {
    check_batch(config, batch)?;
    let (phis, phi_pub) = step_logits(provider, batch, prefix)?;
    let (agg, allowed) = mechanism_step(config, &phis, &phi_pub)?;
    Ok(next_token_distribution(
        &agg.values,
        &allowed,
        config.temperature,
    )?)
}

/// Random stream for one batch. Independent of scheduling, so outputs do not
/// depend on how many workers run.
pub fn batch_rng(seed: u64, batch_index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(batch_index as u64);
    rng
}

/// Generates one text from one batch.
pub fn generate_one<P: LogitProvider + ?Sized>(
    config: &GenerationConfig,
    batch: &ReferenceBatch,
    provider: &P,
) -> Result<GenerationRecord, EngineError> {
    check_batch(config, batch)?;
    let mut rng = batch_rng(config.seed, batch.index);
    let eos = provider.vocabulary().eos();
    let mut tokens = TokenSequence::empty();
    let mut trace = config.trace.then(Vec::new);
    let mut requests = 0u64;
    let mut finished_by = FinishReason::BudgetT;
    for _ in 0..config.max_tokens {
        let (phis, phi_pub) = step_logits(provider, batch, &tokens)?;
        requests += config.batch_size as u64 + 1;
        let (agg, allowed) = mechanism_step(config, &phis, &phi_pub)?;
        let y = sample_token(&agg, &allowed, config.temperature, &mut rng)?;
        if let Some(t) = trace.as_mut() {
            t.push(StepTrace {
                effective_k: allowed.effective_k(),
                core_size: allowed.core.len(),
                from_expansion: allowed.in_expansion(y),
            });
        }
        tokens.push(y);
        if y == eos {
            finished_by = FinishReason::Eos;
            break;
        }
    }
    Ok(GenerationRecord {
        batch_index: batch.index,
        tokens,
        finished_by,
        trace,
        provider_requests: requests,
    })
}

#[derive(Debug)]
pub struct BatchFailure {
    pub batch_index: usize,
    pub error: EngineError,
}

/// Result of a corpus run. Failed batches are listed alongside the records
/// that did succeed.
#[derive(Debug)]
pub struct CorpusRun {
    pub records: Vec<GenerationRecord>,
    pub failures: Vec<BatchFailure>,
    pub report: AccountingReport,
    pub batches: usize,
    pub leftover: Vec<usize>,
}

impl CorpusRun {
    pub fn total_requests(&self) -> u64 {
        self.records.iter().map(|r| r.provider_requests).sum()
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Partitions the dataset and generates one text per batch on up to `jobs`
/// worker threads.
pub fn generate_corpus<P: LogitProvider + ?Sized>(
    config: &GenerationConfig,
    dataset: &Dataset,
    provider: &P,
    jobs: usize,
) -> Result<CorpusRun, EngineError> {
    let Partition { batches, leftover } = partition(dataset, config.batch_size)?;
    let report = config.report(batches.len())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| EngineError::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<GenerationRecord, EngineError>> = pool.install(|| {
        batches
            .par_iter()
            .map(|b| generate_one(config, b, provider))
            .collect()
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (batch, result) in batches.iter().zip(results) {
        match result {
            Ok(r) => records.push(r),
            Err(error) => {
                log::error!("batch {} failed: {error}", batch.index);
                failures.push(BatchFailure {
                    batch_index: batch.index,
                    error,
                });
            }
        }
    }
    Ok(CorpusRun {
        records,
        failures,
        report,
        batches: batches.len(),
        leftover,
    })
}
