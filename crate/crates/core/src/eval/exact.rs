//! Exhaustive enumeration of the decoding law on tiny vocabularies.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::accounting::{AccountingError, AdjacencyNotion};
use crate::engine::{
    mechanism_step, step_distribution, step_logits, EngineError, GenerationConfig, ReferenceBatch,
};
use crate::mechanism::next_token_distribution;
use crate::provider::LogitProvider;
use crate::vocab::{LogitVector, TokenId, TokenSequence};

/// Rényi orders checked by [`certify_batch`].
pub const ALPHA_GRID: [f64; 6] = [1.5, 2.0, 4.0, 8.0, 16.0, 32.0];

/// Absolute slack allowed on `D_α ≤ ρα` for floating-point error.
pub const CERTIFICATE_SLACK: f64 = 1e-12;

/// Largest `|V|^T` the enumerator accepts.
pub const STATE_SPACE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Error)]
pub enum ExactError {
    #[error("state space |V|^T = {vocab}^{max_tokens} exceeds the limit of {STATE_SPACE_LIMIT}")]
    StateSpace { vocab: usize, max_tokens: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Probability of every complete output sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExactDistribution {
    pub law: BTreeMap<Vec<TokenId>, f64>,
}

impl ExactDistribution {
    pub fn prob(&self, seq: &[TokenId]) -> f64 {
        self.law.get(seq).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.law.values().sum()
    }

    pub fn len(&self) -> usize {
        self.law.len()
    }

    pub fn is_empty(&self) -> bool {
        self.law.is_empty()
    }

    /// Both laws over the union of their supports, in the same order.
    pub fn aligned(&self, other: &ExactDistribution) -> (Vec<f64>, Vec<f64>) {
        let mut keys: Vec<&Vec<TokenId>> = self.law.keys().chain(other.law.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|k| (self.prob(k), other.prob(k)))
            .unzip()
    }
}

fn check_state_space(vocab: usize, max_tokens: usize) -> Result<(), ExactError> {
    let fits = u32::try_from(max_tokens)
        .ok()
        .and_then(|t| (vocab as u128).checked_pow(t))
        .is_some_and(|n| n <= STATE_SPACE_LIMIT);
    if fits {
        Ok(())
    } else {
        Err(ExactError::StateSpace { vocab, max_tokens })
    }
}

/// Law of a sequence sampler that stops at `eos` or after `max_tokens`
/// steps. `step` returns the next-token law (length `vocab_size`) after a prefix.
pub fn exact_law<F>(
    vocab_size: usize,
    eos: TokenId,
    max_tokens: usize,
    mut step: F,
) -> Result<ExactDistribution, ExactError>
where
    F: FnMut(&TokenSequence) -> Result<Vec<f64>, EngineError>,
{
    check_state_space(vocab_size, max_tokens)?;
    let mut law = BTreeMap::new();
    let mut stack = vec![(TokenSequence::empty(), 1.0f64)];
    while let Some((prefix, mass)) = stack.pop() {
        let probs = step(&prefix)?;
        for (y, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let mut next = prefix.clone();
            next.push(y);
            if y == eos || next.len() == max_tokens {
                *law.entry(next.0).or_insert(0.0) += mass * p;
            } else {
                stack.push((next, mass * p));
            }
        }
    }
    Ok(ExactDistribution { law })
}

/// Exact law of [`crate::engine::generate_one`] for this batch.
pub fn exact_distribution<P: LogitProvider + ?Sized>(
    config: &GenerationConfig,
    batch: &ReferenceBatch,
    provider: &P,
) -> Result<ExactDistribution, ExactError> {
    let vocab = provider.vocabulary();
    exact_law(vocab.size(), vocab.eos(), config.max_tokens(), |prefix| {
        step_distribution(config, batch, provider, prefix)
    })
}

/// Exact law with reference `replaced` swapped for the null element of
/// `adjacency`: the empty reference under replace-by-null, all-zero logits
/// under zero-out.
pub fn exact_distribution_adjacent<P: LogitProvider + ?Sized>(
    config: &GenerationConfig,
    batch: &ReferenceBatch,
    provider: &P,
    replaced: usize,
    adjacency: AdjacencyNotion,
) -> Result<ExactDistribution, ExactError> {
    if replaced >= batch.references.len() {
        return Err(ExactError::Engine(EngineError::Config(format!(
            "reference {replaced} is not in a batch of {}",
            batch.references.len()
        ))));
    }
    match adjacency {
        AdjacencyNotion::ReplaceByNull => {
            let mut nulled = batch.clone();
            nulled.references[replaced] = TokenSequence::empty();
            exact_distribution(config, &nulled, provider)
        }
        AdjacencyNotion::ZeroOut => {
            let vocab = provider.vocabulary();
            exact_law(vocab.size(), vocab.eos(), config.max_tokens(), |prefix| {
                let (mut phis, phi_pub) = step_logits(provider, batch, prefix)?;
                phis[replaced] = LogitVector::zeros(phi_pub.len());
                let (agg, allowed) = mechanism_step(config, &phis, &phi_pub)?;
                Ok(next_token_distribution(
                    &agg.values,
                    &allowed,
                    config.temperature(),
                )?)
            })
        }
        AdjacencyNotion::AddOrRemove => Err(ExactError::Engine(EngineError::Accounting(
            AccountingError::AddOrRemove,
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DivergenceCheck {
    pub replaced: usize,
    pub alpha: f64,
    /// `D_α(P‖Q)` with `P` the law on the original batch.
    pub forward: f64,
    /// `D_α(Q‖P)`.
    pub backward: f64,
    /// `ρα`.
    pub bound: f64,
}

impl DivergenceCheck {
    pub fn holds(&self) -> bool {
        self.forward <= self.bound + CERTIFICATE_SLACK
            && self.backward <= self.bound + CERTIFICATE_SLACK
    }
}

/// Exact zCDP check of one batch against each of its neighbours.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Certificate {
    pub rho: f64,
    pub adjacency: AdjacencyNotion,
    pub checks: Vec<DivergenceCheck>,
    /// Largest `D_α / α` seen, to compare with `rho`.
    pub max_divergence_per_alpha: f64,
    pub passed: bool,
}

/// Compares the exact output law on `batch` with the law on every batch that
/// differs in one reference, for each order in `alphas`.
pub fn certify_batch<P: LogitProvider + ?Sized>(
    config: &GenerationConfig,
    batch: &ReferenceBatch,
    provider: &P,
    alphas: &[f64],
) -> Result<Certificate, ExactError> {
    let rho = config.budget().rho;
    let adjacency = config.adjacency();
    let base = exact_distribution(config, batch, provider)?;
    let mut checks = Vec::new();
    for i in 0..batch.references.len() {
        let other = exact_distribution_adjacent(config, batch, provider, i, adjacency)?;
        let (p, q) = base.aligned(&other);
        for &alpha in alphas {
            checks.push(DivergenceCheck {
                replaced: i,
                alpha,
                forward: renyi_divergence(&p, &q, alpha),
                backward: renyi_divergence(&q, &p, alpha),
                bound: rho * alpha,
            });
        }
    }
    let max_divergence_per_alpha = checks
        .iter()
        .map(|c| c.forward.max(c.backward) / c.alpha)
        .fold(0.0, f64::max);
    let passed = checks.iter().all(DivergenceCheck::holds);
    Ok(Certificate {
        rho,
        adjacency,
        checks,
        max_divergence_per_alpha,
        passed,
    })
}

/// `D_α(P‖Q) = 1/(α-1) · ln Σ P^α Q^(1-α)`, summed in log space.
/// Infinite when `P` puts mass where `Q` has none.
pub fn renyi_divergence(p: &[f64], q: &[f64], alpha: f64) -> f64 {
    assert!(alpha > 1.0, "Renyi order must exceed 1");
    assert_eq!(p.len(), q.len());
    let mut logs = Vec::with_capacity(p.len());
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        logs.push(alpha * pi.ln() + (1.0 - alpha) * qi.ln());
    }
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse / (alpha - 1.0)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
