//! Utility metrics for generated text and the exact-law oracle.

pub mod exact;

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{FinishReason, GenerationRecord};
use crate::provider::{LogitProvider, ProviderError};
use crate::vocab::{LogitRequest, TokenSequence};

pub use exact::{
    certify_batch, exact_distribution, exact_distribution_adjacent, exact_law, renyi_divergence,
    total_variation, Certificate, DivergenceCheck, ExactDistribution, ExactError, ALPHA_GRID,
    STATE_SPACE_LIMIT,
};

/// Two-sided 99% normal quantile.
pub const Z_99: f64 = 2.576;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot score an empty sequence")]
    EmptySequence,
    #[error("{0} list is empty")]
    EmptyInput(&'static str),
    #[error(
        "token {token} at position {position} has zero probability under the evaluation model"
    )]
    ZeroProbability { position: usize, token: usize },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

/// `exp(-mean log p(x_t | x_<t))` under the provider's public distribution.
pub fn perplexity<P: LogitProvider + ?Sized>(
    x: &TokenSequence,
    eval: &P,
) -> Result<f64, EvalError> {
    if x.is_empty() {
        return Err(EvalError::EmptySequence);
    }
    let requests: Vec<LogitRequest> = (0..x.len())
        .map(|t| LogitRequest::public(TokenSequence::empty(), TokenSequence::new(x[..t].to_vec())))
        .collect();
    let logits = eval.logits(&requests)?;
    let mut nll = 0.0;
    for (t, phi) in logits.iter().enumerate() {
        let lp = phi.log_softmax()[x[t]];
        if !lp.is_finite() {
            return Err(EvalError::ZeroProbability {
                position: t,
                token: x[t],
            });
        }
        nll -= lp;
    }
    Ok((nll / x.len() as f64).exp())
}

/// Mean absolute perplexity gap with a Wald interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaPpl {
    pub mean: f64,
    /// `z · s / √m`; zero for a single generation.
    pub half_width: f64,
    pub lower: f64,
    pub upper: f64,
    pub z: f64,
    pub reference_mean_ppl: f64,
    pub generations: usize,
}

impl DeltaPpl {
    /// From already computed perplexities.
    pub fn from_perplexities(generated: &[f64], references: &[f64]) -> Result<Self, EvalError> {
        if generated.is_empty() {
            return Err(EvalError::EmptyInput("generation"));
        }
        if references.is_empty() {
            return Err(EvalError::EmptyInput("reference"));
        }
        let ref_mean = references.iter().sum::<f64>() / references.len() as f64;
        let gaps: Vec<f64> = generated.iter().map(|p| (p - ref_mean).abs()).collect();
        let m = gaps.len() as f64;
        let mean = gaps.iter().sum::<f64>() / m;
        let half_width = if gaps.len() > 1 {
            let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (m - 1.0);
            Z_99 * var.sqrt() / m.sqrt()
        } else {
            0.0
        };
        Ok(Self {
            mean,
            half_width,
            lower: mean - half_width,
            upper: mean + half_width,
            z: Z_99,
            reference_mean_ppl: ref_mean,
            generations: gaps.len(),
        })
    }
}

fn perplexities<P: LogitProvider + ?Sized>(
    seqs: &[TokenSequence],
    eval: &P,
) -> Result<Vec<f64>, EvalError> {
    seqs.par_iter().map(|s| perplexity(s, eval)).collect()
}

pub fn delta_ppl<P: LogitProvider + ?Sized>(
    generated: &[TokenSequence],
    references: &[TokenSequence],
    eval: &P,
) -> Result<DeltaPpl, EvalError> {
    if generated.is_empty() {
        return Err(EvalError::EmptyInput("generation"));
    }
    if references.is_empty() {
        return Err(EvalError::EmptyInput("reference"));
    }
    DeltaPpl::from_perplexities(
        &perplexities(generated, eval)?,
        &perplexities(references, eval)?,
    )
}

/// Per-generation values, one CSV row each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub batch: usize,
    pub length: usize,
    pub finished_by: FinishReason,
    pub perplexity: f64,
    pub abs_gap: f64,
    pub effective_k_mean: Option<f64>,
    pub expansion_tokens: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub delta_ppl: DeltaPpl,
    pub mean_length: f64,
    /// Length in tokens to number of generations.
    pub length_histogram: BTreeMap<usize, usize>,
    /// Mean `|V_k+|` over all traced steps; absent without traces.
    pub effective_k_mean: Option<f64>,
    /// Mean count of tokens drawn from `V_k+ \ V_k` per generation.
    pub expansion_tokens_mean: Option<f64>,
}

/// Scores records against references. Reference sequences are scored as given.
pub fn evaluate<P: LogitProvider + ?Sized>(
    records: &[GenerationRecord],
    references: &[TokenSequence],
    eval: &P,
) -> Result<(MetricReport, Vec<GenerationRow>), EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput("generation"));
    }
    let seqs: Vec<TokenSequence> = records.iter().map(|r| r.tokens.clone()).collect();
    let gen_ppl = perplexities(&seqs, eval)?;
    if references.is_empty() {
        return Err(EvalError::EmptyInput("reference"));
    }
    let ref_ppl = perplexities(references, eval)?;
    let delta = DeltaPpl::from_perplexities(&gen_ppl, &ref_ppl)?;

    let mut hist = BTreeMap::new();
    for r in records {
        *hist.entry(r.tokens.len()).or_insert(0) += 1;
    }
    let mean_length =
        records.iter().map(|r| r.tokens.len() as f64).sum::<f64>() / records.len() as f64;

    let traced = records.iter().all(|r| r.trace.is_some());
    let (effective_k_mean, expansion_tokens_mean) = if traced {
        let steps: Vec<usize> = records
            .iter()
            .flat_map(|r| r.trace.as_ref().unwrap().iter().map(|s| s.effective_k))
            .collect();
        let ek =
            (!steps.is_empty()).then(|| steps.iter().sum::<usize>() as f64 / steps.len() as f64);
        let ex = records
            .iter()
            .map(|r| r.expansion_tokens().unwrap())
            .sum::<usize>() as f64
            / records.len() as f64;
        (ek, Some(ex))
    } else {
        (None, None)
    };

    let rows =
        records
            .iter()
            .zip(&gen_ppl)
            .map(|(r, &ppl)| GenerationRow {
                batch: r.batch_index,
                length: r.tokens.len(),
                finished_by: r.finished_by,
                perplexity: ppl,
                abs_gap: (ppl - delta.reference_mean_ppl).abs(),
                effective_k_mean: r.trace.as_ref().filter(|t| !t.is_empty()).map(|t| {
                    t.iter().map(|s| s.effective_k).sum::<usize>() as f64 / t.len() as f64
                }),
                expansion_tokens: r.expansion_tokens(),
            })
            .collect();

    Ok((
        MetricReport {
            delta_ppl: delta,
            mean_length,
            length_histogram: hist,
            effective_k_mean,
            expansion_tokens_mean,
        },
        rows,
    ))
}

pub fn write_rows_csv<W: Write>(rows: &[GenerationRow], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
