//! Per-token mechanism: clipping, aggregation, the expanded top-k vocabulary
//! and exponential-mechanism sampling over it.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::ClippingStrategy;
use crate::vocab::{LogitVector, TokenId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("no reference logits to aggregate")]
    EmptyBatch,
    #[error("logit length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("clip norm must be finite and >= 0, got {0}")]
    InvalidClipNorm(f64),
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error("top-k parameter {k} out of range 1..={size}")]
    TopKOutOfRange { k: usize, size: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("allowed token set is empty")]
    EmptyAllowedSet,
}

/// Optional per-vector shift applied before naive clipping. Off by default;
/// clipped values still lie in `[-C, C]`, so sensitivity is unaffected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recentering {
    #[default]
    None,
    /// Subtract each vector's mean before clipping.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    /// `C`. Zero is allowed and degenerates to the public model.
    pub clip_norm: f64,
    pub strategy: ClippingStrategy,
    /// Only consulted by naive clipping.
    pub recentering: Recentering,
}

impl ClipParams {
    pub fn new(clip_norm: f64, strategy: ClippingStrategy) -> Result<Self, MechanismError> {
        check_clip_norm(clip_norm)?;
        Ok(Self {
            clip_norm,
            strategy,
            recentering: Recentering::None,
        })
    }

    pub fn dclip(clip_norm: f64) -> Result<Self, MechanismError> {
        Self::new(clip_norm, ClippingStrategy::Dclip)
    }

    pub fn naive(clip_norm: f64) -> Result<Self, MechanismError> {
        Self::new(
            clip_norm,
            ClippingStrategy::NaiveClip {
                sensitivity_advantage: false,
            },
        )
    }

    pub fn with_recentering(mut self, r: Recentering) -> Self {
        self.recentering = r;
        self
    }
}

fn check_clip_norm(c: f64) -> Result<(), MechanismError> {
    if c >= 0.0 && c.is_finite() {
        Ok(())
    } else {
        Err(MechanismError::InvalidClipNorm(c))
    }
}

fn check_len(v: &LogitVector, expected: usize) -> Result<(), MechanismError> {
    v.ensure_len(expected)
        .map_err(|_| MechanismError::LengthMismatch {
            expected,
            actual: v.len(),
        })
}

/// Projects every coordinate onto `[-C, C]`.
pub fn clip(v: &LogitVector, clip_norm: f64) -> LogitVector {
    v.map(|x| x.clamp(-clip_norm, clip_norm))
}

/// `phi_pub + clip(phi - phi_pub)`.
pub fn dclip(
    phi: &LogitVector,
    phi_pub: &LogitVector,
    clip_norm: f64,
) -> Result<LogitVector, MechanismError> {
    check_clip_norm(clip_norm)?;
    check_len(phi, phi_pub.len())?;
    Ok(LogitVector::from_raw(
        phi.as_slice()
            .iter()
            .zip(phi_pub.as_slice())
            .map(|(&x, &p)| p + (x - p).clamp(-clip_norm, clip_norm))
            .collect(),
    ))
}

/// Clipped average of the per-reference logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedLogits {
    pub values: LogitVector,
    pub contributing: usize,
    pub strategy: ClippingStrategy,
}

/// Aggregates `B` private logit vectors.
///
/// DClip: `phi_pub + (1/B) Σ clip(phi_i - phi_pub)`. Naive: `(1/B) Σ clip(phi_i)`
/// with no re-centering on the public logits.
pub fn aggregate(
    phis: &[LogitVector],
    phi_pub: &LogitVector,
    params: &ClipParams,
) -> Result<AggregatedLogits, MechanismError> {
    check_clip_norm(params.clip_norm)?;
    if phis.is_empty() {
        return Err(MechanismError::EmptyBatch);
    }
    let n = phi_pub.len();
    for phi in phis {
        check_len(phi, n)?;
    }
    let c = params.clip_norm;
    let b = phis.len() as f64;
    let mut sum = vec![0.0; n];
    let values = match params.strategy {
        ClippingStrategy::Dclip => {
            for phi in phis {
                for ((s, &x), &p) in sum.iter_mut().zip(phi.as_slice()).zip(phi_pub.as_slice()) {
                    *s += (x - p).clamp(-c, c);
                }
            }
            phi_pub
                .as_slice()
                .iter()
                .zip(&sum)
                .map(|(&p, &s)| p + s / b)
                .collect()
        }
        ClippingStrategy::NaiveClip { .. } => {
            for phi in phis {
                let shift = match params.recentering {
                    Recentering::None => 0.0,
                    Recentering::Mean => phi.as_slice().iter().sum::<f64>() / n as f64,
                };
                for (s, &x) in sum.iter_mut().zip(phi.as_slice()) {
                    *s += (x - shift).clamp(-c, c);
                }
            }
            sum.iter().map(|&s| s / b).collect()
        }
    };
    Ok(AggregatedLogits {
        values: LogitVector::from_raw(values),
        contributing: phis.len(),
        strategy: params.strategy,
    })
}

/// Rank-`k` value of a descending sort and every index at or above it.
/// Ties at the boundary are all included, so the set may exceed `k`.
pub fn top_k_inclusive(values: &[f64], k: usize) -> Result<(f64, Vec<TokenId>), MechanismError> {
    if k == 0 || k > values.len() {
        return Err(MechanismError::TopKOutOfRange {
            k,
            size: values.len(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let ell = sorted[k - 1];
    let idx = (0..values.len()).filter(|&i| values[i] >= ell).collect();
    Ok((ell, idx))
}

/// Sampling support for one decoding step, computed from public logits only.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TopKPlusSet {
    pub k: usize,
    /// `ℓ`, the k-th largest public logit.
    pub ell: f64,
    /// Margin below `ℓ` admitted into `members`; `2C/B` for the mechanism.
    pub expansion: f64,
    /// `V_k+`, ascending token ids.
    pub members: Vec<TokenId>,
    /// `V_k`: tokens with public logit at least `ℓ`, ascending.
    pub core: Vec<TokenId>,
}

impl TopKPlusSet {
    /// Members are all tokens with `phi_pub >= ℓ - margin`.
    pub fn with_margin(
        phi_pub: &LogitVector,
        k: usize,
        margin: f64,
    ) -> Result<Self, MechanismError> {
        let (ell, core) = top_k_inclusive(phi_pub.as_slice(), k)?;
        let threshold = ell - margin;
        let members = (0..phi_pub.len())
            .filter(|&i| phi_pub.get(i) >= threshold)
            .collect();
        Ok(Self {
            k,
            ell,
            expansion: margin,
            members,
            core,
        })
    }

    pub fn contains(&self, y: TokenId) -> bool {
        self.members.binary_search(&y).is_ok()
    }

    pub fn in_core(&self, y: TokenId) -> bool {
        self.core.binary_search(&y).is_ok()
    }

    /// Member of `V_k+ \ V_k`.
    pub fn in_expansion(&self, y: TokenId) -> bool {
        self.contains(y) && !self.in_core(y)
    }

    pub fn effective_k(&self) -> usize {
        self.members.len()
    }
}

/// `V_k+ = {y : phi_pub(y) >= ℓ - 2C/B}`.
pub fn expanded_top_vocabulary(
    phi_pub: &LogitVector,
    k: usize,
    clip_norm: f64,
    batch_size: usize,
) -> Result<TopKPlusSet, MechanismError> {
    check_clip_norm(clip_norm)?;
    if batch_size == 0 {
        return Err(MechanismError::InvalidBatchSize);
    }
    TopKPlusSet::with_margin(phi_pub, k, 2.0 * clip_norm / batch_size as f64)
}

/// `phi_pub + (1/B) clip(phi_i - phi_pub)`: the aggregate when every other
/// reference carries no private information.
pub fn standalone_contribution(
    phi: &LogitVector,
    phi_pub: &LogitVector,
    clip_norm: f64,
    batch_size: usize,
) -> Result<LogitVector, MechanismError> {
    check_len(phi, phi_pub.len())?;
    let b = batch_size as f64;
    Ok(LogitVector::from_raw(
        phi.as_slice()
            .iter()
            .zip(phi_pub.as_slice())
            .map(|(&x, &p)| p + (x - p).clamp(-clip_norm, clip_norm) / b)
            .collect(),
    ))
}

/// True iff every reference's standalone top-k set lies inside `set`.
pub fn superset_check_against(
    phis: &[LogitVector],
    phi_pub: &LogitVector,
    k: usize,
    clip_norm: f64,
    set: &TopKPlusSet,
) -> Result<bool, MechanismError> {
    if phis.is_empty() {
        return Err(MechanismError::EmptyBatch);
    }
    let b = phis.len();
    for phi in phis {
        let contrib = standalone_contribution(phi, phi_pub, clip_norm, b)?;
        let (_, top) = top_k_inclusive(contrib.as_slice(), k)?;
        if !top.iter().all(|&y| set.contains(y)) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Checks that `V_k+` contains the top-k set of every standalone contribution.
/// Must always hold; used as a test oracle.
pub fn superset_check(
    phis: &[LogitVector],
    phi_pub: &LogitVector,
    k: usize,
    clip_norm: f64,
) -> Result<bool, MechanismError> {
    let set = expanded_top_vocabulary(phi_pub, k, clip_norm, phis.len().max(1))?;
    superset_check_against(phis, phi_pub, k, clip_norm, &set)
}

/// `softmax(agg[members] / tau)`, aligned with `allowed.members`.
pub fn restricted_softmax(
    agg: &LogitVector,
    allowed: &TopKPlusSet,
    tau: f64,
) -> Result<Vec<f64>, MechanismError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(MechanismError::InvalidTemperature(tau));
    }
    if allowed.members.is_empty() {
        return Err(MechanismError::EmptyAllowedSet);
    }
    if let Some(&bad) = allowed.members.iter().find(|&&y| y >= agg.len()) {
        return Err(MechanismError::LengthMismatch {
            expected: bad + 1,
            actual: agg.len(),
        });
    }
    let scaled: Vec<f64> = allowed.members.iter().map(|&y| agg.get(y) / tau).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scaled.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Full-vocabulary next-token law: zero outside `allowed`.
pub fn next_token_distribution(
    agg: &LogitVector,
    allowed: &TopKPlusSet,
    tau: f64,
) -> Result<Vec<f64>, MechanismError> {
    let probs = restricted_softmax(agg, allowed, tau)?;
    let mut full = vec![0.0; agg.len()];
    for (&y, p) in allowed.members.iter().zip(probs) {
        full[y] = p;
    }
    Ok(full)
}

/// Draws one token from `softmax(agg[V_k+] / tau)`.
pub fn sample_token<R: Rng + ?Sized>(
    agg: &AggregatedLogits,
    allowed: &TopKPlusSet,
    tau: f64,
    rng: &mut R,
) -> Result<TokenId, MechanismError> {
    let probs = restricted_softmax(&agg.values, allowed, tau)?;
    let dist = WeightedIndex::new(&probs).map_err(|_| MechanismError::EmptyAllowedSet)?;
    Ok(allowed.members[dist.sample(rng)])
}
