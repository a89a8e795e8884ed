//! zCDP accounting for clipped-logit exponential-mechanism decoding.
//!
//! One decoding step samples from `softmax(agg / tau)` where `agg` has
//! ℓ∞-sensitivity `sens`; this is `½ (sens / tau)²`-zCDP. A sequence of at
//! most `T` steps composes to `T` times that, and sequences generated from
//! disjoint, data-independent batches compose in parallel (the maximum).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountingError {
    #[error(
        "add-or-remove adjacency cannot be accounted for: the batch size becomes \
         privacy-sensitive and the mean aggregate has no fixed sensitivity; \
         use replace_by_null (or zero_out) instead"
    )]
    AddOrRemove,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot compose an empty list of guarantees")]
    EmptyComposition,
    #[error("conversion minimizer did not converge for rho={rho}, delta={delta}")]
    Nonconvergence { rho: f64, delta: f64 },
}

/// What counts as "one unit of change" in the sensitive references.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyNotion {
    /// One reference replaced by the empty string, which yields the public
    /// logits.
    ReplaceByNull,
    /// One reference replaced by a null element whose logits are all zero.
    ZeroOut,
    /// One reference added or removed. Representable, but rejected by every
    /// accounting function.
    AddOrRemove,
}

impl fmt::Display for AdjacencyNotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdjacencyNotion::ReplaceByNull => "replace_by_null",
            AdjacencyNotion::ZeroOut => "zero_out",
            AdjacencyNotion::AddOrRemove => "add_or_remove",
        })
    }
}

/// How per-reference logits are clipped before averaging.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClippingStrategy {
    /// Clip the deviation from the public logits, then add them back.
    Dclip,
    /// Clip raw logits to `[-C, C]`. With `sensitivity_advantage` the
    /// accountant uses the zero-out bound `C/B` even under replace-by-null,
    /// which understates the true sensitivity by a factor of two. That
    /// setting exists only to reproduce the favourable baseline convention.
    NaiveClip { sensitivity_advantage: bool },
}

impl fmt::Display for ClippingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClippingStrategy::Dclip => f.write_str("dclip"),
            ClippingStrategy::NaiveClip {
                sensitivity_advantage: false,
            } => f.write_str("naive_clip"),
            ClippingStrategy::NaiveClip {
                sensitivity_advantage: true,
            } => f.write_str("naive_clip(advantage)"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversionMethod {
    /// Infimum over Rényi orders; the one used for calibration.
    Tight,
    /// `rho + 2 sqrt(rho ln(1/delta))`.
    Loose,
}

/// A zCDP parameter, optionally with the (ε, δ) pair it came from or maps to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub rho: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conversion_method: Option<ConversionMethod>,
}

impl PrivacyBudget {
    pub fn from_rho(rho: f64) -> Result<Self, AccountingError> {
        check_rho(rho)?;
        Ok(Self {
            rho,
            epsilon: None,
            delta: None,
            conversion_method: None,
        })
    }

    pub fn from_epsilon(
        epsilon: f64,
        delta: f64,
        method: ConversionMethod,
    ) -> Result<Self, AccountingError> {
        let rho = eps_to_zcdp(epsilon, delta, method)?;
        Ok(Self {
            rho,
            epsilon: Some(epsilon),
            delta: Some(delta),
            conversion_method: Some(method),
        })
    }

    /// Same ρ, with ε filled in for the given δ.
    pub fn with_epsilon_at(
        self,
        delta: f64,
        method: ConversionMethod,
    ) -> Result<Self, AccountingError> {
        Ok(Self {
            epsilon: Some(zcdp_to_eps(self.rho, delta, method)?),
            delta: Some(delta),
            conversion_method: Some(method),
            ..self
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchComposition {
    Parallel,
    Sequential,
}

/// Ex-ante privacy guarantee of a generation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub strategy: ClippingStrategy,
    pub adjacency: AdjacencyNotion,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub sensitivity: f64,
    pub per_token_rho: f64,
    pub tokens_budgeted: usize,
    pub sequence_rho: f64,
    pub batch_composition: BatchComposition,
    /// Guarantee for the whole run.
    pub rho: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conversion_method: Option<ConversionMethod>,
}

/// Inputs of a report; kept separate so they can be echoed verbatim.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MechanismParams {
    pub strategy: ClippingStrategy,
    pub adjacency: AdjacencyNotion,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl AccountingReport {
    /// Report for `batches` generations, each from its own disjoint batch.
    /// The result does not depend on `batches`.
    pub fn for_disjoint_batches(
        params: &MechanismParams,
        batches: usize,
    ) -> Result<Self, AccountingError> {
        let sens = sensitivity(
            params.strategy,
            params.adjacency,
            params.clip_norm,
            params.batch_size,
        )?;
        let per_token = rho_per_token(
            params.clip_norm,
            params.batch_size,
            params.temperature,
            params.strategy,
            params.adjacency,
        )?;
        let seq = compose_sequence(per_token, params.max_tokens)?;
        // An empty run is reported with the guarantee any single batch would get.
        let total = compose_parallel(&vec![seq; batches.max(1)])?;
        Ok(Self {
            strategy: params.strategy,
            adjacency: params.adjacency,
            clip_norm: params.clip_norm,
            batch_size: params.batch_size,
            temperature: params.temperature,
            sensitivity: sens,
            per_token_rho: per_token,
            tokens_budgeted: params.max_tokens,
            sequence_rho: seq,
            batch_composition: BatchComposition::Parallel,
            rho: total,
            epsilon: None,
            delta: None,
            conversion_method: None,
        })
    }

    pub fn with_epsilon_at(
        mut self,
        delta: f64,
        method: ConversionMethod,
    ) -> Result<Self, AccountingError> {
        self.epsilon = Some(zcdp_to_eps(self.rho, delta, method)?);
        self.delta = Some(delta);
        self.conversion_method = Some(method);
        Ok(self)
    }
}

fn invalid(msg: impl Into<String>) -> AccountingError {
    AccountingError::InvalidParameter(msg.into())
}

fn check_rho(rho: f64) -> Result<(), AccountingError> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(invalid(format!("rho must be finite and >= 0, got {rho}")));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<(), AccountingError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

fn check_mechanism(c: f64, b: usize) -> Result<(), AccountingError> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(invalid(format!(
            "clip norm must be finite and >= 0, got {c}"
        )));
    }
    if b == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    Ok(())
}

fn check_temperature(tau: f64) -> Result<(), AccountingError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Multiple of `C/B` bounding the ℓ∞ change of the aggregate.
fn sensitivity_factor(
    strategy: ClippingStrategy,
    adjacency: AdjacencyNotion,
) -> Result<f64, AccountingError> {
    use AdjacencyNotion::*;
    use ClippingStrategy::*;
    match (strategy, adjacency) {
        (_, AddOrRemove) => Err(AccountingError::AddOrRemove),
        (Dclip, ReplaceByNull) => Ok(1.0),
        (Dclip, ZeroOut) => Ok(2.0),
        (NaiveClip { .. }, ZeroOut) => Ok(1.0),
        (
            NaiveClip {
                sensitivity_advantage,
            },
            ReplaceByNull,
        ) => Ok(if sensitivity_advantage { 1.0 } else { 2.0 }),
    }
}

/// ℓ∞-sensitivity of the averaged, clipped logits.
pub fn sensitivity(
    strategy: ClippingStrategy,
    adjacency: AdjacencyNotion,
    clip_norm: f64,
    batch_size: usize,
) -> Result<f64, AccountingError> {
    let factor = sensitivity_factor(strategy, adjacency)?;
    check_mechanism(clip_norm, batch_size)?;
    Ok(factor * clip_norm / batch_size as f64)
}

/// zCDP cost of sampling one token at temperature `tau`.
pub fn rho_per_token(
    clip_norm: f64,
    batch_size: usize,
    tau: f64,
    strategy: ClippingStrategy,
    adjacency: AdjacencyNotion,
) -> Result<f64, AccountingError> {
    check_temperature(tau)?;
    let s = sensitivity(strategy, adjacency, clip_norm, batch_size)? / tau;
    Ok(0.5 * s * s)
}

/// Sequential composition over a budget of `max_tokens` steps. Early EOS does
/// not lower the cost.
pub fn compose_sequence(rho_token: f64, max_tokens: usize) -> Result<f64, AccountingError> {
    check_rho(rho_token)?;
    if max_tokens == 0 {
        return Err(invalid("token budget must be at least 1"));
    }
    Ok(max_tokens as f64 * rho_token)
}

/// Parallel composition over disjoint batches.
pub fn compose_parallel(batch_rhos: &[f64]) -> Result<f64, AccountingError> {
    if batch_rhos.is_empty() {
        return Err(AccountingError::EmptyComposition);
    }
    for &r in batch_rhos {
        check_rho(r)?;
    }
    Ok(batch_rhos.iter().copied().fold(0.0, f64::max))
}

/// Relative tolerance of the Rényi-order search and of the ε→ρ bisection.
pub const CONVERSION_TOLERANCE: f64 = 1e-9;

/// Objective minimized over the Rényi order α > 1 by the tight conversion.
pub fn tight_objective(alpha: f64, rho: f64, delta: f64) -> f64 {
    alpha * rho + (1.0 / (alpha * delta)).ln() / (alpha - 1.0) + (1.0 - 1.0 / alpha).ln()
}

/// Converts a ρ-zCDP guarantee to ε at the given δ.
pub fn zcdp_to_eps(rho: f64, delta: f64, method: ConversionMethod) -> Result<f64, AccountingError> {
    check_rho(rho)?;
    check_delta(delta)?;
    if rho == 0.0 {
        return Ok(0.0);
    }
    let loose = rho + 2.0 * (rho * (1.0 / delta).ln()).sqrt();
    match method {
        ConversionMethod::Loose => Ok(loose),
        ConversionMethod::Tight => {
            let eps = minimize_tight(rho, delta)?;
            // The tight bound never exceeds the loose one; clamp away search error.
            Ok(eps.clamp(0.0, loose))
        }
    }
}

/// Golden-section search for the infimum over α ∈ (1, ∞).
///
/// The bracket's upper end grows geometrically until the objective starts
/// increasing; the objective is unimodal in α.
fn minimize_tight(rho: f64, delta: f64) -> Result<f64, AccountingError> {
    let f = |a: f64| tight_objective(a, rho, delta);
    let fail = || AccountingError::Nonconvergence { rho, delta };

    let lo_edge = 1.0 + 1e-12;
    let mut hi = 2.0;
    let mut grown = 0;
    while f(2.0 * hi) < f(hi) {
        hi *= 2.0;
        grown += 1;
        if grown > 1100 || !hi.is_finite() {
            return Err(fail());
        }
    }
    let mut a = if grown == 0 { lo_edge } else { hi / 2.0 };
    let mut b = 2.0 * hi;

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..500 {
        if b - a <= CONVERSION_TOLERANCE * 0.5 * (a + b) {
            let best = f((a + b) / 2.0).min(f1).min(f2);
            return if best.is_finite() {
                Ok(best)
            } else {
                Err(fail())
            };
        }
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
    }
    Err(fail())
}

/// Largest ρ whose conversion at δ does not exceed ε.
pub fn eps_to_zcdp(
    epsilon: f64,
    delta: f64,
    method: ConversionMethod,
) -> Result<f64, AccountingError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    check_delta(delta)?;
    let eps_of = |rho: f64| zcdp_to_eps(rho, delta, method);
    let mut lo = 0.0;
    let mut hi = epsilon;
    while eps_of(hi)? <= epsilon {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..400 {
        if hi - lo <= CONVERSION_TOLERANCE * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if eps_of(mid)? <= epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Clip norm that makes a `max_tokens`-token generation exactly
/// `rho_seq`-zCDP. Closed-form inverse of [`rho_per_token`] times `T`.
pub fn calibrate_clip_norm(
    rho_seq: f64,
    batch_size: usize,
    tau: f64,
    max_tokens: usize,
    strategy: ClippingStrategy,
    adjacency: AdjacencyNotion,
) -> Result<f64, AccountingError> {
    check_rho(rho_seq)?;
    check_temperature(tau)?;
    if batch_size == 0 || max_tokens == 0 {
        return Err(invalid("batch size and token budget must be at least 1"));
    }
    let factor = sensitivity_factor(strategy, adjacency)?;
    Ok(batch_size as f64 * tau * (2.0 * rho_seq / max_tokens as f64).sqrt() / factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use AdjacencyNotion::*;
    use ClippingStrategy::*;

    const NAIVE: ClippingStrategy = NaiveClip {
        sensitivity_advantage: false,
    };
    const NAIVE_ADV: ClippingStrategy = NaiveClip {
        sensitivity_advantage: true,
    };

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn sensitivity_table() {
        assert_eq!(sensitivity(Dclip, ReplaceByNull, 1.0, 4).unwrap(), 0.25);
        assert_eq!(sensitivity(Dclip, ZeroOut, 1.0, 4).unwrap(), 0.5);
        assert_eq!(sensitivity(NAIVE, ReplaceByNull, 2.0, 2).unwrap(), 2.0);
        assert_eq!(sensitivity(NAIVE_ADV, ReplaceByNull, 2.0, 2).unwrap(), 1.0);
        assert_eq!(sensitivity(NAIVE, ZeroOut, 2.0, 2).unwrap(), 1.0);
    }

    #[test]
    fn add_or_remove_is_rejected_everywhere() {
        assert_eq!(
            sensitivity(Dclip, AddOrRemove, 1.0, 4),
            Err(AccountingError::AddOrRemove)
        );
        assert_eq!(
            rho_per_token(1.0, 4, 1.0, NAIVE, AddOrRemove),
            Err(AccountingError::AddOrRemove)
        );
        assert_eq!(
            calibrate_clip_norm(1.0, 4, 1.0, 10, Dclip, AddOrRemove),
            Err(AccountingError::AddOrRemove)
        );
        let msg = AccountingError::AddOrRemove.to_string();
        assert!(msg.contains("replace_by_null"));
    }

    #[test]
    fn parameter_domain_is_checked() {
        assert!(sensitivity(Dclip, ReplaceByNull, 1.0, 0).is_err());
        assert!(sensitivity(Dclip, ReplaceByNull, -1.0, 1).is_err());
        assert!(rho_per_token(1.0, 1, 0.0, Dclip, ReplaceByNull).is_err());
        assert!(compose_sequence(0.1, 0).is_err());
        assert!(zcdp_to_eps(1.0, 1.0, ConversionMethod::Tight).is_err());
        assert!(zcdp_to_eps(-1.0, 0.5, ConversionMethod::Tight).is_err());
        assert!(eps_to_zcdp(0.0, 1e-6, ConversionMethod::Tight).is_err());
    }

    #[test]
    fn per_token_rho_examples() {
        assert_eq!(
            rho_per_token(1.0, 1, 1.0, Dclip, ReplaceByNull).unwrap(),
            0.5
        );
        let expected = 0.66f64.powi(2) / (2.0 * 49.0 * 1.44);
        let got = rho_per_token(0.66, 7, 1.2, Dclip, ReplaceByNull).unwrap();
        assert!(rel(got, expected) < 1e-14);
        assert!((got - 3.086e-3).abs() < 1e-6);
        assert_eq!(
            rho_per_token(0.0, 7, 1.2, Dclip, ReplaceByNull).unwrap(),
            0.0
        );
        // zero-out doubles the sensitivity, so quadruples rho
        let zo = rho_per_token(0.66, 7, 1.2, Dclip, ZeroOut).unwrap();
        assert!(rel(zo, 4.0 * got) < 1e-14);
    }

    #[test]
    fn composition_examples() {
        assert_eq!(compose_sequence(0.5, 10).unwrap(), 5.0);
        assert_eq!(compose_sequence(0.125, 1).unwrap(), 0.125);
        let (c, b, tau, t) = (0.7, 5usize, 1.3, 40usize);
        let seq =
            compose_sequence(rho_per_token(c, b, tau, Dclip, ReplaceByNull).unwrap(), t).unwrap();
        let closed = t as f64 * c * c / (2.0 * (b * b) as f64 * tau * tau);
        assert!(rel(seq, closed) < 1e-14);

        assert_eq!(compose_parallel(&[0.5, 0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(compose_parallel(&[0.1, 0.9]).unwrap(), 0.9);
        assert_eq!(compose_parallel(&[0.3]).unwrap(), 0.3);
        assert_eq!(
            compose_parallel(&[]),
            Err(AccountingError::EmptyComposition)
        );
    }

    /// Independent oracle: brute-force grid scan over α ∈ (1, 200].
    fn grid_scan_eps(rho: f64, delta: f64) -> f64 {
        let mut best = f64::INFINITY;
        let mut i = 1u64;
        loop {
            let a = 1.0 + i as f64 * 1e-3;
            if a > 200.0 {
                break;
            }
            let v = a * rho + (1.0 / (a * delta)).ln() / (a - 1.0) + (1.0 - 1.0 / a).ln();
            best = best.min(v);
            i += 1;
        }
        best
    }

    #[test]
    fn tight_conversion_matches_grid_scan() {
        let oracle = grid_scan_eps(1.543, 1e-6);
        assert!((oracle - 10.0).abs() < 0.1, "oracle {oracle}");
        let got = zcdp_to_eps(1.543, 1e-6, ConversionMethod::Tight).unwrap();
        assert!((got - 10.0).abs() < 0.1);
        // The golden-section minimum can only be at or below the grid minimum.
        assert!(got <= oracle + 1e-9);
        assert!(oracle - got < 1e-5);
        for &(rho, delta) in &[(0.01, 1e-5), (0.3, 1e-6), (4.0, 1e-8), (20.0, 1e-3)] {
            let g = grid_scan_eps(rho, delta);
            let t = zcdp_to_eps(rho, delta, ConversionMethod::Tight).unwrap();
            assert!(t <= g + 1e-9 && g - t < 1e-4, "rho={rho}: {t} vs {g}");
        }
    }

    #[test]
    fn loose_conversion_examples() {
        assert_eq!(
            zcdp_to_eps(0.0, 1e-6, ConversionMethod::Loose).unwrap(),
            0.0
        );
        assert_eq!(
            zcdp_to_eps(0.0, 1e-6, ConversionMethod::Tight).unwrap(),
            0.0
        );
        // Oracle: solve rho + 2 sqrt(rho L) = 10 with the quadratic formula in sqrt(rho).
        let l = 1e6f64.ln();
        let root = -l.sqrt() + (l + 10.0).sqrt();
        let rho = root * root;
        assert!((rho - 1.356).abs() < 0.01, "rho {rho}");
        let eps = zcdp_to_eps(1.356, 1e-6, ConversionMethod::Loose).unwrap();
        assert!((eps - 10.0).abs() < 0.05);
        assert!(
            rel(
                zcdp_to_eps(rho, 1e-6, ConversionMethod::Loose).unwrap(),
                10.0
            ) < 1e-12
        );
    }

    #[test]
    fn inverse_conversion_examples() {
        // Oracle: forward-evaluate on a coarse rho grid and bracket eps = 10.
        let grid: Vec<f64> = (1..=400).map(|i| i as f64 * 0.01).collect();
        let idx = grid
            .iter()
            .position(|&r| zcdp_to_eps(r, 1e-6, ConversionMethod::Tight).unwrap() > 10.0)
            .unwrap();
        let (lo, hi) = (grid[idx - 1], grid[idx]);
        let rho = eps_to_zcdp(10.0, 1e-6, ConversionMethod::Tight).unwrap();
        assert!(lo <= rho && rho <= hi, "{lo} <= {rho} <= {hi}");
        assert!((rho - 1.54).abs() < 0.02);

        let r1 = eps_to_zcdp(1.0, 1e-6, ConversionMethod::Tight).unwrap();
        let r2 = eps_to_zcdp(2.0, 1e-6, ConversionMethod::Tight).unwrap();
        assert!(r1 < r2);
    }

    #[test]
    fn calibration_examples() {
        let c = calibrate_clip_norm(5.0, 1, 1.0, 10, Dclip, ReplaceByNull).unwrap();
        assert!(rel(c, 1.0) < 1e-15);
        assert_eq!(
            calibrate_clip_norm(0.0, 3, 1.0, 10, Dclip, ReplaceByNull).unwrap(),
            0.0
        );
        let rho = eps_to_zcdp(10.0, 1e-6, ConversionMethod::Tight).unwrap();
        let c = calibrate_clip_norm(rho, 7, 1.2, 500, Dclip, ReplaceByNull).unwrap();
        assert!((c - 0.66).abs() < 0.01, "C = {c}");
        let rho = eps_to_zcdp(1.0, 1e-6, ConversionMethod::Tight).unwrap();
        let c = calibrate_clip_norm(rho, 7, 1.2, 500, Dclip, ReplaceByNull).unwrap();
        assert!((c - 0.08).abs() < 0.01, "C = {c}");
    }

    #[test]
    fn report_is_independent_of_batch_count() {
        let params = MechanismParams {
            strategy: Dclip,
            adjacency: ReplaceByNull,
            clip_norm: 0.5,
            batch_size: 4,
            temperature: 1.0,
            max_tokens: 20,
        };
        let one = AccountingReport::for_disjoint_batches(&params, 1).unwrap();
        let many = AccountingReport::for_disjoint_batches(&params, 50).unwrap();
        assert_eq!(one, many);
        assert_eq!(one.rho, one.sequence_rho);
        assert_eq!(one.sequence_rho, 20.0 * one.per_token_rho);
        assert_eq!(many.batch_composition, BatchComposition::Parallel);
    }

    #[test]
    fn strategy_serializes_with_kind_tag() {
        assert_eq!(
            serde_json::to_string(&Dclip).unwrap(),
            r#"{"kind":"dclip"}"#
        );
        assert_eq!(
            serde_json::to_string(&NAIVE_ADV).unwrap(),
            r#"{"kind":"naive_clip","sensitivity_advantage":true}"#
        );
    }

    proptest! {
        #[test]
        fn tight_never_exceeds_loose(rho in 1e-6f64..50.0, log_delta in -12.0f64..-1.0) {
            let delta = 10f64.powf(log_delta);
            let t = zcdp_to_eps(rho, delta, ConversionMethod::Tight).unwrap();
            let l = zcdp_to_eps(rho, delta, ConversionMethod::Loose).unwrap();
            prop_assert!(t <= l);
            prop_assert!(t >= 0.0);
        }

        #[test]
        fn calibration_round_trips(
            rho in 1e-6f64..20.0,
            b in 1usize..64,
            tau in 0.05f64..5.0,
            t in 1usize..2000,
            zero_out in any::<bool>(),
            naive in any::<bool>(),
        ) {
            let adj = if zero_out { ZeroOut } else { ReplaceByNull };
            let strat = if naive { NAIVE } else { Dclip };
            let c = calibrate_clip_norm(rho, b, tau, t, strat, adj).unwrap();
            let back = compose_sequence(rho_per_token(c, b, tau, strat, adj).unwrap(), t).unwrap();
            prop_assert!(rel(back, rho) < 1e-12);
        }

        #[test]
        fn eps_round_trips(eps in 0.05f64..30.0, log_delta in -10.0f64..-2.0, tight in any::<bool>()) {
            let delta = 10f64.powf(log_delta);
            let m = if tight { ConversionMethod::Tight } else { ConversionMethod::Loose };
            let rho = eps_to_zcdp(eps, delta, m).unwrap();
            let back = zcdp_to_eps(rho, delta, m).unwrap();
            prop_assert!(rel(back, eps) < 1e-6, "{eps} -> {rho} -> {back}");
        }
    }
}
