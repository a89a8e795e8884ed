//! Character n-gram language model with add-α smoothing and back-off.
//!
//! The conditional distribution at a context comes from the longest suffix of
//! the context (at most `order - 1` tokens) that was observed in training.
//! Each order adds `α` pseudo-counts per token, distributed like the
//! next-shorter order rather than uniformly, so unseen continuations are
//! ranked by lower-order evidence instead of tying. The returned logits are
//! the log of the smoothed conditional probabilities.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{validate_batch, LogitProvider, ProviderError};
use crate::vocab::{LogitRequest, LogitVector, TokenId, TokenSequence, VocabError, Vocabulary};

pub const MODEL_MAGIC: &str = "dpdecode-ngram";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NGramError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("n-gram order must be at least 1, got {0}")]
    InvalidOrder(usize),
    #[error("smoothing alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed model file: {0}")]
    Format(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: BTreeMap<TokenId, u64>,
}

/// Trained count tables. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct NGramModel {
    order: usize,
    alpha: f64,
    vocab: Vocabulary,
    counts: BTreeMap<Vec<TokenId>, ContextCounts>,
}

/// Trains on token sequences; each sequence is terminated with EOS before
/// counting.
pub fn train_ngram(
    vocab: Vocabulary,
    corpus: &[TokenSequence],
    order: usize,
    alpha: f64,
) -> Result<NGramModel, NGramError> {
    NGramModel::train(vocab, corpus, order, alpha)
}

fn check_params(order: usize, alpha: f64) -> Result<(), NGramError> {
    if order < 1 {
        return Err(NGramError::InvalidOrder(order));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(NGramError::InvalidAlpha(alpha));
    }
    Ok(())
}

/// Counts every (context, next) pair with context length `0..order` ending
/// right before each position.
fn count_into(counts: &mut BTreeMap<Vec<TokenId>, ContextCounts>, seq: &[TokenId], order: usize) {
    for (i, &next) in seq.iter().enumerate() {
        for n in 0..order.min(i + 1) {
            let entry = counts.entry(seq[i - n..i].to_vec()).or_default();
            entry.total += 1;
            *entry.next.entry(next).or_insert(0) += 1;
        }
    }
}

impl NGramModel {
    pub fn train(
        vocab: Vocabulary,
        corpus: &[TokenSequence],
        order: usize,
        alpha: f64,
    ) -> Result<Self, NGramError> {
        check_params(order, alpha)?;
        if corpus.is_empty() {
            return Err(NGramError::EmptyCorpus);
        }
        let mut counts = BTreeMap::new();
        for seq in corpus {
            vocab.check(seq)?;
            let mut terminated = seq.0.clone();
            terminated.push(vocab.eos());
            count_into(&mut counts, &terminated, order);
        }
        Ok(Self {
            order,
            alpha,
            vocab,
            counts,
        })
    }

    /// Builds a character vocabulary from `texts` and trains on them.
    pub fn train_on_texts<S: AsRef<str>>(
        texts: &[S],
        order: usize,
        alpha: f64,
    ) -> Result<Self, NGramError> {
        if texts.is_empty() {
            return Err(NGramError::EmptyCorpus);
        }
        let vocab = Vocabulary::from_texts(texts.iter().map(AsRef::as_ref))?;
        let corpus = texts
            .iter()
            .map(|t| vocab.encode(t.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::train(vocab, &corpus, order, alpha)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Raw count of `next` after exactly `context`.
    pub fn count(&self, context: &[TokenId], next: TokenId) -> u64 {
        self.counts
            .get(context)
            .and_then(|c| c.next.get(&next))
            .copied()
            .unwrap_or(0)
    }

    /// Smoothed next-token probabilities after `context`.
    ///
    /// Add-α at every order, with the `α|V|` pseudo-counts spread by the
    /// next-shorter context's distribution rather than uniformly; the empty
    /// context uses the uniform distribution, so order 1 is plain add-α. A
    /// context never seen in training backs off to its longest seen suffix.
    pub fn probabilities(&self, context: &[TokenId]) -> Vec<f64> {
        self.probabilities_with_cache(context, None, 0.0)
    }

    /// Like [`probabilities`](Self::probabilities), with `cache` counts added
    /// to the trained counts at weight `weight`.
    fn probabilities_with_cache(
        &self,
        context: &[TokenId],
        cache: Option<&BTreeMap<Vec<TokenId>, ContextCounts>>,
        weight: f64,
    ) -> Vec<f64> {
        let v = self.vocab.size();
        let pseudo = self.alpha * v as f64;
        let mut probs = vec![1.0 / v as f64; v];
        let longest = (self.order - 1).min(context.len());
        for n in 0..=longest {
            let suffix = &context[context.len() - n..];
            let base = self.counts.get(suffix);
            let extra = cache.and_then(|c| c.get(suffix));
            let total = base.map_or(0.0, |c| c.total as f64)
                + extra.map_or(0.0, |c| weight * c.total as f64);
            // Longer suffixes of an unseen context are unseen too.
            if total <= 0.0 {
                break;
            }
            let denom = total + pseudo;
            for p in probs.iter_mut() {
                *p = pseudo * *p / denom;
            }
            if let Some(c) = base {
                for (&y, &k) in &c.next {
                    probs[y] += k as f64 / denom;
                }
            }
            if let Some(c) = extra {
                for (&y, &k) in &c.next {
                    probs[y] += weight * k as f64 / denom;
                }
            }
        }
        probs
    }

    pub fn save(&self, path: &Path) -> Result<(), NGramError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NGramError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Deterministic serialization: identical models produce identical bytes.
    pub fn to_json(&self) -> String {
        let file = ModelFile {
            magic: MODEL_MAGIC.to_string(),
            version: MODEL_VERSION,
            order: self.order,
            alpha: self.alpha,
            vocabulary: self.vocab.clone(),
            counts: self
                .counts
                .iter()
                .map(|(ctx, c)| ContextEntry {
                    context: ctx.clone(),
                    next: c.next.iter().map(|(&y, &k)| (y, k)).collect(),
                })
                .collect(),
        };
        let mut out = serde_json::to_string(&file).expect("model serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self, NGramError> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| NGramError::Format(e.to_string()))?;
        if file.magic != MODEL_MAGIC {
            return Err(NGramError::Format(format!("bad magic {:?}", file.magic)));
        }
        if file.version != MODEL_VERSION {
            return Err(NGramError::Format(format!(
                "unsupported version {}",
                file.version
            )));
        }
        check_params(file.order, file.alpha)?;
        let v = file.vocabulary.size();
        let mut counts = BTreeMap::new();
        for entry in file.counts {
            if entry.context.len() >= file.order {
                return Err(NGramError::Format(format!(
                    "context of length {} in an order-{} model",
                    entry.context.len(),
                    file.order
                )));
            }
            let ids = entry
                .context
                .iter()
                .chain(entry.next.iter().map(|(y, _)| y));
            if let Some(&bad) = ids.into_iter().find(|&&id| id >= v) {
                return Err(VocabError::TokenOutOfRange { id: bad, size: v }.into());
            }
            let next: BTreeMap<_, _> = entry.next.into_iter().collect();
            let total = next.values().sum();
            counts.insert(entry.context, ContextCounts { total, next });
        }
        if counts.get(&Vec::new()).is_none_or(|c| c.total == 0) {
            return Err(NGramError::Format("missing unigram counts".into()));
        }
        Ok(Self {
            order: file.order,
            alpha: file.alpha,
            vocab: file.vocabulary,
            counts,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    magic: String,
    version: u32,
    order: usize,
    alpha: f64,
    vocabulary: Vocabulary,
    counts: Vec<ContextEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextEntry {
    context: Vec<TokenId>,
    next: Vec<(TokenId, u64)>,
}

/// How query, reference and prefix are joined into one context.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextLayout {
    /// Place the reference before the query instead of after it.
    #[serde(default)]
    pub reference_first: bool,
    /// Token inserted after a non-empty reference.
    #[serde(default)]
    pub separator: Option<TokenId>,
}

impl ContextLayout {
    fn join(&self, req: &LogitRequest) -> Vec<TokenId> {
        let mut ctx = Vec::with_capacity(req.context_len() + 1);
        let reference = req.effective_reference();
        let push_reference = |ctx: &mut Vec<TokenId>| {
            if let Some(r) = reference {
                ctx.extend_from_slice(r);
                ctx.extend(self.separator);
            }
        };
        if self.reference_first {
            push_reference(&mut ctx);
            ctx.extend_from_slice(&req.query);
        } else {
            ctx.extend_from_slice(&req.query);
            push_reference(&mut ctx);
        }
        ctx.extend_from_slice(&req.prefix);
        ctx
    }
}

/// Serves logits from an [`NGramModel`].
///
/// Besides conditioning on the joined context, a non-empty reference adds
/// its own n-gram counts to the trained counts at `reference_weight` (a cache
/// model), so references influence every decoding step rather than only the
/// first `order - 1` positions. With an empty or absent reference the output
/// is exactly the public logits.
#[derive(Clone, Debug)]
pub struct NGramProvider {
    model: NGramModel,
    layout: ContextLayout,
    reference_weight: f64,
    max_context: usize,
}

impl NGramProvider {
    pub const DEFAULT_MAX_CONTEXT: usize = 1 << 16;

    pub fn new(model: NGramModel) -> Self {
        Self {
            model,
            layout: ContextLayout::default(),
            reference_weight: 1.0,
            max_context: Self::DEFAULT_MAX_CONTEXT,
        }
    }

    pub fn with_layout(mut self, layout: ContextLayout) -> Self {
        self.layout = layout;
        self
    }

    /// Weight of reference n-gram counts; 0 disables the cache.
    pub fn with_reference_weight(mut self, weight: f64) -> Self {
        assert!(
            weight >= 0.0 && weight.is_finite(),
            "reference weight must be >= 0"
        );
        self.reference_weight = weight;
        self
    }

    pub fn with_max_context(mut self, max_context: usize) -> Self {
        self.max_context = max_context;
        self
    }

    pub fn model(&self) -> &NGramModel {
        &self.model
    }

    fn logits_one(&self, req: &LogitRequest) -> LogitVector {
        let ctx = self.layout.join(req);
        let cache = match req.effective_reference() {
            Some(r) if self.reference_weight > 0.0 => {
                let mut c = BTreeMap::new();
                count_into(&mut c, r, self.model.order);
                Some(c)
            }
            _ => None,
        };
        let probs =
            self.model
                .probabilities_with_cache(&ctx, cache.as_ref(), self.reference_weight);
        LogitVector::from_raw(probs.into_iter().map(f64::ln).collect())
    }
}

impl LogitProvider for NGramProvider {
    fn vocabulary(&self) -> &Vocabulary {
        &self.model.vocab
    }

    fn max_context(&self) -> usize {
        self.max_context
    }

    fn logits(&self, batch: &[LogitRequest]) -> Result<Vec<LogitVector>, ProviderError> {
        validate_batch(&self.model.vocab, self.max_context, batch)?;
        Ok(batch.iter().map(|r| self.logits_one(r)).collect())
    }
}
