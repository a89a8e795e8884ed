//! Logit providers: anything that maps a batch of [`LogitRequest`]s to one
//! [`LogitVector`] per request over a shared vocabulary.

pub mod ngram;
pub mod remote;

use std::sync::Arc;

use thiserror::Error;

use crate::vocab::{LogitRequest, LogitVector, VocabError, Vocabulary};

pub use ngram::{train_ngram, ContextLayout, NGramModel, NGramProvider};
pub use remote::RemoteProvider;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("empty request batch")]
    EmptyBatch,
    #[error("context of {len} tokens exceeds the provider maximum of {max}")]
    ContextTooLong { len: usize, max: usize },
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
    #[error("invalid request: {0}")]
    InvalidRequest(#[from] VocabError),
    #[error("transport failure: {message}")]
    Transport { message: String, retryable: bool },
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ProviderError::Transport {
                retryable: true,
                ..
            }
        )
    }
}

/// Source of next-token logits.
///
/// Implementations are immutable after construction and may be shared by
/// concurrent generation workers.
pub trait LogitProvider: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;

    /// Longest accepted context (query + reference + prefix), in tokens.
    fn max_context(&self) -> usize {
        usize::MAX
    }

    /// One vector per request, in request order.
    fn logits(&self, batch: &[LogitRequest]) -> Result<Vec<LogitVector>, ProviderError>;
}

impl<P: LogitProvider + ?Sized> LogitProvider for &P {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn max_context(&self) -> usize {
        (**self).max_context()
    }

    fn logits(&self, batch: &[LogitRequest]) -> Result<Vec<LogitVector>, ProviderError> {
        (**self).logits(batch)
    }
}

impl<P: LogitProvider + ?Sized> LogitProvider for Box<P> {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn max_context(&self) -> usize {
        (**self).max_context()
    }

    fn logits(&self, batch: &[LogitRequest]) -> Result<Vec<LogitVector>, ProviderError> {
        (**self).logits(batch)
    }
}

impl<P: LogitProvider + ?Sized> LogitProvider for Arc<P> {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn max_context(&self) -> usize {
        (**self).max_context()
    }

    fn logits(&self, batch: &[LogitRequest]) -> Result<Vec<LogitVector>, ProviderError> {
        (**self).logits(batch)
    }
}

/// Checks batch shape, token ranges and context lengths before any work.
pub fn validate_batch(
    vocab: &Vocabulary,
    max_context: usize,
    batch: &[LogitRequest],
) -> Result<(), ProviderError> {
    if batch.is_empty() {
        return Err(ProviderError::EmptyBatch);
    }
    for req in batch {
        vocab.check(&req.query)?;
        vocab.check(&req.prefix)?;
        if let Some(r) = &req.reference {
            vocab.check(r)?;
        }
        let len = req.context_len();
        if len > max_context {
            return Err(ProviderError::ContextTooLong {
                len,
                max: max_context,
            });
        }
    }
    Ok(())
}
