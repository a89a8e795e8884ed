//! Differentially private text decoding.
//!
//! Each generated token is drawn with the exponential mechanism from an
//! average of per-reference logits whose deviation from public logits is
//! clipped, restricted to an expanded top-k set built from public logits
//! alone. Sequences are accounted for in zero-concentrated DP.
//!
//! Modules, bottom up: [`vocab`] (tokens and logit vectors), [`provider`]
//! (logit sources), [`accounting`], [`mechanism`] (one decoding step),
//! [`engine`] (the decoding loop and corpus runs), [`eval`] (metrics and the
//! exact-law oracle) and [`cli`].

pub mod accounting;
pub mod cli;
pub mod engine;
pub mod eval;
pub mod mechanism;
pub mod provider;
pub mod vocab;

pub use accounting::{
    AccountingReport, AdjacencyNotion, ClippingStrategy, ConversionMethod, PrivacyBudget,
};
pub use engine::{
    generate_corpus, generate_one, partition, ClipSource, Dataset, GenerationConfig,
    GenerationParams, GenerationRecord, ReferenceBatch,
};
pub use mechanism::{AggregatedLogits, ClipParams, TopKPlusSet};
pub use provider::{LogitProvider, NGramModel, NGramProvider, RemoteProvider};
pub use vocab::{LogitRequest, LogitVector, TokenId, TokenSequence, Vocabulary};
