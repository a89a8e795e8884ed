//! Tokens, vocabularies and logit vectors.
//!
//! The built-in tokenization is character level: every distinct character of
//! the training text becomes one token, and an explicit end-of-sequence token
//! is appended at the end of the vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Index of a token inside a [`Vocabulary`].
pub type TokenId = usize;

/// String used for the end-of-sequence token of character vocabularies.
pub const EOS_TOKEN: &str = "<eos>";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VocabError {
    #[error("vocabulary needs at least 2 tokens, got {0}")]
    TooSmall(usize),
    #[error("duplicate token {0:?} in vocabulary")]
    DuplicateToken(String),
    #[error("eos index {eos} out of range for vocabulary of size {size}")]
    EosOutOfRange { eos: usize, size: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: TokenId, size: usize },
    #[error("character {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("logit at position {0} is not finite")]
    NonFinite(usize),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    eos_index: usize,
}

/// Ordered list of unique token strings with a designated end-of-sequence
/// token.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    eos: TokenId,
    lookup: HashMap<String, TokenId>,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = VocabError;

    fn try_from(repr: VocabularyRepr) -> Result<Self, Self::Error> {
        Vocabulary::new(repr.tokens, repr.eos_index)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.tokens,
            eos_index: v.eos,
        }
    }
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.eos == other.eos
    }
}

impl Eq for Vocabulary {}

impl fmt::Debug for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocabulary")
            .field("size", &self.tokens.len())
            .field("eos", &self.eos)
            .finish()
    }
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, eos_index: TokenId) -> Result<Self, VocabError> {
        if tokens.len() < 2 {
            return Err(VocabError::TooSmall(tokens.len()));
        }
        if eos_index >= tokens.len() {
            return Err(VocabError::EosOutOfRange {
                eos: eos_index,
                size: tokens.len(),
            });
        }
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if lookup.insert(tok.clone(), id).is_some() {
                return Err(VocabError::DuplicateToken(tok.clone()));
            }
        }
        Ok(Self {
            tokens,
            eos: eos_index,
            lookup,
        })
    }

    /// Character vocabulary over the given texts: distinct characters in
    /// code-point order, followed by [`EOS_TOKEN`].
    pub fn from_texts<I, S>(texts: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let chars: BTreeSet<char> = texts
            .into_iter()
            .flat_map(|t| t.as_ref().chars().collect::<Vec<_>>())
            .collect();
        let mut tokens: Vec<String> = chars.into_iter().map(String::from).collect();
        let eos = tokens.len();
        tokens.push(EOS_TOKEN.to_string());
        Self::new(tokens, eos)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.lookup.get(token).copied()
    }

    /// Character-level encoding; the EOS token is never produced.
    pub fn encode(&self, text: &str) -> Result<TokenSequence, VocabError> {
        let mut buf = [0u8; 4];
        text.chars()
            .map(|c| {
                let s: &str = c.encode_utf8(&mut buf);
                self.id(s)
                    .ok_or_else(|| VocabError::UnknownToken(s.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(TokenSequence)
    }

    /// Concatenates token strings, skipping EOS.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.iter()
            .filter(|&&id| id != self.eos)
            .filter_map(|&id| self.token(id))
            .collect()
    }

    /// Hex SHA-256 over the length-prefixed tokens and the EOS index. Used by
    /// the remote protocol to detect vocabulary mismatches.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.tokens.len() as u64).to_le_bytes());
        for tok in &self.tokens {
            hasher.update((tok.len() as u64).to_le_bytes());
            hasher.update(tok.as_bytes());
        }
        hasher.update((self.eos as u64).to_le_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn check(&self, seq: &TokenSequence) -> Result<(), VocabError> {
        match seq.iter().find(|&&id| id >= self.size()) {
            Some(&id) => Err(VocabError::TokenOutOfRange {
                id,
                size: self.size(),
            }),
            None => Ok(()),
        }
    }
}

/// Sequence of token indices: queries, references and generated prefixes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TokenId> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn push(&mut self, id: TokenId) {
        self.0.push(id);
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}

impl std::ops::Deref for TokenSequence {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

/// Dense, finite real scores over a vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, VocabError> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(VocabError::NonFinite(pos));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn get(&self, id: TokenId) -> f64 {
        self.0[id]
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Normalized log-probabilities, computed with max subtraction.
    pub fn log_softmax(&self) -> Vec<f64> {
        let m = self.max();
        let lse = m + self.0.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        self.0.iter().map(|v| v - lse).collect()
    }

    pub fn softmax(&self) -> Vec<f64> {
        self.log_softmax().into_iter().map(f64::exp).collect()
    }

    /// Maps each coordinate; the result must stay finite.
    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> LogitVector {
        LogitVector(self.0.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub(crate) fn ensure_len(&self, expected: usize) -> Result<(), VocabError> {
        if self.len() != expected {
            return Err(VocabError::LengthMismatch {
                expected,
                actual: self.len(),
            });
        }
        Ok(())
    }
}

/// One next-token query. `reference: None` asks for the public logits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogitRequest {
    pub query: TokenSequence,
    pub reference: Option<TokenSequence>,
    pub prefix: TokenSequence,
}

impl LogitRequest {
    pub fn public(query: TokenSequence, prefix: TokenSequence) -> Self {
        Self {
            query,
            reference: None,
            prefix,
        }
    }

    pub fn private(query: TokenSequence, reference: TokenSequence, prefix: TokenSequence) -> Self {
        Self {
            query,
            reference: Some(reference),
            prefix,
        }
    }

    pub fn context_len(&self) -> usize {
        self.query.len() + self.reference.as_ref().map_or(0, |r| r.len()) + self.prefix.len()
    }

    /// An empty reference carries no information and is treated as absent.
    pub fn effective_reference(&self) -> Option<&TokenSequence> {
        self.reference.as_ref().filter(|r| !r.is_empty())
    }
}
