#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use dpdecode::provider::ProviderError;
use dpdecode::{LogitProvider, LogitRequest, LogitVector, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Vocabulary `t0, t1, ..., <eos>` of the given size.
pub fn vocab(size: usize) -> Vocabulary {
    let mut tokens: Vec<String> = (0..size - 1).map(|i| format!("t{i}")).collect();
    tokens.push("<eos>".into());
    Vocabulary::new(tokens, size - 1).unwrap()
}

/// Pseudo-random logits keyed by the request. Public logits depend on
/// (query, prefix); a non-empty reference adds a deviation in
/// `[-deviation, deviation]` keyed by the reference as well.
pub struct TableProvider {
    pub vocab: Vocabulary,
    pub seed: u64,
    pub spread: f64,
    pub deviation: f64,
}

impl TableProvider {
    pub fn new(size: usize, seed: u64, spread: f64, deviation: f64) -> Self {
        Self {
            vocab: vocab(size),
            seed,
            spread,
            deviation,
        }
    }

    fn rng_for(&self, parts: &[&[usize]], salt: u8) -> ChaCha8Rng {
        let mut h = DefaultHasher::new();
        self.seed.hash(&mut h);
        salt.hash(&mut h);
        for p in parts {
            p.hash(&mut h);
        }
        ChaCha8Rng::seed_from_u64(h.finish())
    }

    pub fn one(&self, req: &LogitRequest) -> LogitVector {
        let n = self.vocab.size();
        let mut rng = self.rng_for(&[&req.query, &req.prefix], 0);
        let mut v: Vec<f64> = (0..n)
            .map(|_| rng.random_range(-self.spread..self.spread))
            .collect();
        if let Some(r) = req.effective_reference() {
            let mut rng = self.rng_for(&[&req.query, r, &req.prefix], 1);
            for x in v.iter_mut() {
                *x += rng.random_range(-self.deviation..=self.deviation);
            }
        }
        LogitVector::new(v).unwrap()
    }
}

impl LogitProvider for TableProvider {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logits(&self, batch: &[LogitRequest]) -> Result<Vec<LogitVector>, ProviderError> {
        dpdecode::provider::validate_batch(&self.vocab, usize::MAX, batch)?;
        Ok(batch.iter().map(|r| self.one(r)).collect())
    }
}

pub fn random_logits<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> LogitVector {
    LogitVector::new((0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn max_abs_diff(a: &LogitVector, b: &LogitVector) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
