//! Token streams: a seeded phrase-level n-gram machine, periodic streams and
//! plain-file ingestion.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Parameters of the synthetic phrase machine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhraseSpec {
    /// Number of distinct phrases in the bank.
    pub phrases: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Successor phrases reachable from each phrase.
    pub successors: usize,
    /// Probability of jumping to a uniformly random phrase instead.
    pub noise: f64,
}

impl Default for PhraseSpec {
    fn default() -> Self {
        Self { phrases: 24, min_len: 3, max_len: 6, successors: 2, noise: 0.05 }
    }
}

/// A bank of fixed token n-grams chained by a sparse Markov transition table.
///
/// Tokens inside a phrase are fully determined by the phrase and the offset
/// within it, so predicting them requires looking back to where the phrase
/// began; phrase-to-phrase transitions add a second, coarser level of
/// structure.
#[derive(Debug, Clone)]
pub struct PhraseMachine {
    phrases: Vec<Vec<u32>>,
    next: Vec<Vec<usize>>,
    noise: f64,
}

impl PhraseMachine {
    pub fn new(vocab: usize, spec: PhraseSpec, seed: u64) -> Result<Self> {
        if vocab < 2 || spec.phrases == 0 || spec.min_len == 0 || spec.min_len > spec.max_len || spec.successors == 0 {
            return Err(Error::Config(format!("invalid phrase machine {spec:?} for vocab {vocab}")));
        }
        let mut rng = crate::seed::rng(seed, "data/phrases");
        let phrases = (0..spec.phrases)
            .map(|_| {
                let len = rng.random_range(spec.min_len..=spec.max_len);
                (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
            })
            .collect();
        let next = (0..spec.phrases)
            .map(|_| (0..spec.successors).map(|_| rng.random_range(0..spec.phrases)).collect())
            .collect();
        Ok(Self { phrases, next, noise: spec.noise })
    }

    /// `len` tokens starting from a random phrase; the stream is keyed by `seed`.
    pub fn stream(&self, len: usize, seed: u64) -> Vec<u32> {
        let mut rng = crate::seed::rng(seed, "data/stream");
        let mut out = Vec::with_capacity(len + 8);
        let mut p = rng.random_range(0..self.phrases.len());
        while out.len() < len {
            out.extend_from_slice(&self.phrases[p]);
            p = if rng.random::<f64>() < self.noise {
                rng.random_range(0..self.phrases.len())
            } else {
                let succ = &self.next[p];
                succ[rng.random_range(0..succ.len())]
            };
        }
        out.truncate(len);
        out
    }

    /// `count` independent sequences of `len` tokens.
    pub fn sequences(&self, count: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
        (0..count).map(|i| self.stream(len, crate::seed::derive(seed, &format!("seq/{i}")))).collect()
    }
}

/// `0, 1, …, period-1, 0, 1, …` truncated to `len`.
pub fn periodic_stream(period: usize, len: usize) -> Vec<u32> {
    (0..len).map(|i| (i % period.max(1)) as u32).collect()
}

/// Uniform i.i.d. tokens.
pub fn uniform_stream(vocab: usize, len: usize, seed: u64) -> Vec<u32> {
    let mut rng = crate::seed::rng(seed, "data/uniform");
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Parses a token file: whitespace-separated integers when every field
/// parses as one, raw bytes (byte-level tokens) otherwise.
pub fn parse_tokens(bytes: &[u8], vocab: usize) -> Result<Vec<u32>> {
    let ints: Option<Vec<u32>> = std::str::from_utf8(bytes)
        .ok()
        .filter(|s| !s.trim().is_empty())
        .and_then(|s| s.split_whitespace().map(|f| f.parse().ok()).collect());
    let tokens = ints.unwrap_or_else(|| bytes.iter().map(|&b| u32::from(b)).collect());
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::arg(format!("token {t} in file exceeds vocabulary of {vocab}")));
    }
    Ok(tokens)
}

pub fn read_token_file(path: &Path, vocab: usize) -> Result<Vec<u32>> {
    parse_tokens(&std::fs::read(path)?, vocab)
}

/// Splits a long stream into consecutive windows of at most `len` tokens.
pub fn windows(stream: &[u32], len: usize) -> Vec<Vec<u32>> {
    stream.chunks(len.max(1)).map(<[u32]>::to_vec).collect()
}
