use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::linalg::SeededRng;

use super::Batch;

/// A token stream split into a training prefix and a validation suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    tokens: Vec<usize>,
    vocab: usize,
    split: usize,
}

impl Corpus {
    pub fn new(tokens: Vec<usize>, vocab: usize, split: usize) -> Result<Self> {
        if let Some(&tok) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { token: tok, vocab });
        }
        if split == 0 || split >= tokens.len() {
            return Err(invalid(format!(
                "split {split} leaves an empty train or validation slice of {} tokens",
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            vocab,
            split,
        })
    }

    /// Holds out the last 10% of the stream for validation.
    pub fn with_default_split(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        let split = tokens.len() - tokens.len() / 10;
        Self::new(tokens, vocab, split)
    }

    /// Whitespace-separated integers.
    pub fn from_text(text: &str, vocab: usize) -> Result<Self> {
        let tokens = text
            .split_whitespace()
            .map(|w| {
                w.parse::<usize>()
                    .map_err(|e| invalid(format!("bad token {w:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_default_split(tokens, vocab)
    }

    pub fn load(path: &Path, vocab: usize) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, vocab)
    }

    pub fn to_text(&self) -> String {
        let words: Vec<String> = self.tokens.iter().map(usize::to_string).collect();
        words.join(" ") + "\n"
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn train(&self) -> &[usize] {
        &self.tokens[..self.split]
    }

    pub fn validation(&self) -> &[usize] {
        &self.tokens[self.split..]
    }

    /// Target positions in the validation slice with a full preceding context.
    pub fn validation_positions(&self, context_len: usize) -> Result<Vec<usize>> {
        let start = self.split.max(context_len);
        if start >= self.tokens.len() {
            return Err(invalid("validation slice shorter than the context length"));
        }
        Ok((start..self.tokens.len()).collect())
    }

    /// Examples whose targets sit at `positions`.
    pub fn batch_at(&self, positions: &[usize], context_len: usize) -> Batch {
        let mut contexts = Vec::with_capacity(positions.len() * context_len);
        for &p in positions {
            contexts.extend_from_slice(&self.tokens[p - context_len..p]);
        }
        Batch {
            contexts,
            targets: positions.iter().map(|&p| self.tokens[p]).collect(),
        }
    }

    /// Uniformly sampled training examples; contexts and targets stay inside
    /// the training prefix.
    pub fn sample_batch(
        &self,
        batch_size: usize,
        context_len: usize,
        rng: &mut SeededRng,
    ) -> Result<Batch> {
        if self.split <= context_len {
            return Err(invalid("training slice shorter than the context length"));
        }
        let span = self.split - context_len;
        let positions: Vec<usize> = (0..batch_size)
            .map(|_| context_len + rng.below(span))
            .collect();
        Ok(self.batch_at(&positions, context_len))
    }
}

/// Samples a stream from a random order-`order` Markov chain over `vocab`
/// symbols whose transition rows are Dirichlet(1) draws.
pub fn generate_markov_corpus(
    vocab: usize,
    length: usize,
    order: usize,
    rng: &mut SeededRng,
) -> Result<Corpus> {
    if vocab < 2 {
        return Err(invalid(format!(
            "vocabulary must hold at least 2 symbols, got {vocab}"
        )));
    }
    if length < 10 * vocab {
        return Err(invalid(format!(
            "corpus length {length} below 10 × vocab = {}",
            10 * vocab
        )));
    }
    let states = u32::try_from(order)
        .ok()
        .and_then(|o| vocab.checked_pow(o))
        .filter(|&s| s <= 1 << 22)
        .ok_or_else(|| {
            invalid(format!(
                "order {order} gives too many states for vocab {vocab}"
            ))
        })?;
    let mut table = vec![0.0; states * vocab];
    for row in table.chunks_mut(vocab) {
        for x in row.iter_mut() {
            *x = rng.exponential();
        }
        let sum: f64 = row.iter().sum();
        let mut acc = 0.0;
        for x in row.iter_mut() {
            acc += *x / sum;
            *x = acc;
        }
    }
    let mut tokens = Vec::with_capacity(length);
    for _ in 0..order.min(length) {
        tokens.push(rng.below(vocab));
    }
    while tokens.len() < length {
        let state = tokens[tokens.len() - order..]
            .iter()
            .fold(0, |s, &t| s * vocab + t);
        let cdf = &table[state * vocab..(state + 1) * vocab];
        let u = rng.next_f64();
        let next = cdf.partition_point(|&c| c <= u).min(vocab - 1);
        tokens.push(next);
    }
    Corpus::with_default_split(tokens, vocab)
}
