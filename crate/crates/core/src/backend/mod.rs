//! Token scoring backends.
//!
//! Every backend answers one question: given a context of token ids (with
//! some positions optionally replaced by the mask token), what are the
//! next-token logits? The built-in [`ToyModel`] answers it locally; the
//! [`RemoteBackend`] forwards it to a logit server speaking the
//! newline-delimited JSON protocol in [`wire`].

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod remote;
pub mod toy;
pub mod vocab;
pub mod wire;

pub use remote::RemoteBackend;
pub use toy::{ToyModel, ToyModelConfig};
pub use vocab::{VocabSpec, Vocabulary};

/// Static facts about a backend, as reported by the `meta` op.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendMeta {
    pub vocab_size: usize,
    pub mask_id: u32,
    pub stop_ids: Vec<u32>,
    pub max_positions: usize,
}

impl BackendMeta {
    pub fn vocab_spec(&self) -> Result<VocabSpec> {
        VocabSpec::new(self.vocab_size, self.mask_id, self.stop_ids.iter().copied())
    }

    pub fn is_stop(&self, token: u32) -> bool {
        self.stop_ids.contains(&token)
    }

    /// Check a request against this backend's limits.
    pub fn validate(&self, req: &ScoreRequest<'_>) -> Result<()> {
        if req.tokens.is_empty() {
            return Err(Error::arg("context must contain at least one token"));
        }
        if req.tokens.len() > self.max_positions {
            return Err(Error::Capacity {
                len: req.tokens.len(),
                max: self.max_positions,
            });
        }
        if let Some(&bad) = req.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::arg(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        if let Some(&bad) = req.mask_positions.iter().find(|&&p| p >= req.tokens.len()) {
            return Err(Error::arg(format!(
                "mask index {bad} outside context of {} tokens",
                req.tokens.len()
            )));
        }
        if let Some(k) = req.top_k {
            if k == 0 || k > self.vocab_size {
                return Err(Error::arg(format!(
                    "top_k must lie in 1..={}, got {k}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreRequest<'a> {
    pub tokens: &'a [u32],
    /// Context indices to replace with the mask token before the forward pass.
    pub mask_positions: &'a [usize],
    pub want_attention: bool,
    pub top_k: Option<usize>,
}

impl<'a> ScoreRequest<'a> {
    pub fn new(tokens: &'a [u32]) -> Self {
        ScoreRequest {
            tokens,
            ..Default::default()
        }
    }

    pub fn masked(mut self, positions: &'a [usize]) -> Self {
        self.mask_positions = positions;
        self
    }

    pub fn with_attention(mut self, want: bool) -> Self {
        self.want_attention = want;
        self
    }

    pub fn top_k(mut self, k: Option<usize>) -> Self {
        self.top_k = k;
        self
    }
}

/// A next-token logit vector, either over the whole vocabulary or truncated
/// to its highest entries.
#[derive(Debug, Clone, PartialEq)]
pub enum Logits {
    Dense(Vec<f64>),
    /// `(id, logit)` pairs sorted by descending logit, ties by ascending id.
    TopK(Vec<(u32, f64)>),
}

impl Logits {
    pub fn len(&self) -> usize {
        match self {
            Logits::Dense(v) => v.len(),
            Logits::TopK(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Logit of `id`, or `None` when it was truncated away.
    pub fn get(&self, id: u32) -> Option<f64> {
        match self {
            Logits::Dense(v) => v.get(id as usize).copied(),
            Logits::TopK(p) => p.iter().find(|(i, _)| *i == id).map(|&(_, l)| l),
        }
    }

    /// `(id, logit)` pairs in storage order.
    pub fn pairs(&self) -> Vec<(u32, f64)> {
        match self {
            Logits::Dense(v) => v.iter().enumerate().map(|(i, &l)| (i as u32, l)).collect(),
            Logits::TopK(p) => p.clone(),
        }
    }

    /// Expand to a full vector of `size`; truncated entries become `-inf`.
    pub fn to_dense(&self, size: usize) -> Vec<f64> {
        match self {
            Logits::Dense(v) => v.clone(),
            Logits::TopK(p) => {
                let mut out = vec![f64::NEG_INFINITY; size];
                for &(i, l) in p {
                    out[i as usize] = l;
                }
                out
            }
        }
    }

    /// Highest-scoring id; ties resolve to the lowest id.
    pub fn argmax(&self) -> Option<u32> {
        match self {
            Logits::Dense(v) => argmax(v),
            Logits::TopK(p) => p
                .iter()
                .copied()
                .reduce(|best, cur| {
                    if cur.1 > best.1 || (cur.1 == best.1 && cur.0 < best.0) {
                        cur
                    } else {
                        best
                    }
                })
                .map(|(i, _)| i),
        }
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub logits: Logits,
    /// Last-layer attention of the final position, averaged over heads.
    pub attention: Option<Vec<f64>>,
}

/// One decoding step's scores.
#[derive(Debug, Clone, PartialEq)]
pub struct StepScore {
    pub original: Logits,
    pub masked: Option<Logits>,
    pub augmented: Option<Logits>,
    pub attention: Option<Vec<f64>>,
}

/// Differentiable access to a model's input embeddings, for sensitivity
/// analysis by finite differences.
pub trait EmbeddingModel: Sync {
    fn embed_dim(&self) -> usize;

    /// Per-position token embeddings for `tokens` (position terms excluded).
    fn token_embeddings(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>>;

    /// Next-token logits from explicit per-position token embeddings.
    fn logits_from_embeddings(&self, embeddings: &[Vec<f64>]) -> Result<Vec<f64>>;
}

pub trait Backend: Send + Sync {
    fn meta(&self) -> &BackendMeta;

    fn score(&self, req: &ScoreRequest<'_>) -> Result<Scored>;

    /// Surface strings for token ids, when the backend has them.
    fn vocabulary(&self) -> Option<&Vocabulary> {
        None
    }

    fn embedding_model(&self) -> Option<&dyn EmbeddingModel> {
        None
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn meta(&self) -> &BackendMeta {
        (**self).meta()
    }
    fn score(&self, req: &ScoreRequest<'_>) -> Result<Scored> {
        (**self).score(req)
    }
    fn vocabulary(&self) -> Option<&Vocabulary> {
        (**self).vocabulary()
    }
    fn embedding_model(&self) -> Option<&dyn EmbeddingModel> {
        (**self).embedding_model()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn meta(&self) -> &BackendMeta {
        (**self).meta()
    }
    fn score(&self, req: &ScoreRequest<'_>) -> Result<Scored> {
        (**self).score(req)
    }
    fn vocabulary(&self) -> Option<&Vocabulary> {
        (**self).vocabulary()
    }
    fn embedding_model(&self) -> Option<&dyn EmbeddingModel> {
        (**self).embedding_model()
    }
}

/// Wraps a backend and counts its score calls. Calls carrying a non-empty
/// mask set are tallied separately as masked passes.
#[derive(Debug)]
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
    masked_calls: AtomicUsize,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        CountingBackend {
            inner,
            calls: AtomicUsize::new(0),
            masked_calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn masked_calls(&self) -> usize {
        self.masked_calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.masked_calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn meta(&self) -> &BackendMeta {
        self.inner.meta()
    }

    fn score(&self, req: &ScoreRequest<'_>) -> Result<Scored> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if !req.mask_positions.is_empty() {
            self.masked_calls.fetch_add(1, Ordering::SeqCst);
        }
        self.inner.score(req)
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        self.inner.vocabulary()
    }

    fn embedding_model(&self) -> Option<&dyn EmbeddingModel> {
        self.inner.embedding_model()
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> Option<u32> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i as u32)
}

/// The `k` largest entries with their ids, descending; ties prefer lower ids.
pub fn top_k_pairs(values: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        values[b as usize]
            .total_cmp(&values[a as usize])
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.into_iter().map(|i| (i, values[i as usize])).collect()
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    logits.iter().map(|&l| l - log_z).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax(&[]), None);
        let sparse = Logits::TopK(vec![(5, 2.0), (2, 2.0), (7, 1.0)]);
        assert_eq!(sparse.argmax(), Some(2));
    }

    #[test]
    fn top_k_orders_by_value_then_id() {
        let v = [0.5, 2.0, 2.0, -1.0, 3.0];
        assert_eq!(top_k_pairs(&v, 3), vec![(4, 3.0), (1, 2.0), (2, 2.0)]);
        assert_eq!(top_k_pairs(&v, 5).len(), 5);
    }

    #[test]
    fn log_softmax_normalizes() {
        let ls = log_softmax(&[1.0, 2.0, 3.0]);
        let total: f64 = ls.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let p = softmax(&[1.0, 1.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn sparse_to_dense_fills_neg_inf() {
        let l = Logits::TopK(vec![(2, 1.5)]);
        assert_eq!(l.to_dense(3), vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 1.5]);
        assert_eq!(l.get(2), Some(1.5));
        assert_eq!(l.get(0), None);
    }

    #[test]
    fn meta_validation() {
        let meta = BackendMeta {
            vocab_size: 8,
            mask_id: 0,
            stop_ids: vec![1],
            max_positions: 4,
        };
        assert!(meta.validate(&ScoreRequest::new(&[2, 3])).is_ok());
        assert!(matches!(
            meta.validate(&ScoreRequest::new(&[2; 5])),
            Err(Error::Capacity { len: 5, max: 4 })
        ));
        assert!(meta.validate(&ScoreRequest::new(&[])).is_err());
        assert!(meta.validate(&ScoreRequest::new(&[9])).is_err());
        assert!(meta.validate(&ScoreRequest::new(&[2]).masked(&[1])).is_err());
        assert!(meta.validate(&ScoreRequest::new(&[2]).top_k(Some(0))).is_err());
        assert!(meta.validate(&ScoreRequest::new(&[2]).top_k(Some(9))).is_err());
    }
}
