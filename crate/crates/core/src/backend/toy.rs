//! A small deterministic decoder-only transformer.
//!
//! Parameters are drawn once from a seeded uniform(-0.1, 0.1) stream and
//! never trained. The model is pre-norm (parameter-free layer norm), uses
//! causal multi-head self-attention, a GELU feed-forward block of width
//! `4 * embed_dim`, learned absolute position embeddings and an untied
//! output projection. Everything is `f64`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use super::{top_k_pairs, Backend, BackendMeta, EmbeddingModel, Logits, ScoreRequest, Scored};
use crate::anchoring::substitute_mask;
use crate::error::{Error, Result};

const INIT_RANGE: f64 = 0.1;
const LN_EPS: f64 = 1e-5;
const FFN_MULT: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
}

impl ToyModelConfig {
    /// The configuration used by the reference examples and timing checks.
    pub fn reference() -> Self {
        ToyModelConfig {
            seed: 7,
            vocab_size: 16,
            embed_dim: 16,
            n_layers: 2,
            n_heads: 2,
            max_positions: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::arg("toy vocabulary needs at least 2 tokens"));
        }
        if self.embed_dim == 0 || self.n_heads == 0 || self.max_positions == 0 {
            return Err(Error::arg("model dimensions must be positive"));
        }
        if !(1..=4).contains(&self.n_layers) {
            return Err(Error::arg(format!(
                "n_layers must lie in 1..=4, got {}",
                self.n_layers
            )));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::arg(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Matrices are row-major `[in][out]`: `y[j] = sum_i x[i] * w[i][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Vec<Vec<f64>>,
    pub wk: Vec<Vec<f64>>,
    pub wv: Vec<Vec<f64>>,
    pub wo: Vec<Vec<f64>>,
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams {
    /// `[vocab][embed_dim]`
    pub token_embedding: Vec<Vec<f64>>,
    /// `[max_positions][embed_dim]`
    pub position_embedding: Vec<Vec<f64>>,
    pub layers: Vec<LayerParams>,
    /// `[vocab][embed_dim]`; logit `v` is the dot product with row `v`.
    pub unembedding: Vec<Vec<f64>>,
}

impl ToyParams {
    fn sample(cfg: &ToyModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut matrix = |rows: usize, cols: usize| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| {
                    (0..cols)
                        .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE))
                        .collect()
                })
                .collect()
        };
        let d = cfg.embed_dim;
        let hidden = FFN_MULT * d;
        let token_embedding = matrix(cfg.vocab_size, d);
        let position_embedding = matrix(cfg.max_positions, d);
        let layers = (0..cfg.n_layers)
            .map(|_| {
                let wq = matrix(d, d);
                let wk = matrix(d, d);
                let wv = matrix(d, d);
                let wo = matrix(d, d);
                let w1 = matrix(d, hidden);
                let b1 = matrix(1, hidden).remove(0);
                let w2 = matrix(hidden, d);
                let b2 = matrix(1, d).remove(0);
                LayerParams {
                    wq,
                    wk,
                    wv,
                    wo,
                    w1,
                    b1,
                    w2,
                    b2,
                }
            })
            .collect();
        let unembedding = matrix(cfg.vocab_size, d);
        ToyParams {
            token_embedding,
            position_embedding,
            layers,
            unembedding,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyModelConfig,
    params: ToyParams,
    vocab: Vocabulary,
    meta: BackendMeta,
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::toy(config.vocab_size)?;
        let meta = BackendMeta {
            vocab_size: config.vocab_size,
            mask_id: vocab.spec().mask_id,
            stop_ids: vocab.spec().stop_ids.iter().copied().collect(),
            max_positions: config.max_positions,
        };
        let params = ToyParams::sample(&config);
        Ok(ToyModel {
            config,
            params,
            vocab,
            meta,
        })
    }

    pub fn reference() -> Self {
        Self::new(ToyModelConfig::reference()).expect("reference config is valid")
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ToyParams {
        &self.params
    }

    /// Overwrite parameters (used to build analysis doubles).
    pub fn params_mut(&mut self) -> &mut ToyParams {
        &mut self.params
    }

    /// Forward pass over explicit token embeddings. Returns the final
    /// position's logits and, optionally, its last-layer attention row
    /// averaged over heads.
    fn forward(&self, embeddings: &[Vec<f64>], want_attention: bool) -> (Vec<f64>, Option<Vec<f64>>) {
        let n = embeddings.len();
        let d = self.config.embed_dim;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x: Vec<Vec<f64>> = embeddings
            .iter()
            .zip(&self.params.position_embedding)
            .map(|(e, p)| e.iter().zip(p).map(|(a, b)| a + b).collect())
            .collect();

        let mut last_attention = None;
        for (li, layer) in self.params.layers.iter().enumerate() {
            let is_last = li + 1 == self.params.layers.len();
            let h: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r)).collect();
            let q: Vec<Vec<f64>> = h.iter().map(|r| vec_mat(r, &layer.wq)).collect();
            let k: Vec<Vec<f64>> = h.iter().map(|r| vec_mat(r, &layer.wk)).collect();
            let v: Vec<Vec<f64>> = h.iter().map(|r| vec_mat(r, &layer.wv)).collect();

            let mut row_mean = if is_last && want_attention {
                Some(vec![0.0; n])
            } else {
                None
            };
            for p in 0..n {
                let mut concat = vec![0.0; d];
                for head in 0..heads {
                    let lo = head * dh;
                    let hi = lo + dh;
                    let scores: Vec<f64> = (0..=p)
                        .map(|j| dot(&q[p][lo..hi], &k[j][lo..hi]) * scale)
                        .collect();
                    let weights = super::softmax(&scores);
                    for (j, &w) in weights.iter().enumerate() {
                        for (c, &val) in concat[lo..hi].iter_mut().zip(&v[j][lo..hi]) {
                            *c += w * val;
                        }
                    }
                    if p + 1 == n {
                        if let Some(acc) = row_mean.as_mut() {
                            for (a, w) in acc.iter_mut().zip(&weights) {
                                *a += w;
                            }
                        }
                    }
                }
                let out = vec_mat(&concat, &layer.wo);
                for (xi, o) in x[p].iter_mut().zip(out) {
                    *xi += o;
                }
                let h2 = layer_norm(&x[p]);
                let mut hidden = vec_mat(&h2, &layer.w1);
                for (hv, b) in hidden.iter_mut().zip(&layer.b1) {
                    *hv = gelu(*hv + b);
                }
                let ff = vec_mat(&hidden, &layer.w2);
                for ((xi, f), b) in x[p].iter_mut().zip(ff).zip(&layer.b2) {
                    *xi += f + b;
                }
            }
            if let Some(mut acc) = row_mean {
                for a in &mut acc {
                    *a /= heads as f64;
                }
                last_attention = Some(acc);
            }
        }

        let fin = layer_norm(&x[n - 1]);
        let logits = self
            .params
            .unembedding
            .iter()
            .map(|row| dot(row, &fin))
            .collect();
        (logits, last_attention)
    }

    fn embed(&self, tokens: &[u32]) -> Vec<Vec<f64>> {
        tokens
            .iter()
            .map(|&t| self.params.token_embedding[t as usize].clone())
            .collect()
    }
}

impl Backend for ToyModel {
    fn meta(&self) -> &BackendMeta {
        &self.meta
    }

    fn score(&self, req: &ScoreRequest<'_>) -> Result<Scored> {
        self.meta.validate(req)?;
        let tokens = substitute_mask(req.tokens, req.mask_positions, self.meta.mask_id)?;
        let (logits, attention) = self.forward(&self.embed(&tokens), req.want_attention);
        let logits = match req.top_k {
            Some(k) => Logits::TopK(top_k_pairs(&logits, k)),
            None => Logits::Dense(logits),
        };
        Ok(Scored { logits, attention })
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        Some(&self.vocab)
    }

    fn embedding_model(&self) -> Option<&dyn EmbeddingModel> {
        Some(self)
    }
}

impl EmbeddingModel for ToyModel {
    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn token_embeddings(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        self.meta.validate(&ScoreRequest::new(tokens))?;
        Ok(self.embed(tokens))
    }

    fn logits_from_embeddings(&self, embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
        if embeddings.is_empty() {
            return Err(Error::arg("context must contain at least one position"));
        }
        if embeddings.len() > self.config.max_positions {
            return Err(Error::Capacity {
                len: embeddings.len(),
                max: self.config.max_positions,
            });
        }
        if embeddings.iter().any(|e| e.len() != self.config.embed_dim) {
            return Err(Error::arg("embedding width does not match the model"));
        }
        Ok(self.forward(embeddings, false).0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vec_mat(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; w.first().map_or(0, Vec::len)];
    for (xi, row) in x.iter().zip(w) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(s: Scored) -> Vec<f64> {
        match s.logits {
            Logits::Dense(v) => v,
            Logits::TopK(_) => panic!("expected dense logits"),
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = ToyModel::reference();
        let b = ToyModel::reference();
        assert_eq!(a.params(), b.params());
        let mut cfg = ToyModelConfig::reference();
        cfg.seed = 8;
        assert_ne!(ToyModel::new(cfg).unwrap().params(), a.params());
    }

    #[test]
    fn score_is_deterministic() {
        let m = ToyModel::reference();
        let a = dense(m.score(&ScoreRequest::new(&[4])).unwrap());
        let b = dense(m.score(&ScoreRequest::new(&[4])).unwrap());
        assert_eq!(a.len(), 16);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn mask_positions_equal_token_substitution() {
        let m = ToyModel::reference();
        let by_positions = dense(m.score(&ScoreRequest::new(&[4, 5]).masked(&[0, 1])).unwrap());
        let substituted = dense(m.score(&ScoreRequest::new(&[0, 0])).unwrap());
        assert_eq!(by_positions, substituted);
    }

    #[test]
    fn attention_row_is_a_distribution() {
        let m = ToyModel::reference();
        let s = m
            .score(&ScoreRequest::new(&[3, 5, 2, 9]).with_attention(true))
            .unwrap();
        let row = s.attention.unwrap();
        assert_eq!(row.len(), 4);
        assert!(row.iter().all(|&a| (0.0..=1.0).contains(&a)));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn top_k_keeps_largest_entries() {
        let m = ToyModel::reference();
        let full = dense(m.score(&ScoreRequest::new(&[3, 5])).unwrap());
        let top = m.score(&ScoreRequest::new(&[3, 5]).top_k(Some(4))).unwrap();
        let pairs = top.logits.pairs();
        assert_eq!(pairs.len(), 4);
        let threshold = pairs.last().unwrap().1;
        for &(id, l) in &pairs {
            assert_eq!(full[id as usize], l);
        }
        let above = full.iter().filter(|&&l| l > threshold).count();
        assert!(above < 4);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ToyModelConfig::reference();
        cfg.n_heads = 3;
        assert!(ToyModel::new(cfg.clone()).is_err());
        cfg.n_heads = 2;
        cfg.n_layers = 5;
        assert!(ToyModel::new(cfg).is_err());
    }

    #[test]
    fn capacity_error() {
        let mut cfg = ToyModelConfig::reference();
        cfg.max_positions = 3;
        let m = ToyModel::new(cfg).unwrap();
        assert!(matches!(
            m.score(&ScoreRequest::new(&[2, 2, 2, 2])),
            Err(Error::Capacity { len: 4, max: 3 })
        ));
    }
}
