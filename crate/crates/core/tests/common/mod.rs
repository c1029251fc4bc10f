//! Independent oracles and test doubles shared by the integration tests.
//!
//! Nothing here calls into the library's arithmetic: forward passes,
//! softmaxes and rankings are re-derived from scratch so the tests compare
//! two implementations rather than one implementation with itself.

#![allow(dead_code)]

use std::collections::BTreeMap;

use anchored_decoding::backend::toy::ToyParams;
use anchored_decoding::backend::{
    Backend, BackendMeta, EmbeddingModel, Logits, ScoreRequest, Scored, ToyModel, ToyModelConfig, Vocabulary,
};
use anchored_decoding::Result;
use rand::Rng;

pub fn dense(logits: &Logits) -> Vec<f64> {
    match logits {
        Logits::Dense(v) => v.clone(),
        Logits::TopK(_) => panic!("expected dense logits"),
    }
}

// ---------------------------------------------------------------------------
// Straight-line forward pass

fn matmul_rows(x: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = w[0].len();
    x.iter()
        .map(|row| {
            (0..cols)
                .map(|j| {
                    let mut acc = 0.0;
                    for i in 0..row.len() {
                        acc += row[i] * w[i][j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn norm_row(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    x.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect()
}

fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn softmax_row(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Logits at the last position plus the head-averaged last-layer attention
/// row, computed with full-matrix operations.
pub fn forward_oracle(params: &ToyParams, cfg: &ToyModelConfig, tokens: &[u32]) -> (Vec<f64>, Vec<f64>) {
    let n = tokens.len();
    let d = cfg.embed_dim;
    let dh = d / cfg.n_heads;
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|p| {
            (0..d)
                .map(|j| params.token_embedding[tokens[p] as usize][j] + params.position_embedding[p][j])
                .collect()
        })
        .collect();
    let mut row = vec![0.0; n];
    for (li, layer) in params.layers.iter().enumerate() {
        let h: Vec<Vec<f64>> = x.iter().map(|r| norm_row(r)).collect();
        let q = matmul_rows(&h, &layer.wq);
        let k = matmul_rows(&h, &layer.wk);
        let v = matmul_rows(&h, &layer.wv);
        let mut ctx = vec![vec![0.0; d]; n];
        for head in 0..cfg.n_heads {
            let off = head * dh;
            for p in 0..n {
                let mut s = Vec::new();
                for j in 0..=p {
                    let mut dotp = 0.0;
                    for c in 0..dh {
                        dotp += q[p][off + c] * k[j][off + c];
                    }
                    s.push(dotp / (dh as f64).sqrt());
                }
                let a = softmax_row(&s);
                for j in 0..=p {
                    for c in 0..dh {
                        ctx[p][off + c] += a[j] * v[j][off + c];
                    }
                }
                if li + 1 == params.layers.len() && p + 1 == n {
                    for j in 0..=p {
                        row[j] += a[j] / cfg.n_heads as f64;
                    }
                }
            }
        }
        let attn_out = matmul_rows(&ctx, &layer.wo);
        for p in 0..n {
            for j in 0..d {
                x[p][j] += attn_out[p][j];
            }
        }
        let h2: Vec<Vec<f64>> = x.iter().map(|r| norm_row(r)).collect();
        let mut hid = matmul_rows(&h2, &layer.w1);
        for r in &mut hid {
            for (j, val) in r.iter_mut().enumerate() {
                *val = gelu_tanh(*val + layer.b1[j]);
            }
        }
        let ff = matmul_rows(&hid, &layer.w2);
        for p in 0..n {
            for j in 0..d {
                x[p][j] += ff[p][j] + layer.b2[j];
            }
        }
    }
    let last = norm_row(&x[n - 1]);
    let logits = params
        .unembedding
        .iter()
        .map(|u| u.iter().zip(&last).map(|(a, b)| a * b).sum())
        .collect();
    (logits, row)
}

// ---------------------------------------------------------------------------
// Small numeric oracles

pub fn oracle_argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best as u32
}

pub fn oracle_log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// Ids of the `k` largest values, ties to the smaller id.
pub fn oracle_top_ids(v: &[f64], k: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..v.len() as u32).collect();
    ids.sort_by(|&a, &b| v[b as usize].partial_cmp(&v[a as usize]).unwrap().then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

pub fn random_config(rng: &mut impl Rng) -> ToyModelConfig {
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    ToyModelConfig {
        seed: rng.gen(),
        vocab_size: rng.gen_range(8..=64),
        embed_dim: heads * rng.gen_range(2..=4),
        n_layers: rng.gen_range(1..=2),
        n_heads: heads,
        max_positions: 64,
    }
}

/// Random prompt tokens avoiding the mask and stop ids (0 and 1).
pub fn random_prompt(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(2..vocab as u32)).collect()
}

/// Non-empty random subset of `0..len`, ascending.
pub fn random_positions(rng: &mut impl Rng, len: usize) -> Vec<usize> {
    loop {
        let p: Vec<usize> = (0..len).filter(|_| rng.gen_bool(0.3)).collect();
        if !p.is_empty() {
            return p;
        }
    }
}

// ---------------------------------------------------------------------------
// Exhaustive beam oracle

#[derive(Debug, Clone, PartialEq)]
pub struct Hyp {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub finished: bool,
}

fn hyp_order(a: &Hyp, b: &Hyp) -> std::cmp::Ordering {
    b.score.partial_cmp(&a.score).unwrap().then_with(|| a.tokens.cmp(&b.tokens))
}

/// Every node of the candidate tree, keyed by its generated prefix. A child
/// is any of the `width` best ids of `omega*orig + (1-omega)*masked` at its
/// parent; its score adds the original log-probability.
pub struct CandidateTree {
    pub children: BTreeMap<Vec<u32>, Vec<Hyp>>,
    pub leaves: Vec<Hyp>,
}

pub fn candidate_tree(
    model: &ToyModel,
    prompt: &[u32],
    anchored: &[usize],
    omega: Option<f64>,
    width: usize,
    steps: usize,
) -> CandidateTree {
    let stop = model.meta().stop_ids.clone();
    let mask = model.meta().mask_id;
    let mut children = BTreeMap::new();
    let mut leaves = Vec::new();
    let mut frontier = vec![Hyp {
        tokens: vec![],
        score: 0.0,
        finished: false,
    }];
    for depth in 0..steps {
        let mut next = Vec::new();
        for h in frontier {
            let ctx: Vec<u32> = prompt.iter().chain(&h.tokens).copied().collect();
            let orig = forward_oracle(model.params(), model.config(), &ctx).0;
            let ranking = match omega {
                Some(w) => {
                    let mut masked_ctx = ctx.clone();
                    for &p in anchored {
                        masked_ctx[p] = mask;
                    }
                    let m = forward_oracle(model.params(), model.config(), &masked_ctx).0;
                    orig.iter().zip(&m).map(|(a, b)| w * a + (1.0 - w) * b).collect()
                }
                None => orig.clone(),
            };
            let lp = oracle_log_softmax(&orig);
            let kids: Vec<Hyp> = oracle_top_ids(&ranking, width)
                .into_iter()
                .map(|id| {
                    let mut t = h.tokens.clone();
                    t.push(id);
                    Hyp {
                        tokens: t,
                        score: h.score + lp[id as usize],
                        finished: stop.contains(&id),
                    }
                })
                .collect();
            for k in &kids {
                if k.finished || depth + 1 == steps {
                    leaves.push(k.clone());
                } else {
                    next.push(k.clone());
                }
            }
            children.insert(h.tokens.clone(), kids);
        }
        frontier = next;
    }
    CandidateTree { children, leaves }
}

impl CandidateTree {
    /// Level-by-level selection over the enumerated tree: at each depth the
    /// `width` best extensions of the surviving prefixes are kept, and
    /// stop-terminated ones among them retire.
    pub fn beam_select(&self, width: usize) -> Vec<Hyp> {
        let mut live = vec![Vec::<u32>::new()];
        let mut done: Vec<Hyp> = Vec::new();
        let mut last_live: Vec<Hyp> = Vec::new();
        loop {
            let mut ext: Vec<Hyp> = live
                .iter()
                .filter_map(|p| self.children.get(p))
                .flatten()
                .cloned()
                .collect();
            if ext.is_empty() {
                break;
            }
            ext.sort_by(hyp_order);
            done.extend(ext.iter().take(width).filter(|h| h.finished).cloned());
            last_live = ext.into_iter().filter(|h| !h.finished).take(width).collect();
            live = last_live.iter().map(|h| h.tokens.clone()).collect();
        }
        done.extend(last_live);
        done.sort_by(hyp_order);
        done.truncate(width);
        done
    }

    /// The `width` best complete hypotheses of the whole tree.
    pub fn global_best(&self, width: usize) -> Vec<Hyp> {
        let mut all = self.leaves.clone();
        all.sort_by(hyp_order);
        all.truncate(width);
        all
    }
}

// ---------------------------------------------------------------------------
// Linear probe: logits = W · sum_i(weight_i * e_i)

pub struct LinearProbe {
    pub table: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    /// Per-position multiplier; 0 makes a position dead.
    pub position_gain: Vec<f64>,
}

impl LinearProbe {
    pub fn random(rng: &mut impl Rng, vocab: usize, dim: usize, positions: usize) -> Self {
        let mut m = |r: usize, c: usize| -> Vec<Vec<f64>> {
            (0..r).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        LinearProbe {
            table: m(vocab, dim),
            w: m(vocab, dim),
            position_gain: vec![1.0; positions],
        }
    }

    pub fn logits(&self, tokens: &[u32]) -> Vec<f64> {
        self.logits_from_embeddings(&self.token_embeddings(tokens).unwrap()).unwrap()
    }
}

impl EmbeddingModel for LinearProbe {
    fn embed_dim(&self) -> usize {
        self.table[0].len()
    }

    fn token_embeddings(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        Ok(tokens.iter().map(|&t| self.table[t as usize].clone()).collect())
    }

    fn logits_from_embeddings(&self, e: &[Vec<f64>]) -> Result<Vec<f64>> {
        let d = self.embed_dim();
        let mut sum = vec![0.0; d];
        for (i, row) in e.iter().enumerate() {
            for j in 0..d {
                sum[j] += self.position_gain[i] * row[j];
            }
        }
        Ok(self.w.iter().map(|r| r.iter().zip(&sum).map(|(a, b)| a * b).sum()).collect())
    }
}

// ---------------------------------------------------------------------------
// Scripted backend

/// A backend with fully predictable rankings, over the toy vocabulary.
///
/// On the prompt (no generated tokens yet) the first ten context tokens are
/// ranked in order: the token at context index `i` gets logit `10 - i`, all
/// other ids `-100`. A masked position contributes the mask id instead, so
/// masking an anchored token removes it from the ranking and anchoring
/// pushes it to the top. After one generated token the stop token wins.
pub struct ScriptBackend {
    meta: BackendMeta,
    vocab: Vocabulary,
}

impl ScriptBackend {
    pub fn new() -> Self {
        let vocab = Vocabulary::toy(64).unwrap();
        ScriptBackend {
            meta: BackendMeta {
                vocab_size: 64,
                mask_id: 0,
                stop_ids: vec![1],
                max_positions: 128,
            },
            vocab,
        }
    }

    /// Prompt length is inferred from the context: the script treats every
    /// context whose last token is not a candidate char as "first step".
    fn logits(&self, ctx: &[u32], prompt_len: usize) -> Vec<f64> {
        let mut out = vec![-100.0; 64];
        if ctx.len() > prompt_len {
            out[1] = 0.0;
            return out;
        }
        for (i, &t) in ctx.iter().take(10).enumerate() {
            if out[t as usize] == -100.0 {
                out[t as usize] = 10.0 - i as f64;
            }
        }
        out
    }
}

impl Default for ScriptBackend {
    fn default() -> Self {
        Self::new()
    }
}

/// Every scripted prompt ends with this separator; the script uses it to
/// tell prompt contexts from continuations.
pub const SCRIPT_END: char = '.';

impl Backend for ScriptBackend {
    fn meta(&self) -> &BackendMeta {
        &self.meta
    }

    fn score(&self, req: &ScoreRequest<'_>) -> Result<Scored> {
        self.meta.validate(req)?;
        let end = self.vocab.id_of(&SCRIPT_END.to_string()).unwrap();
        let prompt_len = req.tokens.iter().position(|&t| t == end).map_or(req.tokens.len(), |p| p + 1);
        let mut ctx = req.tokens.to_vec();
        for &p in req.mask_positions {
            ctx[p] = self.meta.mask_id;
        }
        Ok(Scored {
            logits: Logits::Dense(self.logits(&ctx, prompt_len)),
            attention: None,
        })
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        Some(&self.vocab)
    }
}
