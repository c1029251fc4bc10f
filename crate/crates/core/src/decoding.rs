//! Autoregressive decoding loops.
//!
//! All loops are greedy over a total order: the highest logit wins and ties
//! go to the lowest token id. Beams tie-break on the lexicographically
//! smallest token sequence.

use std::cmp::Ordering;
use std::io::{BufRead, Write};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::attention_ratio;
use crate::anchoring::{
    build_masked_context, combine_truncated, resolve_anchors, AnchorMode, AnchorResolution,
    AnchoringConfig, PromptSpec,
};
use crate::backend::wire::{format_decimal, parse_decimal};
use crate::backend::{
    log_softmax, top_k_pairs, Backend, CountingBackend, Logits, ScoreRequest, StepScore,
};
use crate::clock::Stopwatch;
use crate::error::{Error, Result};

/// Vocabularies above this size store truncated vectors in traces.
pub const DENSE_STORAGE_LIMIT: usize = 512;
/// Entries kept per vector when traces store truncated vectors.
pub const DEFAULT_STORED_TOP_K: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeLimits {
    pub max_new_tokens: usize,
    /// Export the last-layer attention row of every original pass.
    pub capture_attention: bool,
}

impl DecodeLimits {
    pub fn new(max_new_tokens: usize) -> Self {
        DecodeLimits {
            max_new_tokens,
            capture_attention: false,
        }
    }

    pub fn with_attention(mut self) -> Self {
        self.capture_attention = true;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::arg("max_new_tokens must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    StopToken,
    LengthLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub token: u32,
    pub score: StepScore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub prompt_tokens: Vec<u32>,
    /// `None` for unanchored decodes.
    pub resolution: Option<AnchorResolution>,
    pub steps: Vec<TraceStep>,
    pub finished: FinishReason,
    pub wall_times: Vec<Duration>,
    /// Backend score calls issued by this decode.
    pub score_calls: usize,
}

impl GenerationTrace {
    fn new(prompt_tokens: &[u32], resolution: Option<AnchorResolution>) -> Self {
        GenerationTrace {
            prompt_tokens: prompt_tokens.to_vec(),
            resolution,
            steps: Vec::new(),
            finished: FinishReason::LengthLimit,
            wall_times: Vec::new(),
            score_calls: 0,
        }
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.token).collect()
    }

    pub fn total_time(&self) -> Duration {
        self.wall_times.iter().sum()
    }

    /// Attention-to-prompt ratio per step, when attention was captured.
    pub fn alphas(&self) -> Vec<Option<f64>> {
        let prompt_len = self.prompt_tokens.len();
        self.steps
            .iter()
            .map(|s| {
                s.score
                    .attention
                    .as_ref()
                    .and_then(|row| attention_ratio(row, prompt_len).ok())
            })
            .collect()
    }
}

/// Number of decoding steps that fit the backend's context window.
fn feasible_steps(backend: &dyn Backend, prompt_len: usize, limits: &DecodeLimits) -> Result<usize> {
    limits.validate()?;
    let max = backend.meta().max_positions;
    if prompt_len == 0 {
        return Err(Error::arg("prompt must contain at least one token"));
    }
    if prompt_len > max {
        return Err(Error::Capacity {
            len: prompt_len,
            max,
        });
    }
    Ok(limits.max_new_tokens.min(max - prompt_len + 1))
}

fn dense(logits: Logits) -> Result<Vec<f64>> {
    match logits {
        Logits::Dense(v) => Ok(v),
        Logits::TopK(_) => Err(Error::transport("backend returned truncated logits unasked", None)),
    }
}

/// Reduce a dense vector to trace storage form.
fn stored(values: Vec<f64>, keep: usize) -> Logits {
    if values.len() > DENSE_STORAGE_LIMIT {
        Logits::TopK(top_k_pairs(&values, keep.min(values.len())))
    } else {
        Logits::Dense(values)
    }
}

fn aborted(err: Error, trace: GenerationTrace) -> Error {
    Error::Aborted {
        source: Box::new(err),
        partial: Box::new(trace),
    }
}

/// Baseline greedy decoding: one score call per token, no masked pass.
pub fn greedy_decode(
    backend: &dyn Backend,
    prompt_tokens: &[u32],
    limits: &DecodeLimits,
) -> Result<GenerationTrace> {
    let steps = feasible_steps(backend, prompt_tokens.len(), limits)?;
    let mut trace = GenerationTrace::new(prompt_tokens, None);
    let mut context = prompt_tokens.to_vec();
    for _ in 0..steps {
        let watch = Stopwatch::start();
        let req = ScoreRequest::new(&context).with_attention(limits.capture_attention);
        trace.score_calls += 1;
        let scored = match backend.score(&req) {
            Ok(s) => s,
            Err(e) => return Err(aborted(e, trace)),
        };
        let original = match dense(scored.logits) {
            Ok(v) => v,
            Err(e) => return Err(aborted(e, trace)),
        };
        let token = crate::backend::argmax(&original).expect("non-empty vocabulary");
        trace.steps.push(TraceStep {
            token,
            score: StepScore {
                original: stored(original, DEFAULT_STORED_TOP_K),
                masked: None,
                augmented: None,
                attention: scored.attention,
            },
        });
        trace.wall_times.push(watch.elapsed());
        context.push(token);
        if backend.meta().is_stop(token) {
            trace.finished = FinishReason::StopToken;
            return Ok(trace);
        }
    }
    trace.finished = FinishReason::LengthLimit;
    Ok(trace)
}

/// Tokenize a marked-up prompt and decode with anchoring.
pub fn anchored_decode(
    backend: &dyn Backend,
    prompt: &PromptSpec,
    config: &AnchoringConfig,
    limits: &DecodeLimits,
) -> Result<GenerationTrace> {
    let vocab = backend
        .vocabulary()
        .ok_or_else(|| Error::Unsupported("backend has no vocabulary to tokenize prompts".into()))?;
    let (tokens, resolution) = resolve_anchors(prompt, vocab)?;
    anchored_decode_tokens(backend, &tokens, &resolution, config, limits)
}

/// One step's original/masked/augmented scores.
struct AnchoredStep {
    original: Logits,
    masked: Logits,
    augmented: Logits,
    attention: Option<Vec<f64>>,
}

fn anchored_step(
    backend: &dyn Backend,
    context: &[u32],
    resolution: &AnchorResolution,
    config: &AnchoringConfig,
    want_attention: bool,
    calls: &mut usize,
) -> Result<AnchoredStep> {
    let orig_req = ScoreRequest::new(context)
        .with_attention(want_attention)
        .top_k(config.top_k);
    *calls += 1;
    let scored = backend.score(&orig_req)?;
    // The backend substitutes the mask token at the anchored positions,
    // exactly as build_masked_context would.
    let masked_req = ScoreRequest::new(context).masked(&resolution.token_positions);
    *calls += 1;
    let masked = dense(backend.score(&masked_req)?.logits)?;

    let augmented = match (config.mode, &scored.logits) {
        (AnchorMode::Fixed { omega }, Logits::TopK(pairs)) => Logits::TopK(combine_truncated(
            pairs,
            |id| masked.get(id as usize).copied(),
            omega,
            pairs.len(),
        )?),
        (_, Logits::Dense(original)) => Logits::Dense(config.combine(original, &masked)?),
        (_, Logits::TopK(_)) => {
            return Err(Error::arg(
                "top-k truncation applies to fixed-strength anchoring only",
            ))
        }
    };
    Ok(AnchoredStep {
        original: scored.logits,
        masked: Logits::Dense(masked),
        augmented,
        attention: scored.attention,
    })
}

/// Anchored greedy decoding over pre-tokenized input. Each step scores the
/// context twice (as-is and with the anchored prompt positions masked) and
/// takes the argmax of the combined logits.
pub fn anchored_decode_tokens(
    backend: &dyn Backend,
    prompt_tokens: &[u32],
    resolution: &AnchorResolution,
    config: &AnchoringConfig,
    limits: &DecodeLimits,
) -> Result<GenerationTrace> {
    let meta = backend.meta();
    if !config.is_active() {
        return Err(Error::arg("anchored decoding needs an active anchoring mode"));
    }
    config.validate(meta.vocab_size)?;
    if resolution.is_empty() {
        return Err(Error::arg("no anchored tokens in the prompt"));
    }
    if resolution.prompt_len != prompt_tokens.len() {
        return Err(Error::arg(format!(
            "resolution covers a prompt of {} tokens, got {}",
            resolution.prompt_len,
            prompt_tokens.len()
        )));
    }
    let steps = feasible_steps(backend, prompt_tokens.len(), limits)?;
    let keep = config.top_k.unwrap_or(DEFAULT_STORED_TOP_K);
    let mut trace = GenerationTrace::new(prompt_tokens, Some(resolution.clone()));
    let mut context = prompt_tokens.to_vec();
    for _ in 0..steps {
        let watch = Stopwatch::start();
        let mut calls = 0;
        let step = anchored_step(
            backend,
            &context,
            resolution,
            config,
            limits.capture_attention,
            &mut calls,
        );
        trace.score_calls += calls;
        let step = match step {
            Ok(s) => s,
            Err(e) => return Err(aborted(e, trace)),
        };
        let token = step.augmented.argmax().expect("non-empty vocabulary");
        let score = match step.original {
            Logits::Dense(original) => StepScore {
                original: stored(original, keep),
                masked: Some(stored_like(&step.masked, meta.vocab_size, keep)),
                augmented: Some(match step.augmented {
                    Logits::Dense(v) => stored(v, keep),
                    sparse => sparse,
                }),
                attention: step.attention,
            },
            Logits::TopK(pairs) => {
                let masked_at: Vec<(u32, f64)> = pairs
                    .iter()
                    .map(|&(id, _)| (id, step.masked.get(id).unwrap_or(f64::NAN)))
                    .collect();
                StepScore {
                    original: Logits::TopK(pairs),
                    masked: Some(Logits::TopK(masked_at)),
                    augmented: Some(step.augmented),
                    attention: step.attention,
                }
            }
        };
        trace.steps.push(TraceStep { token, score });
        trace.wall_times.push(watch.elapsed());
        context.push(token);
        if meta.is_stop(token) {
            trace.finished = FinishReason::StopToken;
            return Ok(trace);
        }
    }
    trace.finished = FinishReason::LengthLimit;
    Ok(trace)
}

fn stored_like(masked: &Logits, vocab_size: usize, keep: usize) -> Logits {
    match masked {
        Logits::Dense(v) if vocab_size > DENSE_STORAGE_LIMIT => {
            Logits::TopK(top_k_pairs(v, keep.min(v.len())))
        }
        other => other.clone(),
    }
}

/// The masked counterpart of a prompt as plain tokens; decoding it greedily
/// is what anchoring with `omega = 0` reduces to.
pub fn masked_prompt(prompt_tokens: &[u32], resolution: &AnchorResolution, mask_id: u32) -> Result<Vec<u32>> {
    build_masked_context(prompt_tokens, resolution, mask_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamCandidate {
    /// Generated suffix (prompt excluded).
    pub tokens: Vec<u32>,
    /// Sum of original-distribution log-probabilities of `tokens`.
    pub score: f64,
    /// Ended on a stop token.
    pub finished: bool,
}

/// Best-first order: higher score, then lexicographically smaller tokens.
pub fn beam_order(a: &BeamCandidate, b: &BeamCandidate) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Hybrid anchored beam search.
///
/// Each live beam proposes the `beam_width` best tokens of its augmented
/// logits; every extension is scored with the log-probability of the
/// *original* distribution. Per step, the `beam_width` best non-stop
/// extensions stay live and stop-terminated extensions that rank within the
/// top `beam_width` of all extensions retire. Retired and surviving beams
/// compete on final score at the end.
///
/// With anchoring off this is ordinary beam search on original logits.
pub fn beam_search_anchored(
    backend: &dyn Backend,
    prompt_tokens: &[u32],
    resolution: &AnchorResolution,
    config: &AnchoringConfig,
    beam_width: usize,
    limits: &DecodeLimits,
) -> Result<Vec<BeamCandidate>> {
    let meta = backend.meta();
    if beam_width == 0 || beam_width > meta.vocab_size {
        return Err(Error::arg(format!(
            "beam width must lie in 1..={}, got {beam_width}",
            meta.vocab_size
        )));
    }
    config.validate(meta.vocab_size)?;
    if let Some(k) = config.top_k {
        if k < beam_width {
            return Err(Error::arg(format!(
                "top_k {k} is smaller than the beam width {beam_width}"
            )));
        }
    }
    if config.is_active() && resolution.is_empty() {
        return Err(Error::arg("no anchored tokens in the prompt"));
    }
    let steps = feasible_steps(backend, prompt_tokens.len(), limits)?;

    let mut live = vec![BeamCandidate {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut finished = Vec::new();
    for _ in 0..steps {
        if live.is_empty() {
            break;
        }
        let mut extensions = Vec::with_capacity(live.len() * beam_width);
        for beam in &live {
            let context: Vec<u32> = prompt_tokens.iter().chain(&beam.tokens).copied().collect();
            let original = dense(backend.score(&ScoreRequest::new(&context))?.logits)?;
            let candidates: Vec<(u32, f64)> = if config.is_active() {
                let masked = dense(
                    backend
                        .score(&ScoreRequest::new(&context).masked(&resolution.token_positions))?
                        .logits,
                )?;
                let augmented = match (config.mode, config.top_k) {
                    (AnchorMode::Fixed { omega }, Some(k)) => {
                        let mut pairs = combine_truncated(
                            &top_k_pairs(&original, k),
                            |id| masked.get(id as usize).copied(),
                            omega,
                            k,
                        )?;
                        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                        pairs
                    }
                    _ => top_k_pairs(&config.combine(&original, &masked)?, meta.vocab_size),
                };
                augmented.into_iter().take(beam_width).collect()
            } else {
                top_k_pairs(&original, beam_width)
            };
            let log_probs = log_softmax(&original);
            for (id, _) in candidates {
                let mut tokens = beam.tokens.clone();
                tokens.push(id);
                extensions.push(BeamCandidate {
                    tokens,
                    score: beam.score + log_probs[id as usize],
                    finished: meta.is_stop(id),
                });
            }
        }
        extensions.sort_by(beam_order);
        finished.extend(
            extensions
                .iter()
                .take(beam_width)
                .filter(|c| c.finished)
                .cloned(),
        );
        live = extensions
            .into_iter()
            .filter(|c| !c.finished)
            .take(beam_width)
            .collect();
    }
    finished.extend(live);
    finished.sort_by(beam_order);
    finished.truncate(beam_width);
    Ok(finished)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub baseline_tokens: usize,
    pub anchored_tokens: usize,
    pub baseline_calls: usize,
    pub anchored_calls: usize,
    pub baseline_secs: f64,
    pub anchored_secs: f64,
}

impl Overhead {
    pub fn baseline_tokens_per_sec(&self) -> f64 {
        self.baseline_tokens as f64 / self.baseline_secs
    }

    pub fn anchored_tokens_per_sec(&self) -> f64 {
        self.anchored_tokens as f64 / self.anchored_secs
    }

    /// Anchored wall time per token relative to baseline.
    pub fn slowdown(&self) -> f64 {
        self.baseline_tokens_per_sec() / self.anchored_tokens_per_sec()
    }
}

/// Run a baseline and an anchored decode of the same prompt and report
/// throughput and call counts.
pub fn measure_overhead(
    backend: &dyn Backend,
    prompt_tokens: &[u32],
    resolution: &AnchorResolution,
    config: &AnchoringConfig,
    limits: &DecodeLimits,
) -> Result<Overhead> {
    let counting = CountingBackend::new(backend);
    let watch = Stopwatch::start();
    let base = greedy_decode(&counting, prompt_tokens, limits)?;
    let baseline_secs = watch.elapsed().as_secs_f64();
    let baseline_calls = counting.calls();
    counting.reset();
    let watch = Stopwatch::start();
    let anchored = anchored_decode_tokens(&counting, prompt_tokens, resolution, config, limits)?;
    let anchored_secs = watch.elapsed().as_secs_f64();
    Ok(Overhead {
        baseline_tokens: base.steps.len(),
        anchored_tokens: anchored.steps.len(),
        baseline_calls,
        anchored_calls: counting.calls(),
        baseline_secs,
        anchored_secs,
    })
}

/// One line of an exported trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub token: u32,
    pub orig: Logits,
    pub masked: Option<Logits>,
    pub aug: Option<Logits>,
    pub alpha: Option<f64>,
}

fn logits_to_json(l: &Logits) -> Value {
    match l {
        Logits::Dense(v) => Value::Array(v.iter().map(|&x| Value::String(format_decimal(x))).collect()),
        Logits::TopK(p) => Value::Array(
            p.iter()
                .map(|&(id, x)| json!([id.to_string(), format_decimal(x)]))
                .collect(),
        ),
    }
}

fn logits_from_json(v: &Value) -> Option<Logits> {
    let items = v.as_array()?;
    if items.iter().all(Value::is_string) {
        return items
            .iter()
            .map(|x| x.as_str().and_then(parse_decimal))
            .collect::<Option<Vec<_>>>()
            .map(Logits::Dense);
    }
    items
        .iter()
        .map(|pair| {
            let pair = pair.as_array().filter(|p| p.len() == 2)?;
            Some((pair[0].as_str()?.parse().ok()?, parse_decimal(pair[1].as_str()?)?))
        })
        .collect::<Option<Vec<_>>>()
        .map(Logits::TopK)
}

impl TraceRecord {
    pub fn to_json(&self) -> Value {
        json!({
            "step": self.step,
            "token": self.token,
            "orig": logits_to_json(&self.orig),
            "masked": self.masked.as_ref().map(logits_to_json),
            "aug": self.aug.as_ref().map(logits_to_json),
            "alpha": self.alpha,
        })
    }

    pub fn from_json(v: &Value) -> Option<Self> {
        let opt = |key: &str| match v.get(key) {
            None | Some(Value::Null) => Some(None),
            Some(x) => logits_from_json(x).map(Some),
        };
        Some(TraceRecord {
            step: usize::try_from(v.get("step")?.as_u64()?).ok()?,
            token: u32::try_from(v.get("token")?.as_u64()?).ok()?,
            orig: logits_from_json(v.get("orig")?)?,
            masked: opt("masked")?,
            aug: opt("aug")?,
            alpha: match v.get("alpha") {
                None | Some(Value::Null) => None,
                Some(a) => Some(a.as_f64()?),
            },
        })
    }
}

impl GenerationTrace {
    pub fn records(&self) -> Vec<TraceRecord> {
        self.steps
            .iter()
            .zip(self.alphas())
            .enumerate()
            .map(|(i, (s, alpha))| TraceRecord {
                step: i,
                token: s.token,
                orig: s.score.original.clone(),
                masked: s.score.masked.clone(),
                aug: s.score.augmented.clone(),
                alpha,
            })
            .collect()
    }

    /// Newline-delimited JSON, one step per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for rec in self.records() {
            serde_json::to_writer(&mut out, &rec.to_json())?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn read_trace_jsonl<R: BufRead>(input: R, name: &str) -> Result<Vec<TraceRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: name.to_string(),
            line: i + 1,
            message,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        records.push(TraceRecord::from_json(&value).ok_or_else(|| parse_err("malformed trace record".into()))?);
    }
    Ok(records)
}
