//! Task corpora, test execution, gated anchoring, Pass@k and reports.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::anchoring::{resolve_anchors, Activation, AnchorResolution, AnchoringConfig, Markup};
use crate::backend::{Backend, CountingBackend, Vocabulary};
use crate::clock::Stopwatch;
use crate::decoding::{
    anchored_decode_tokens, beam_search_anchored, greedy_decode, DecodeLimits,
};
use crate::error::{Error, Result};

pub mod corpus;
pub mod sandbox;
pub mod toylang;

pub use corpus::{load_corpus, parse_corpus, write_corpus, EntryCheck, Task, TestCommand};
pub use sandbox::{run_tests, TestOutcome, TestResult};

/// Pass@k over per-task candidate outcomes (best candidate first).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassAtK {
    pub k: usize,
    pub value: f64,
    /// Tasks with fewer than `k` candidates, counted over what they have.
    pub undersized: usize,
}

/// Fraction of tasks with at least one passing candidate among their first `k`.
pub fn pass_at_k(outcomes: &[Vec<bool>], k: usize) -> Result<PassAtK> {
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    if outcomes.is_empty() {
        return Err(Error::arg("no tasks to score"));
    }
    let solved = outcomes
        .iter()
        .filter(|cands| cands.iter().take(k).any(|&p| p))
        .count();
    Ok(PassAtK {
        k,
        value: solved as f64 / outcomes.len() as f64,
        undersized: outcomes.iter().filter(|c| c.len() < k).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthBucket {
    Short,
    Medium,
    Long,
}

/// Nearest-rank percentile (`pct` in 1..=100) of ascending `sorted`.
fn nearest_rank(sorted: &[usize], pct: usize) -> usize {
    let rank = (pct * sorted.len()).div_ceil(100).max(1);
    sorted[rank - 1]
}

/// Split by the 33rd and 66th nearest-rank percentiles of `lengths`.
/// Values equal to a cut point fall in the lower bucket. Returns one
/// bucket per input, in input order.
pub fn bucket_by_length(lengths: &[usize]) -> Result<Vec<LengthBucket>> {
    if lengths.len() < 3 {
        return Err(Error::arg(format!(
            "length buckets need at least 3 tasks, got {}",
            lengths.len()
        )));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let (p33, p66) = (nearest_rank(&sorted, 33), nearest_rank(&sorted, 66));
    Ok(lengths
        .iter()
        .map(|&l| {
            if l <= p33 {
                LengthBucket::Short
            } else if l <= p66 {
                LengthBucket::Medium
            } else {
                LengthBucket::Long
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub config: AnchoringConfig,
    pub limits: DecodeLimits,
    /// Beam width; `None` decodes greedily (one candidate per task).
    pub beam_k: Option<usize>,
    pub timeout_ms: u64,
    pub workers: usize,
    pub markup: Markup,
}

impl EvalOptions {
    pub fn new(config: AnchoringConfig, limits: DecodeLimits) -> Self {
        EvalOptions {
            config,
            limits,
            beam_k: None,
            timeout_ms: 10_000,
            workers: 1,
            markup: Markup::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub tokens: Vec<u32>,
    pub program: String,
    pub passed: bool,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub candidates: Vec<CandidateResult>,
    pub score_calls: usize,
}

impl Attempt {
    fn outcomes(&self) -> Vec<bool> {
        self.candidates.iter().map(|c| c.passed).collect()
    }

    fn any_passed(&self) -> bool {
        self.candidates.iter().any(|c| c.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub id: String,
    pub difficulty: Option<String>,
    pub prompt_tokens: usize,
    pub bucket: Option<LengthBucket>,
    pub baseline: Option<Attempt>,
    pub anchored: Option<Attempt>,
    /// Final per-candidate outcomes the Pass@k figures are computed from.
    pub outcomes: Vec<bool>,
    /// Token count of the reported top candidate.
    pub generated_tokens: usize,
    pub error: Option<String>,
}

impl TaskReport {
    pub fn passed(&self) -> bool {
        self.outcomes.first().copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bucket: LengthBucket,
    pub count: usize,
    pub pass_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: AnchoringConfig,
    pub beam_k: Option<usize>,
    /// Sorted by task id.
    pub tasks: Vec<TaskReport>,
    pub pass_at: Vec<PassAtK>,
    /// Pass@1 of the unanchored attempt, when one ran for every task.
    pub baseline_pass_at_1: Option<f64>,
    pub buckets: Vec<BucketReport>,
    pub anchored_attempts: usize,
    pub wall_time_secs: f64,
}

impl EvalReport {
    pub fn pass_at_1(&self) -> f64 {
        self.pass_at.first().map_or(0.0, |p| p.value)
    }

    pub fn pass_at(&self, k: usize) -> Option<f64> {
        self.pass_at.iter().find(|p| p.k == k).map(|p| p.value)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "id,bucket,difficulty,prompt_tokens,generated_tokens,baseline_passed,anchored_run,passed")?;
        for t in &self.tasks {
            let bucket = t.bucket.map(|b| format!("{b:?}").to_lowercase()).unwrap_or_default();
            let baseline = t.baseline.as_ref().map(|a| a.candidates.first().is_some_and(|c| c.passed).to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                t.id,
                bucket,
                t.difficulty.as_deref().unwrap_or(""),
                t.prompt_tokens,
                t.generated_tokens,
                baseline,
                t.anchored.is_some(),
                t.passed()
            )?;
        }
        Ok(())
    }
}

struct Prepared {
    tokens: Vec<u32>,
    resolution: AnchorResolution,
}

fn prepare(task: &Task, vocab: &Vocabulary, markup: &Markup) -> Result<Prepared> {
    let prompt = markup.parse(&task.prompt)?;
    let (tokens, resolution) = resolve_anchors(&prompt, vocab)?;
    Ok(Prepared { tokens, resolution })
}

/// Generated program text: the candidate's tokens minus a trailing stop token.
fn program_text(backend: &dyn Backend, vocab: &Vocabulary, tokens: &[u32]) -> String {
    let body = match tokens.split_last() {
        Some((last, rest)) if backend.meta().is_stop(*last) => rest,
        _ => tokens,
    };
    vocab.decode(body)
}

fn attempt(
    backend: &dyn Backend,
    vocab: &Vocabulary,
    task: &Task,
    prep: &Prepared,
    config: &AnchoringConfig,
    opts: &EvalOptions,
) -> Result<Attempt> {
    let anchored = config.is_active() && !prep.resolution.is_empty();
    let counting = CountingBackend::new(backend);
    let candidates: Vec<Vec<u32>> = match opts.beam_k {
        Some(k) => {
            let cfg = if anchored { *config } else { AnchoringConfig::off() };
            beam_search_anchored(&counting, &prep.tokens, &prep.resolution, &cfg, k, &opts.limits)?
                .into_iter()
                .map(|b| b.tokens)
                .collect()
        }
        None if anchored => {
            vec![anchored_decode_tokens(&counting, &prep.tokens, &prep.resolution, config, &opts.limits)?.tokens()]
        }
        None => vec![greedy_decode(&counting, &prep.tokens, &opts.limits)?.tokens()],
    };
    let score_calls = counting.calls();
    let candidates = candidates
        .into_iter()
        .map(|tokens| {
            let program = program_text(backend, vocab, &tokens);
            let result = run_tests(&program, task, opts.timeout_ms)?;
            Ok(CandidateResult {
                tokens,
                program,
                passed: result.passed,
                timed_out: result.timed_out,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Attempt {
        candidates,
        score_calls,
    })
}

fn evaluate_task(backend: &dyn Backend, vocab: &Vocabulary, task: &Task, opts: &EvalOptions) -> TaskReport {
    let mut report = TaskReport {
        id: task.id.clone(),
        difficulty: task.difficulty.clone(),
        prompt_tokens: 0,
        bucket: None,
        baseline: None,
        anchored: None,
        outcomes: Vec::new(),
        generated_tokens: 0,
        error: None,
    };
    let result = (|| -> Result<()> {
        let prep = prepare(task, vocab, &opts.markup)?;
        report.prompt_tokens = prep.tokens.len();
        let config = &opts.config;
        match (config.is_active(), config.activation) {
            (true, Activation::Always) => {
                report.anchored = Some(attempt(backend, vocab, task, &prep, config, opts)?);
            }
            (true, Activation::OnTestFailure) => {
                let base = attempt(backend, vocab, task, &prep, &AnchoringConfig::off(), opts)?;
                let failed = !base.any_passed();
                report.baseline = Some(base);
                if failed {
                    report.anchored = Some(attempt(backend, vocab, task, &prep, config, opts)?);
                }
            }
            (false, _) => {
                report.baseline = Some(attempt(backend, vocab, task, &prep, config, opts)?);
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        report.error = Some(e.to_string());
    }

    // Candidate j counts as passing when either attempt's j-th candidate
    // passed, so the baseline answer is never lost.
    let base = report.baseline.as_ref().map(Attempt::outcomes).unwrap_or_default();
    let anch = report.anchored.as_ref().map(Attempt::outcomes).unwrap_or_default();
    let n = base.len().max(anch.len());
    report.outcomes = (0..n)
        .map(|j| base.get(j).copied().unwrap_or(false) || anch.get(j).copied().unwrap_or(false))
        .collect();
    let top = |a: &Option<Attempt>| a.as_ref().and_then(|a| a.candidates.first().cloned());
    let chosen = match (top(&report.anchored), top(&report.baseline)) {
        (Some(a), Some(b)) => Some(if a.passed && !b.passed { a } else { b }),
        (a, b) => a.or(b),
    };
    report.generated_tokens = chosen.map_or(0, |c| c.tokens.len());
    report
}

#[cfg(not(target_arch = "wasm32"))]
fn run_all(backend: &dyn Backend, vocab: &Vocabulary, corpus: &[Task], opts: &EvalOptions) -> Result<Vec<TaskReport>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Environment(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| {
        corpus
            .par_iter()
            .map(|t| evaluate_task(backend, vocab, t, opts))
            .collect()
    }))
}

#[cfg(target_arch = "wasm32")]
fn run_all(backend: &dyn Backend, vocab: &Vocabulary, corpus: &[Task], opts: &EvalOptions) -> Result<Vec<TaskReport>> {
    Ok(corpus.iter().map(|t| evaluate_task(backend, vocab, t, opts)).collect())
}

/// Decode, test and score every task of `corpus`.
///
/// With `Activation::OnTestFailure` each task first runs unanchored; the
/// anchored attempt happens only when no baseline candidate passes. With
/// `Activation::Always` only the anchored attempt runs. Per-task failures
/// are recorded in the report and do not stop the run.
pub fn evaluate(backend: &dyn Backend, corpus: &[Task], opts: &EvalOptions) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::arg("corpus is empty"));
    }
    opts.config.validate(backend.meta().vocab_size)?;
    let vocab = backend
        .vocabulary()
        .ok_or_else(|| Error::Unsupported("backend has no vocabulary to tokenize prompts".into()))?;
    let watch = Stopwatch::start();
    let mut tasks = run_all(backend, vocab, corpus, opts)?;
    tasks.sort_by(|a, b| a.id.cmp(&b.id));

    if tasks.len() >= 3 {
        let lengths: Vec<usize> = tasks.iter().map(|t| t.prompt_tokens).collect();
        for (t, b) in tasks.iter_mut().zip(bucket_by_length(&lengths)?) {
            t.bucket = Some(b);
        }
    }

    let outcomes: Vec<Vec<bool>> = tasks.iter().map(|t| t.outcomes.clone()).collect();
    let max_k = opts.beam_k.unwrap_or(1);
    let pass_at = (1..=max_k)
        .map(|k| pass_at_k(&outcomes, k))
        .collect::<Result<Vec<_>>>()?;

    let baseline_pass_at_1 = if tasks.iter().all(|t| t.baseline.is_some()) {
        let base: Vec<Vec<bool>> = tasks
            .iter()
            .map(|t| t.baseline.as_ref().map(Attempt::outcomes).unwrap_or_default())
            .collect();
        Some(pass_at_k(&base, 1)?.value)
    } else {
        None
    };

    let mut buckets = Vec::new();
    for bucket in [LengthBucket::Short, LengthBucket::Medium, LengthBucket::Long] {
        let members: Vec<&TaskReport> = tasks.iter().filter(|t| t.bucket == Some(bucket)).collect();
        if tasks.len() >= 3 {
            let passed = members.iter().filter(|t| t.passed()).count();
            buckets.push(BucketReport {
                bucket,
                count: members.len(),
                pass_at_1: if members.is_empty() { 0.0 } else { passed as f64 / members.len() as f64 },
            });
        }
    }

    Ok(EvalReport {
        config: opts.config,
        beam_k: opts.beam_k,
        anchored_attempts: tasks.iter().filter(|t| t.anchored.is_some()).count(),
        tasks,
        pass_at,
        baseline_pass_at_1,
        buckets,
        wall_time_secs: watch.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_at_k_examples() {
        let o = vec![vec![true], vec![false]];
        assert_eq!(pass_at_k(&o, 1).unwrap().value, 0.5);
        let none = vec![vec![false; 3]; 4];
        for k in 1..=3 {
            assert_eq!(pass_at_k(&none, k).unwrap().value, 0.0);
        }
        assert!(pass_at_k(&o, 0).is_err());
        let short = pass_at_k(&[vec![false, true]], 5).unwrap();
        assert_eq!(short.value, 1.0);
        assert_eq!(short.undersized, 1);
    }

    #[test]
    fn buckets_examples() {
        use LengthBucket::*;
        assert_eq!(bucket_by_length(&[1, 2, 3]).unwrap(), vec![Short, Medium, Long]);
        assert_eq!(bucket_by_length(&[3, 1, 2]).unwrap(), vec![Long, Short, Medium]);
        assert_eq!(bucket_by_length(&[5; 7]).unwrap(), vec![Short; 7]);
        assert!(bucket_by_length(&[1, 2]).is_err());
    }
}
