//! Attention and length instruments: the attention-to-prompt ratio and its
//! per-step curve, finite-difference input sensitivity, and pass/fail
//! length statistics.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backend::{argmax, Backend, EmbeddingModel};
use crate::decoding::{GenerationTrace, TraceRecord};
use crate::error::{Error, Result};

/// Tolerance on the total mass of an attention row.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;
/// Central-difference step for gradient attention.
pub const GRADIENT_STEP: f64 = 1e-3;

/// Share of attention mass on the first `prompt_length` positions:
/// `prompt / (prompt + generated)`.
pub fn attention_ratio(row: &[f64], prompt_length: usize) -> Result<f64> {
    if prompt_length > row.len() {
        return Err(Error::arg(format!(
            "prompt of {prompt_length} positions exceeds attention row of {}",
            row.len()
        )));
    }
    if row.iter().any(|&a| !(a >= 0.0)) {
        return Err(Error::arg("attention weights must be nonnegative"));
    }
    let prompt: f64 = row[..prompt_length].iter().sum();
    let generated: f64 = row[prompt_length..].iter().sum();
    let total = prompt + generated;
    if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::arg(format!(
            "attention row sums to {total}, not 1"
        )));
    }
    Ok(prompt / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DilutionCurve {
    pub alphas: Vec<f64>,
    pub prompt_length: usize,
}

impl DilutionCurve {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,alpha")?;
        for (i, a) in self.alphas.iter().enumerate() {
            writeln!(out, "{i},{a}")?;
        }
        Ok(())
    }
}

/// Per-step attention-to-prompt ratio of a decode captured with attention.
pub fn dilution_curve(trace: &GenerationTrace) -> Result<DilutionCurve> {
    let prompt_length = trace.prompt_tokens.len();
    let alphas = trace
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let row = step.score.attention.as_ref().ok_or_else(|| {
                Error::arg(format!("step {i} carries no attention row"))
            })?;
            attention_ratio(row, prompt_length)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DilutionCurve {
        alphas,
        prompt_length,
    })
}

/// Dilution curve from exported trace records (their `alpha` fields).
pub fn dilution_from_records(records: &[TraceRecord], prompt_length: usize) -> Result<DilutionCurve> {
    let alphas = records
        .iter()
        .map(|r| {
            r.alpha
                .ok_or_else(|| Error::arg(format!("step {} carries no alpha", r.step)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DilutionCurve {
        alphas,
        prompt_length,
    })
}

/// Input sensitivity of the next-token decision, per context position.
///
/// The scalar is the logit of the unperturbed argmax token. For each
/// position, every embedding coordinate is nudged by `±GRADIENT_STEP` and
/// the central differences are collected into a gradient whose Euclidean
/// norm is the score.
pub fn gradient_attention(backend: &dyn Backend, tokens: &[u32]) -> Result<Vec<f64>> {
    let model = backend.embedding_model().ok_or_else(|| {
        Error::Unsupported("gradient attention needs embedding access (toy backend only)".into())
    })?;
    gradient_attention_with_step(model, tokens, GRADIENT_STEP)
}

pub fn gradient_attention_with_step(
    model: &dyn EmbeddingModel,
    tokens: &[u32],
    delta: f64,
) -> Result<Vec<f64>> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::arg(format!("step must be positive, got {delta}")));
    }
    let base = model.token_embeddings(tokens)?;
    let target = argmax(&model.logits_from_embeddings(&base)?)
        .ok_or_else(|| Error::arg("model produced no logits"))? as usize;
    let mut scores = Vec::with_capacity(base.len());
    let mut work = base.clone();
    for i in 0..base.len() {
        let mut sq = 0.0;
        for d in 0..model.embed_dim() {
            let x = base[i][d];
            work[i][d] = x + delta;
            let up = model.logits_from_embeddings(&work)?[target];
            work[i][d] = x - delta;
            let down = model.logits_from_embeddings(&work)?[target];
            work[i][d] = x;
            let g = (up - down) / (2.0 * delta);
            sq += g * g;
        }
        scores.push(sq.sqrt());
    }
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LengthCell {
    pub count: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

impl LengthCell {
    fn from_lengths(mut lengths: Vec<usize>) -> Self {
        if lengths.is_empty() {
            return LengthCell::default();
        }
        lengths.sort_unstable();
        let n = lengths.len();
        let mean = lengths.iter().sum::<usize>() as f64 / n as f64;
        let median = if n % 2 == 1 {
            lengths[n / 2] as f64
        } else {
            (lengths[n / 2 - 1] + lengths[n / 2]) as f64 / 2.0
        };
        LengthCell {
            count: n,
            mean: Some(mean),
            median: Some(median),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLengths {
    pub group: String,
    pub passed: LengthCell,
    pub failed: LengthCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    /// In order of first appearance.
    pub groups: Vec<GroupLengths>,
    pub overall: GroupLengths,
}

/// One generation outcome for length statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthSample {
    pub tokens: usize,
    pub passed: bool,
    pub group: String,
}

pub fn length_stats(samples: &[LengthSample]) -> Result<LengthStats> {
    if samples.is_empty() {
        return Err(Error::arg("length statistics need at least one result"));
    }
    let mut order: Vec<&str> = Vec::new();
    for s in samples {
        if !order.contains(&s.group.as_str()) {
            order.push(&s.group);
        }
    }
    let cell = |group: Option<&str>, passed: bool| {
        LengthCell::from_lengths(
            samples
                .iter()
                .filter(|s| s.passed == passed && group.map_or(true, |g| s.group == g))
                .map(|s| s.tokens)
                .collect(),
        )
    };
    let groups = order
        .iter()
        .map(|&g| GroupLengths {
            group: g.to_string(),
            passed: cell(Some(g), true),
            failed: cell(Some(g), false),
        })
        .collect();
    Ok(LengthStats {
        groups,
        overall: GroupLengths {
            group: "overall".into(),
            passed: cell(None, true),
            failed: cell(None, false),
        },
    })
}

impl LengthStats {
    /// Rows `group,status,mean,median,count`; the overall aggregate last.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "group,status,mean,median,count")?;
        for g in self.groups.iter().chain(std::iter::once(&self.overall)) {
            for (status, c) in [("passed", &g.passed), ("failed", &g.failed)] {
                let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                writeln!(out, "{},{status},{},{},{}", g.group, fmt(c.mean), fmt(c.median), c.count)?;
            }
        }
        Ok(())
    }

    /// Mean lengths as a small text table, one column per group.
    pub fn render_table(&self) -> String {
        let columns: Vec<&GroupLengths> = self.groups.iter().chain(std::iter::once(&self.overall)).collect();
        let cell = |c: &LengthCell| c.mean.map_or_else(|| "-".to_string(), |m| format!("{m:.0}"));
        let mut rows = vec![std::iter::once(String::new())
            .chain(columns.iter().map(|g| g.group.clone()))
            .collect::<Vec<_>>()];
        rows.push(std::iter::once("Passed".to_string()).chain(columns.iter().map(|g| cell(&g.passed))).collect());
        rows.push(std::iter::once("Failed".to_string()).chain(columns.iter().map(|g| cell(&g.failed))).collect());
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in rows {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (v, w))| if i == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}
