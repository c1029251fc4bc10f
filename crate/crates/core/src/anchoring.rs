//! Anchored spans and augmented logits.
//!
//! A prompt is split into plain and anchored segments. Decoding scores the
//! context twice, once as-is and once with the anchored tokens replaced by
//! the mask token, and mixes the two logit vectors:
//!
//! ```text
//! augmented = omega * original + (1 - omega) * masked
//!           = original + (omega - 1) * (original - masked)
//! ```
//!
//! `omega = 1` reproduces the unmodified model, `omega = 0` the model that
//! never saw the anchored text, and `omega > 1` amplifies its influence.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::backend::{softmax, Vocabulary};
use crate::error::{Error, Result};

pub const DEFAULT_OPEN: &str = "⟦";
pub const DEFAULT_CLOSE: &str = "⟧";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    pub anchored: bool,
}

/// A prompt as an ordered list of plain and anchored segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub segments: Vec<Segment>,
}

impl PromptSpec {
    pub fn new(segments: impl IntoIterator<Item = (impl Into<String>, bool)>) -> Result<Self> {
        let segments: Vec<Segment> = segments
            .into_iter()
            .map(|(text, anchored)| Segment {
                text: text.into(),
                anchored,
            })
            .collect();
        if segments.is_empty() {
            return Err(Error::arg("a prompt needs at least one segment"));
        }
        Ok(PromptSpec { segments })
    }

    /// A prompt with nothing anchored.
    pub fn plain(text: impl Into<String>) -> Self {
        PromptSpec {
            segments: vec![Segment {
                text: text.into(),
                anchored: false,
            }],
        }
    }

    pub fn text(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn has_anchor(&self) -> bool {
        self.segments.iter().any(|s| s.anchored && !s.text.is_empty())
    }
}

/// Delimiters for anchored spans in prompt strings. A doubled delimiter
/// stands for the delimiter text itself.
///
/// Runs of delimiters are read as a whole. In a run of `n` opening
/// delimiters outside a span, `n / 2` are literal and an odd one opens a
/// span after them; in a run of `n` closing delimiters inside a span, an odd
/// one closes the span first and the remaining pairs are literal text after
/// it. Consequently an anchored span cannot begin with the opening
/// delimiter or end with the closing one; [`Markup::render`] rejects such
/// prompts (choose other delimiters for them).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Markup {
    pub open: String,
    pub close: String,
}

impl Default for Markup {
    fn default() -> Self {
        Markup {
            open: DEFAULT_OPEN.into(),
            close: DEFAULT_CLOSE.into(),
        }
    }
}

/// Number of consecutive copies of `delim` at the start of `s`.
fn run_length(s: &str, delim: &str) -> usize {
    let mut n = 0;
    let mut rest = s;
    while let Some(after) = rest.strip_prefix(delim) {
        n += 1;
        rest = after;
    }
    n
}

impl Markup {
    pub fn new(open: impl Into<String>, close: impl Into<String>) -> Result<Self> {
        let (open, close) = (open.into(), close.into());
        if open.is_empty() || close.is_empty() || open.contains(&close) || close.contains(&open) {
            return Err(Error::arg(
                "anchor delimiters must be non-empty and neither may contain the other",
            ));
        }
        Ok(Markup { open, close })
    }

    pub fn parse(&self, text: &str) -> Result<PromptSpec> {
        let mut segments = Vec::new();
        let mut current = String::new();
        let mut anchored = false;
        let mut rest = text;
        let flush = |segments: &mut Vec<Segment>, current: &mut String, anchored: bool| {
            if !current.is_empty() {
                segments.push(Segment {
                    text: std::mem::take(current),
                    anchored,
                });
            }
        };
        while !rest.is_empty() {
            let opens = run_length(rest, &self.open);
            let closes = run_length(rest, &self.close);
            if opens > 0 {
                rest = &rest[opens * self.open.len()..];
                current.push_str(&self.open.repeat(opens / 2));
                if opens % 2 == 1 {
                    if anchored {
                        return Err(Error::arg(format!(
                            "nested {:?} inside an anchored span",
                            self.open
                        )));
                    }
                    flush(&mut segments, &mut current, false);
                    anchored = true;
                }
            } else if closes > 0 {
                rest = &rest[closes * self.close.len()..];
                if closes % 2 == 1 {
                    if !anchored {
                        return Err(Error::arg(format!(
                            "{:?} without a matching {:?}",
                            self.close, self.open
                        )));
                    }
                    flush(&mut segments, &mut current, true);
                    anchored = false;
                }
                current.push_str(&self.close.repeat(closes / 2));
            } else {
                let c = rest.chars().next().expect("non-empty");
                current.push(c);
                rest = &rest[c.len_utf8()..];
            }
        }
        if anchored {
            return Err(Error::arg(format!("unterminated {:?}", self.open)));
        }
        flush(&mut segments, &mut current, false);
        if segments.is_empty() {
            return Err(Error::arg("empty prompt"));
        }
        Ok(PromptSpec { segments })
    }

    /// Inverse of [`Markup::parse`] up to merging of adjacent plain segments.
    pub fn render(&self, prompt: &PromptSpec) -> Result<String> {
        let escape = |s: &str| {
            s.replace(&self.open, &self.open.repeat(2))
                .replace(&self.close, &self.close.repeat(2))
        };
        let mut out = String::new();
        for seg in &prompt.segments {
            if seg.anchored {
                if seg.text.starts_with(&self.open) || seg.text.ends_with(&self.close) {
                    return Err(Error::arg(format!(
                        "anchored text {:?} cannot start with {:?} or end with {:?}; use other delimiters",
                        seg.text, self.open, self.close
                    )));
                }
                out.push_str(&self.open);
                out.push_str(&escape(&seg.text));
                out.push_str(&self.close);
            } else {
                out.push_str(&escape(&seg.text));
            }
        }
        Ok(out)
    }
}

/// Context indices covered by anchored segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorResolution {
    /// Sorted, unique, all `< prompt_len`.
    pub token_positions: Vec<usize>,
    pub prompt_len: usize,
}

impl AnchorResolution {
    pub fn new(mut token_positions: Vec<usize>, prompt_len: usize) -> Result<Self> {
        token_positions.sort_unstable();
        token_positions.dedup();
        if let Some(&p) = token_positions.last() {
            if p >= prompt_len {
                return Err(Error::arg(format!(
                    "anchor position {p} outside prompt of {prompt_len} tokens"
                )));
            }
        }
        Ok(AnchorResolution {
            token_positions,
            prompt_len,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.token_positions.is_empty()
    }
}

/// Tokenize a prompt segment by segment and record where the anchored
/// segments landed.
pub fn resolve_anchors(prompt: &PromptSpec, vocab: &Vocabulary) -> Result<(Vec<u32>, AnchorResolution)> {
    if prompt.segments.is_empty() {
        return Err(Error::arg("a prompt needs at least one segment"));
    }
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    for seg in &prompt.segments {
        let ids = vocab.encode(&seg.text)?;
        if seg.anchored {
            positions.extend(tokens.len()..tokens.len() + ids.len());
        }
        tokens.extend(ids);
    }
    let len = tokens.len();
    Ok((tokens, AnchorResolution::new(positions, len)?))
}

/// Replace `positions` in `tokens` with `mask_id`.
pub fn substitute_mask(tokens: &[u32], positions: &[usize], mask_id: u32) -> Result<Vec<u32>> {
    let mut out = tokens.to_vec();
    for &p in positions {
        let slot = out.get_mut(p).ok_or_else(|| {
            Error::arg(format!(
                "mask index {p} outside context of {} tokens",
                tokens.len()
            ))
        })?;
        *slot = mask_id;
    }
    Ok(out)
}

/// The masked counterpart of a decoding context: anchored prompt positions
/// become `mask_id`, generated tokens are untouched.
pub fn build_masked_context(
    full_context: &[u32],
    resolution: &AnchorResolution,
    mask_id: u32,
) -> Result<Vec<u32>> {
    if resolution.prompt_len > full_context.len() {
        return Err(Error::arg(format!(
            "prompt of {} tokens does not fit a context of {}",
            resolution.prompt_len,
            full_context.len()
        )));
    }
    substitute_mask(full_context, &resolution.token_positions, mask_id)
}

#[inline]
fn mix(original: f64, masked: f64, omega: f64) -> f64 {
    omega * original + (1.0 - omega) * masked
}

fn check_lengths(original: &[f64], masked: &[f64]) -> Result<()> {
    if original.len() != masked.len() {
        return Err(Error::arg(format!(
            "logit vectors differ in length: {} vs {}",
            original.len(),
            masked.len()
        )));
    }
    Ok(())
}

/// `omega * original + (1 - omega) * masked`, elementwise, unnormalized.
pub fn combine_fixed(original: &[f64], masked: &[f64], omega: f64) -> Result<Vec<f64>> {
    check_lengths(original, masked)?;
    if !omega.is_finite() {
        return Err(Error::arg(format!("omega must be finite, got {omega}")));
    }
    Ok(original
        .iter()
        .zip(masked)
        .map(|(&a, &b)| mix(a, b, omega))
        .collect())
}

/// Confidence-modulated anchoring: each token's logit difference is
/// weighted by `lambda * (1 - p)`, where `p` is its original probability.
/// Confident tokens move little; uncertain ones move more.
pub fn combine_confidence(original: &[f64], masked: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lengths(original, masked)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::arg(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    let p = softmax(original);
    Ok(original
        .iter()
        .zip(masked)
        .zip(p)
        .map(|((&a, &b), p)| a + lambda * (1.0 - p) * (a - b))
        .collect())
}

/// Fixed-strength combination over the original top-k candidates only.
/// `masked_at` looks up the masked logit of an id.
pub fn combine_truncated<F>(
    original_topk: &[(u32, f64)],
    masked_at: F,
    omega: f64,
    k: usize,
) -> Result<Vec<(u32, f64)>>
where
    F: Fn(u32) -> Option<f64>,
{
    if k == 0 {
        return Err(Error::arg("k must be positive"));
    }
    if original_topk.len() != k {
        return Err(Error::arg(format!(
            "expected {k} candidates, got {}",
            original_topk.len()
        )));
    }
    if !omega.is_finite() {
        return Err(Error::arg(format!("omega must be finite, got {omega}")));
    }
    let mut seen = HashSet::with_capacity(k);
    original_topk
        .iter()
        .map(|&(id, a)| {
            if !seen.insert(id) {
                return Err(Error::arg(format!("duplicate candidate id {id}")));
            }
            let b = masked_at(id)
                .ok_or_else(|| Error::arg(format!("no masked logit for id {id}")))?;
            Ok((id, mix(a, b, omega)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AnchorMode {
    Off,
    Fixed { omega: f64 },
    Confidence { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Always,
    #[default]
    OnTestFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchoringConfig {
    #[serde(flatten)]
    pub mode: AnchorMode,
    pub top_k: Option<usize>,
    pub activation: Activation,
}

impl AnchoringConfig {
    pub fn off() -> Self {
        AnchoringConfig {
            mode: AnchorMode::Off,
            top_k: None,
            activation: Activation::default(),
        }
    }

    pub fn fixed(omega: f64) -> Self {
        AnchoringConfig {
            mode: AnchorMode::Fixed { omega },
            ..Self::off()
        }
    }

    pub fn confidence(lambda: f64) -> Self {
        AnchoringConfig {
            mode: AnchorMode::Confidence { lambda },
            ..Self::off()
        }
    }

    pub fn with_top_k(mut self, k: Option<usize>) -> Self {
        self.top_k = k;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn is_active(&self) -> bool {
        !matches!(self.mode, AnchorMode::Off)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.mode {
            AnchorMode::Off => {}
            AnchorMode::Fixed { omega } if !omega.is_finite() => {
                return Err(Error::arg(format!("omega must be finite, got {omega}")))
            }
            AnchorMode::Fixed { .. } => {}
            AnchorMode::Confidence { lambda } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::arg(format!(
                        "lambda must be finite and nonnegative, got {lambda}"
                    )));
                }
                if self.top_k.is_some() {
                    return Err(Error::arg(
                        "top-k truncation applies to fixed-strength anchoring only",
                    ));
                }
            }
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > vocab_size {
                return Err(Error::arg(format!(
                    "top_k must lie in 1..={vocab_size}, got {k}"
                )));
            }
        }
        Ok(())
    }

    /// Combine full original and masked vectors under this configuration.
    pub fn combine(&self, original: &[f64], masked: &[f64]) -> Result<Vec<f64>> {
        match self.mode {
            AnchorMode::Off => {
                check_lengths(original, masked)?;
                Ok(original.to_vec())
            }
            AnchorMode::Fixed { omega } => combine_fixed(original, masked, omega),
            AnchorMode::Confidence { lambda } => combine_confidence(original, masked, lambda),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::toy(40).unwrap()
    }

    #[test]
    fn resolve_single_char_tokens() {
        let p = PromptSpec::new([("ab", false), ("cd", true)]).unwrap();
        let (tokens, res) = resolve_anchors(&p, &vocab()).unwrap();
        let v = vocab();
        assert_eq!(v.decode(&tokens), "abcd");
        assert_eq!(tokens.len(), 4);
        assert_eq!(res.token_positions, vec![2, 3]);
        assert_eq!(res.prompt_len, 4);
    }

    #[test]
    fn resolve_full_cover() {
        let p = PromptSpec::new([("abc", true), ("d", true)]).unwrap();
        let (_, res) = resolve_anchors(&p, &vocab()).unwrap();
        assert_eq!(res.token_positions, vec![0, 1, 2, 3]);
    }

    #[test]
    fn resolve_reports_untokenizable_segment() {
        let p = PromptSpec::new([("a", false), ("é", true)]).unwrap();
        let err = resolve_anchors(&p, &vocab()).unwrap_err().to_string();
        assert!(err.contains("é"), "{err}");
    }

    #[test]
    fn masked_context_touches_only_anchors() {
        let res = AnchorResolution::new(vec![1, 2], 3).unwrap();
        let out = build_masked_context(&[10, 11, 12, 20, 21], &res, 0).unwrap();
        assert_eq!(out, vec![10, 0, 0, 20, 21]);
        let none = AnchorResolution::new(vec![], 3).unwrap();
        assert_eq!(build_masked_context(&[10, 11, 12], &none, 0).unwrap(), vec![10, 11, 12]);
        assert!(build_masked_context(&[10, 11], &res, 0).is_err());
        assert!(AnchorResolution::new(vec![3], 3).is_err());
    }

    #[test]
    fn fixed_endpoints_and_example() {
        let a = [2.0, 0.0, -1.5];
        let b = [0.0, 1.0, 0.25];
        assert_eq!(combine_fixed(&a, &b, 1.0).unwrap(), a.to_vec());
        assert_eq!(combine_fixed(&a, &b, 0.0).unwrap(), b.to_vec());
        assert_eq!(
            combine_fixed(&[2.0, 0.0], &[0.0, 1.0], 1.25).unwrap(),
            vec![2.5, -0.25]
        );
        assert!(combine_fixed(&a, &b[..2], 1.0).is_err());
        assert!(combine_fixed(&a, &b, f64::NAN).is_err());
    }

    #[test]
    fn confidence_examples() {
        let a = [1.0, 1.0];
        let b = [0.0, 2.0];
        assert_eq!(combine_confidence(&a, &b, 0.0).unwrap(), a.to_vec());
        assert_eq!(combine_confidence(&a, &b, 0.5).unwrap(), vec![1.25, 0.75]);
        let sat = combine_confidence(&[10.0, -10.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((sat[0] - 10.0).abs() < 1e-3);
        assert!(combine_confidence(&a, &b, -1.0).is_err());
    }

    #[test]
    fn truncated_rejects_duplicates() {
        let masked = [0.0; 4];
        let err = combine_truncated(&[(1, 1.0), (1, 0.5)], |i| masked.get(i as usize).copied(), 1.5, 2);
        assert!(err.is_err());
        let one = combine_truncated(&[(3, 2.0)], |i| masked.get(i as usize).copied(), 1.5, 1).unwrap();
        assert_eq!(one, vec![(3, 3.0)]);
    }

    #[test]
    fn markup_parse_and_escape() {
        let m = Markup::default();
        let p = m.parse("ab⟦cd⟧e").unwrap();
        assert_eq!(
            p,
            PromptSpec::new([("ab", false), ("cd", true), ("e", false)]).unwrap()
        );
        let p = m.parse("x⟦⟦y⟦z⟧⟧w⟧").unwrap();
        assert_eq!(
            p,
            PromptSpec::new([("x⟦y", false), ("z⟧w", true)]).unwrap()
        );
        assert_eq!(m.parse(&m.render(&p).unwrap()).unwrap(), p);
        assert!(m.parse("a⟦b").is_err());
        assert!(m.parse("a⟧b").is_err());
        assert!(m.parse("⟦a⟦b⟧⟧").is_err());
        let custom = Markup::new("[[", "]]").unwrap();
        assert_eq!(
            custom.parse("a[[b]]").unwrap(),
            PromptSpec::new([("a", false), ("b", true)]).unwrap()
        );
    }

    #[test]
    fn config_validation() {
        assert!(AnchoringConfig::fixed(f64::INFINITY).validate(16).is_err());
        assert!(AnchoringConfig::confidence(-0.1).validate(16).is_err());
        assert!(AnchoringConfig::fixed(1.2).with_top_k(Some(17)).validate(16).is_err());
        assert!(AnchoringConfig::fixed(1.2).with_top_k(Some(16)).validate(16).is_ok());
        assert!(AnchoringConfig::confidence(1.0).with_top_k(Some(4)).validate(16).is_err());
    }
}
