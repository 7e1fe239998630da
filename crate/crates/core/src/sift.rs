//! On-policy candidate generation, extrema selection and pair post-processing.
//!
//! Post-processing runs three steps in order: screening of degenerate or
//! invalid pairs, length-aware filtering on descriptive prompts, and conflict
//! anchoring against the grounded reference. The two repair steps only ever
//! replace the preferred side.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Context, PolicyParams};
use crate::reward::RewardScore;
use crate::world::{Caption, Token, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub caption: Caption,
    pub score: RewardScore,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairFlags {
    pub anchored: bool,
    pub length_filtered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub image_id: usize,
    pub prompt_id: usize,
    pub chosen: Caption,
    pub rejected: Caption,
    /// Sifting score of the selected winner. Kept when a repair step swaps
    /// in the grounded reference.
    pub s_chosen: f64,
    pub s_rejected: f64,
    pub score_chosen: RewardScore,
    pub score_rejected: RewardScore,
    pub flags: PairFlags,
}

impl PreferencePair {
    /// Raw pair from the extrema of a candidate list.
    pub fn from_extrema(cands: &[ScoredCandidate]) -> Result<Self> {
        let (w, l) = select_extrema(cands)?;
        let (win, lose) = (&cands[w], &cands[l]);
        Ok(PreferencePair {
            image_id: win.caption.image_id,
            prompt_id: win.caption.prompt_id,
            chosen: win.caption.clone(),
            rejected: lose.caption.clone(),
            s_chosen: win.score.s,
            s_rejected: lose.score.s,
            score_chosen: win.score,
            score_rejected: lose.score,
            flags: PairFlags::default(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreenReason {
    /// Both sides normalize to the same token sequence.
    Degenerate,
    /// One side is empty or degenerated into repetition.
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Length filter fires when `|chosen| > len_ratio * |rejected|`.
    pub len_ratio: f64,
    /// Conflict margin on token F1 against the grounded reference.
    pub conflict_tau: f64,
    /// Prompt ids on which the length filter applies.
    pub descriptive_prompts: Vec<usize>,
    pub repeat_ngram: usize,
    pub repeat_count: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            len_ratio: 2.0,
            conflict_tau: 0.2,
            descriptive_prompts: vec![0],
            repeat_ngram: 4,
            repeat_count: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Kept(PreferencePair),
    Screened(ScreenReason),
}

impl Outcome {
    pub fn kept(self) -> Option<PreferencePair> {
        match self {
            Outcome::Kept(p) => Some(p),
            Outcome::Screened(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiftStats {
    pub emitted: usize,
    pub screened: usize,
    pub length_filtered: usize,
    pub anchored: usize,
}

impl SiftStats {
    pub fn record(&mut self, outcome: &Outcome) {
        match outcome {
            Outcome::Kept(p) => {
                self.emitted += 1;
                self.length_filtered += usize::from(p.flags.length_filtered);
                self.anchored += usize::from(p.flags.anchored);
            }
            Outcome::Screened(_) => self.screened += 1,
        }
    }
}

/// Draws `k` candidates from the sampling policy.
pub fn generate_candidates<R: Rng + ?Sized>(
    sampler: &PolicyParams,
    ctx: &Context,
    image_id: usize,
    k: usize,
    temperature: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<Caption>> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("need K >= 2 candidates, got {k}")));
    }
    (0..k)
        .map(|_| {
            Ok(Caption {
                image_id,
                prompt_id: ctx.prompt_id,
                tokens: sampler.sample(ctx, temperature, max_len, rng)?,
            })
        })
        .collect()
}

/// Indices of the highest and lowest score; ties go to the first occurrence.
pub fn select_extrema(cands: &[ScoredCandidate]) -> Result<(usize, usize)> {
    if cands.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "extrema selection needs at least 2 candidates, got {}",
            cands.len()
        )));
    }
    let mut hi = 0;
    let mut lo = 0;
    for (i, c) in cands.iter().enumerate().skip(1) {
        if c.score.s > cands[hi].score.s {
            hi = i;
        }
        if c.score.s < cands[lo].score.s {
            lo = i;
        }
    }
    Ok((hi, lo))
}

/// Strips BOS, a trailing EOS and anything after it.
pub fn normalize<'a>(vocab: &Vocab, tokens: &'a [Token]) -> &'a [Token] {
    let body = match tokens.first() {
        Some(&t) if t == vocab.bos() => &tokens[1..],
        _ => tokens,
    };
    match body.iter().position(|&t| t == vocab.eos()) {
        Some(end) => &body[..end],
        None => body,
    }
}

/// Empty response, or some n-gram repeated back-to-back `repeat_count` times.
pub fn is_invalid(vocab: &Vocab, tokens: &[Token], cfg: &FilterConfig) -> bool {
    let body = normalize(vocab, tokens);
    if body.is_empty() {
        return true;
    }
    let n = cfg.repeat_ngram.max(1);
    let span = n * cfg.repeat_count.max(2);
    if body.len() < span {
        return false;
    }
    (0..=body.len() - span).any(|start| {
        let first = &body[start..start + n];
        (1..cfg.repeat_count).all(|r| &body[start + r * n..start + (r + 1) * n] == first)
    })
}

/// Multiset token F1 between two normalized responses.
pub fn token_f1(vocab: &Vocab, a: &[Token], b: &[Token]) -> f64 {
    let a = normalize(vocab, a);
    let b = normalize(vocab, b);
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<Token, usize> = HashMap::new();
    for &t in b {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for &t in a {
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / a.len() as f64;
    let recall = overlap as f64 / b.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Applies screening, length-aware filtering and conflict anchoring.
/// `y_sft` is the grounded caption for the pair's (image, prompt).
pub fn postprocess(
    vocab: &Vocab,
    pair: &PreferencePair,
    y_sft: Option<&Caption>,
    cfg: &FilterConfig,
) -> Outcome {
    let degenerate =
        |p: &PreferencePair| normalize(vocab, &p.chosen.tokens) == normalize(vocab, &p.rejected.tokens);
    if degenerate(pair) {
        return Outcome::Screened(ScreenReason::Degenerate);
    }
    if is_invalid(vocab, &pair.chosen.tokens, cfg) || is_invalid(vocab, &pair.rejected.tokens, cfg) {
        return Outcome::Screened(ScreenReason::Invalid);
    }
    let Some(y_sft) = y_sft else {
        return Outcome::Kept(pair.clone());
    };

    let mut out = pair.clone();
    let is_reference = |p: &PreferencePair| p.chosen.tokens == y_sft.tokens;

    let len_w = normalize(vocab, &out.chosen.tokens).len() as f64;
    let len_l = normalize(vocab, &out.rejected.tokens).len() as f64;
    if cfg.descriptive_prompts.contains(&out.prompt_id)
        && len_w > cfg.len_ratio * len_l
        && !is_reference(&out)
    {
        out.chosen = y_sft.clone();
        out.flags.length_filtered = true;
    }

    let f1_w = token_f1(vocab, &out.chosen.tokens, &y_sft.tokens);
    let f1_l = token_f1(vocab, &out.rejected.tokens, &y_sft.tokens);
    if f1_l >= f1_w + cfg.conflict_tau && !is_reference(&out) {
        out.chosen = y_sft.clone();
        out.flags.anchored = true;
    }

    // A repair can turn the pair into (y_sft, y_sft).
    if degenerate(&out) {
        return Outcome::Screened(ScreenReason::Degenerate);
    }
    Outcome::Kept(out)
}
