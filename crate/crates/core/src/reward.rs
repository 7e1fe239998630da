//! Implicit-reward scoring with Rectified Visual Guidance (RVG).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Context, PolicyParams};
use crate::world::Token;

/// Default rectification strength.
pub const DEFAULT_GAMMA: f64 = 0.7;

/// Rectification strengths swept by the sensitivity preset.
pub const GAMMA_GRID: [f64; 9] = [0.0, 0.1, 0.3, 0.5, 0.7, 1.0, 1.5, 5.0, 20.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardScore {
    /// Image-conditioned implicit reward.
    pub r_image: f64,
    /// Implicit reward with the image removed.
    pub r_text: f64,
    /// Rectified score.
    pub s: f64,
    pub gamma: f64,
}

/// Length-normalized log-likelihood ratio `log pi(y|ctx) - log pi_ref(y|ctx)`.
pub fn implicit_reward(
    sampler: &PolicyParams,
    score_ref: &PolicyParams,
    ctx: &Context,
    tokens: &[Token],
) -> Result<f64> {
    if !sampler.same_shape(score_ref) {
        return Err(Error::Shape("sampler and scoring reference differ in shape".into()));
    }
    Ok(sampler.sequence_logprob(ctx, tokens, true)? - score_ref.sequence_logprob(ctx, tokens, true)?)
}

/// `S = r_image - gamma * max(0, r_text - r_image)`.
pub fn rvg_score(r_image: f64, r_text: f64, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidInput(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(r_image - gamma * (r_text - r_image).max(0.0))
}

/// Scores one candidate. `text_ref` is the reference used for the
/// image-free reward; pass `score_ref` for the standard setting.
pub fn score_candidate(
    sampler: &PolicyParams,
    score_ref: &PolicyParams,
    text_ref: &PolicyParams,
    ctx: &Context,
    tokens: &[Token],
    gamma: f64,
) -> Result<RewardScore> {
    let r_image = implicit_reward(sampler, score_ref, ctx, tokens)?;
    let r_text = implicit_reward(sampler, text_ref, &ctx.without_image(), tokens)?;
    let s = rvg_score(r_image, r_text, gamma)?;
    Ok(RewardScore {
        r_image,
        r_text,
        s,
        gamma,
    })
}
