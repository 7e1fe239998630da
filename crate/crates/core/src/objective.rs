//! Composite grounded preference objective
//! `L_total = L_ctp + lambda * L_cvp + L_anchor` and its analytic gradient.
//!
//! All three terms are negative log-sigmoids of reference-relative log
//! ratios:
//!
//! ```text
//! ratio(y | c)  = log pi(y | c) - log pi_ref(y | c)
//! L_ctp         = -log sigmoid(beta * (ratio(y_w | v, x) - ratio(y_l | v, x)))
//! L_cvp         = -log sigmoid(beta * (ratio(y_w | v, x) - ratio(y_w | v~, x)))
//! L_anchor      = -log sigmoid(beta * ratio(y_w | v, x) - delta)
//! ```
//!
//! Batches are reduced by the mean. Sequence log-probabilities are plain
//! sums unless `length_normalize` is set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Context, PolicyParams};
use crate::world::Token;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda: f64,
    pub delta: f64,
    pub length_normalize: bool,
    /// Include the anchor term in the total.
    pub anchor: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.1,
            lambda: 1.0,
            delta: 0.0,
            length_normalize: false,
            anchor: true,
        }
    }
}

impl LossConfig {
    /// `l_ctp + lambda * l_cvp + l_anchor`, without the anchor when disabled.
    pub fn total(&self, b: &LossBreakdown) -> f64 {
        let anchor = if self.anchor { b.l_anchor } else { 0.0 };
        b.l_ctp + self.lambda * b.l_cvp + anchor
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !self.delta.is_finite() {
            return Err(Error::Config("delta must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ctp: f64,
    pub l_cvp: f64,
    pub l_anchor: f64,
    pub l_total: f64,
    /// Mean implicit preference margin `Delta_theta` of the ctp term.
    pub margin_delta: f64,
}

/// One training example for the composite objective.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub ctx: Context,
    /// Same prompt, perturbed image.
    pub ctx_tilde: Context,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(x)` evaluated as `softplus(-x)`.
#[inline]
pub fn neg_log_sigmoid(x: f64) -> f64 {
    (-x).max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Effective pair weight `beta * sigmoid(-delta_theta)`.
pub fn preference_weight(beta: f64, delta_theta: f64) -> f64 {
    beta * sigmoid(-delta_theta)
}

struct LogRatio<'a> {
    theta: &'a PolicyParams,
    reference: &'a PolicyParams,
    normalize: bool,
}

impl LogRatio<'_> {
    fn value(&self, ctx: &Context, y: &[Token]) -> Result<f64> {
        let lp = self.theta.sequence_logprob(ctx, y, self.normalize)?;
        let lr = self.reference.sequence_logprob(ctx, y, self.normalize)?;
        Ok(lp - lr)
    }

    /// Adds `scale * grad ratio(y | ctx)`.
    fn accumulate(&self, ctx: &Context, y: &[Token], scale: f64, grad: &mut PolicyParams) -> Result<()> {
        let s = if self.normalize {
            scale / (y.len() - 1) as f64
        } else {
            scale
        };
        self.theta.accumulate_logprob_grad(ctx, y, s, grad)
    }
}

fn check_pair(theta: &PolicyParams, reference: &PolicyParams) -> Result<()> {
    if theta.same_shape(reference) {
        Ok(())
    } else {
        Err(Error::Shape("policy and reference differ in shape".into()))
    }
}

fn ratio<'a>(theta: &'a PolicyParams, reference: &'a PolicyParams, cfg: &LossConfig) -> LogRatio<'a> {
    LogRatio {
        theta,
        reference,
        normalize: cfg.length_normalize,
    }
}

/// Conditional textual preference (DPO) term. Returns the loss, its
/// gradient, and `Delta_theta`.
pub fn loss_ctp(
    theta: &PolicyParams,
    reference: &PolicyParams,
    ctx: &Context,
    chosen: &[Token],
    rejected: &[Token],
    cfg: &LossConfig,
) -> Result<(f64, PolicyParams, f64)> {
    check_pair(theta, reference)?;
    let mut grad = theta.zeros_like();
    let (value, delta) = ctp_into(theta, reference, ctx, chosen, rejected, cfg, 1.0, &mut grad)?;
    Ok((value, grad, delta))
}

#[allow(clippy::too_many_arguments)]
fn ctp_into(
    theta: &PolicyParams,
    reference: &PolicyParams,
    ctx: &Context,
    chosen: &[Token],
    rejected: &[Token],
    cfg: &LossConfig,
    scale: f64,
    grad: &mut PolicyParams,
) -> Result<(f64, f64)> {
    let r = ratio(theta, reference, cfg);
    let delta = cfg.beta * (r.value(ctx, chosen)? - r.value(ctx, rejected)?);
    let w = preference_weight(cfg.beta, delta);
    r.accumulate(ctx, chosen, -scale * w, grad)?;
    r.accumulate(ctx, rejected, scale * w, grad)?;
    Ok((neg_log_sigmoid(delta), delta))
}

/// Conditional visual preference term: the same response under the true
/// versus the perturbed image.
pub fn loss_cvp(
    theta: &PolicyParams,
    reference: &PolicyParams,
    chosen: &[Token],
    ctx: &Context,
    ctx_tilde: &Context,
    cfg: &LossConfig,
) -> Result<(f64, PolicyParams)> {
    check_pair(theta, reference)?;
    let mut grad = theta.zeros_like();
    let value = cvp_into(theta, reference, chosen, ctx, ctx_tilde, cfg, 1.0, &mut grad)?;
    Ok((value, grad))
}

#[allow(clippy::too_many_arguments)]
fn cvp_into(
    theta: &PolicyParams,
    reference: &PolicyParams,
    chosen: &[Token],
    ctx: &Context,
    ctx_tilde: &Context,
    cfg: &LossConfig,
    scale: f64,
    grad: &mut PolicyParams,
) -> Result<f64> {
    if ctx.prompt_id != ctx_tilde.prompt_id {
        return Err(Error::InvalidInput(
            "visual preference contexts must share the prompt".into(),
        ));
    }
    let r = ratio(theta, reference, cfg);
    let x = cfg.beta * (r.value(ctx, chosen)? - r.value(ctx_tilde, chosen)?);
    let w = cfg.beta * sigmoid(-x);
    r.accumulate(ctx, chosen, -scale * w, grad)?;
    r.accumulate(ctx_tilde, chosen, scale * w, grad)?;
    Ok(neg_log_sigmoid(x))
}

/// Anchored regularizer keeping the chosen response's reference-relative
/// reward above `delta`.
pub fn loss_anchor(
    theta: &PolicyParams,
    reference: &PolicyParams,
    chosen: &[Token],
    ctx: &Context,
    cfg: &LossConfig,
) -> Result<(f64, PolicyParams)> {
    check_pair(theta, reference)?;
    let mut grad = theta.zeros_like();
    let value = anchor_into(theta, reference, chosen, ctx, cfg, 1.0, &mut grad)?;
    Ok((value, grad))
}

fn anchor_into(
    theta: &PolicyParams,
    reference: &PolicyParams,
    chosen: &[Token],
    ctx: &Context,
    cfg: &LossConfig,
    scale: f64,
    grad: &mut PolicyParams,
) -> Result<f64> {
    let r = ratio(theta, reference, cfg);
    let x = cfg.beta * r.value(ctx, chosen)? - cfg.delta;
    let w = cfg.beta * sigmoid(-x);
    r.accumulate(ctx, chosen, -scale * w, grad)?;
    Ok(neg_log_sigmoid(x))
}

/// Batch-mean composite loss and gradient. Pairs are reduced in order.
pub fn loss_total(
    theta: &PolicyParams,
    reference: &PolicyParams,
    batch: &[TrainingPair],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, PolicyParams)> {
    check_pair(theta, reference)?;
    if batch.is_empty() {
        return Err(Error::InvalidInput("loss over an empty batch".into()));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut grad = theta.zeros_like();
    let mut out = LossBreakdown::default();
    for p in batch {
        let (ctp, delta) = ctp_into(theta, reference, &p.ctx, &p.chosen, &p.rejected, cfg, inv, &mut grad)?;
        let cvp = if cfg.lambda != 0.0 {
            cvp_into(theta, reference, &p.chosen, &p.ctx, &p.ctx_tilde, cfg, inv * cfg.lambda, &mut grad)?
        } else {
            visual_preference_value(theta, reference, p, cfg)?
        };
        let anchor = if cfg.anchor {
            anchor_into(theta, reference, &p.chosen, &p.ctx, cfg, inv, &mut grad)?
        } else {
            let r = ratio(theta, reference, cfg);
            neg_log_sigmoid(cfg.beta * r.value(&p.ctx, &p.chosen)? - cfg.delta)
        };
        out.l_ctp += ctp;
        out.l_cvp += cvp;
        out.l_anchor += anchor;
        out.margin_delta += delta;
    }
    out.l_ctp *= inv;
    out.l_cvp *= inv;
    out.l_anchor *= inv;
    out.margin_delta *= inv;
    out.l_total = cfg.total(&out);
    Ok((out, grad))
}

fn visual_preference_value(
    theta: &PolicyParams,
    reference: &PolicyParams,
    p: &TrainingPair,
    cfg: &LossConfig,
) -> Result<f64> {
    let r = ratio(theta, reference, cfg);
    Ok(neg_log_sigmoid(
        cfg.beta * (r.value(&p.ctx, &p.chosen)? - r.value(&p.ctx_tilde, &p.chosen)?),
    ))
}

/// Loss values without the gradient.
pub fn loss_total_value(
    theta: &PolicyParams,
    reference: &PolicyParams,
    batch: &[TrainingPair],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    check_pair(theta, reference)?;
    if batch.is_empty() {
        return Err(Error::InvalidInput("loss over an empty batch".into()));
    }
    let r = ratio(theta, reference, cfg);
    let inv = 1.0 / batch.len() as f64;
    let mut out = LossBreakdown::default();
    for p in batch {
        let rw = r.value(&p.ctx, &p.chosen)?;
        let rl = r.value(&p.ctx, &p.rejected)?;
        let rt = r.value(&p.ctx_tilde, &p.chosen)?;
        let delta = cfg.beta * (rw - rl);
        out.l_ctp += neg_log_sigmoid(delta);
        out.l_cvp += neg_log_sigmoid(cfg.beta * (rw - rt));
        out.l_anchor += neg_log_sigmoid(cfg.beta * rw - cfg.delta);
        out.margin_delta += delta;
    }
    out.l_ctp *= inv;
    out.l_cvp *= inv;
    out.l_anchor *= inv;
    out.margin_delta *= inv;
    out.l_total = cfg.total(&out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn setup(seed: u64) -> (PolicyParams, PolicyParams, TrainingPair) {
        let v = Vocab::new(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = PolicyParams::random(v, 2, 0.8, &mut rng);
        let reference = PolicyParams::random(v, 2, 0.8, &mut rng);
        let pair = TrainingPair {
            ctx: Context::new(vec![0.9, 0.0, 0.4, 0.0], 1),
            ctx_tilde: Context::new(vec![0.2, -0.3, 0.1, 0.5], 1),
            chosen: vec![v.bos(), v.filler(0), 0, v.filler(1), 2, v.eos()],
            rejected: vec![v.bos(), v.filler(0), 3, v.eos()],
        };
        (theta, reference, pair)
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(neg_log_sigmoid(0.0), LN_2);
        assert!((neg_log_sigmoid(-1.0) - (1.0 + 1f64.exp()).ln()).abs() < 1e-15);
        assert!((neg_log_sigmoid(-800.0) - 800.0).abs() < 1e-9);
        assert!(neg_log_sigmoid(800.0) >= 0.0 && neg_log_sigmoid(800.0) < 1e-300);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn closed_forms_at_reference() {
        let (theta, _, p) = setup(1);
        let cfg = LossConfig::default();
        let (ctp, _, d) = loss_ctp(&theta, &theta, &p.ctx, &p.chosen, &p.rejected, &cfg).unwrap();
        assert_eq!(d, 0.0);
        assert!((ctp - LN_2).abs() < 1e-12);
        let (cvp, _) = loss_cvp(&theta, &theta, &p.chosen, &p.ctx, &p.ctx_tilde, &cfg).unwrap();
        assert!((cvp - LN_2).abs() < 1e-12);
        let (anc, _) = loss_anchor(&theta, &theta, &p.chosen, &p.ctx, &cfg).unwrap();
        assert!((anc - LN_2).abs() < 1e-12);
        let cfg1 = LossConfig { delta: 1.0, ..cfg };
        let (anc1, _) = loss_anchor(&theta, &theta, &p.chosen, &p.ctx, &cfg1).unwrap();
        assert!((anc1 - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((anc1 - 1.3133).abs() < 1e-4);
    }

    #[test]
    fn identical_contexts_give_zero_contrast() {
        let (theta, reference, p) = setup(2);
        let (cvp, g) = loss_cvp(&theta, &reference, &p.chosen, &p.ctx, &p.ctx, &LossConfig::default()).unwrap();
        assert!((cvp - LN_2).abs() < 1e-12);
        assert!(g.norm_sq() < 1e-24);
    }

    #[test]
    fn cvp_requires_shared_prompt() {
        let (theta, reference, p) = setup(3);
        let other = Context::new(p.ctx.phi.clone(), 0);
        assert!(loss_cvp(&theta, &reference, &p.chosen, &p.ctx, &other, &LossConfig::default()).is_err());
    }

    #[test]
    fn total_at_reference() {
        let (theta, _, p) = setup(4);
        for lambda in [0.0, 0.5, 1.0, 2.0] {
            let cfg = LossConfig { lambda, ..Default::default() };
            let (b, _) = loss_total(&theta, &theta, &[p.clone(), p.clone()], &cfg).unwrap();
            assert!((b.l_total - (2.0 + lambda) * LN_2).abs() < 1e-12);
            assert!((b.l_total - (b.l_ctp + lambda * b.l_cvp + b.l_anchor)).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_zero_drops_visual_term() {
        let (theta, reference, p) = setup(5);
        let cfg = LossConfig { lambda: 0.0, ..Default::default() };
        let (b, g) = loss_total(&theta, &reference, &[p.clone()], &cfg).unwrap();
        let (ctp, gc, _) = loss_ctp(&theta, &reference, &p.ctx, &p.chosen, &p.rejected, &cfg).unwrap();
        let (anc, mut ga) = loss_anchor(&theta, &reference, &p.chosen, &p.ctx, &cfg).unwrap();
        assert_eq!(b.l_total, ctp + anc);
        ga.axpy(1.0, &gc);
        assert!(g.max_abs_diff(&ga) < 1e-14);
    }

    #[test]
    fn value_only_path_agrees() {
        let (theta, reference, p) = setup(6);
        let cfg = LossConfig { delta: 0.3, lambda: 0.7, ..Default::default() };
        let (a, _) = loss_total(&theta, &reference, &[p.clone()], &cfg).unwrap();
        let b = loss_total_value(&theta, &reference, &[p], &cfg).unwrap();
        assert!((a.l_total - b.l_total).abs() < 1e-12);
        assert!((a.margin_delta - b.margin_delta).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let (theta, reference, _) = setup(7);
        assert!(loss_total(&theta, &reference, &[], &LossConfig::default()).is_err());
    }

    #[test]
    fn weight_bounds() {
        for d in [-20.0, -3.0, -0.1, 0.0, 0.1, 3.0, 20.0] {
            let w = preference_weight(0.1, d);
            assert!(w > 0.0 && w < 0.1, "{d} -> {w}");
        }
        assert_eq!(preference_weight(0.1, 0.0), 0.05);
    }

    #[test]
    fn invalid_configs() {
        assert!(LossConfig { beta: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}
