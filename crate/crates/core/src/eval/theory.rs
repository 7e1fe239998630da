//! Executable checks of the pairwise-gradient identity, local margin
//! improvement, and the best-of-K quality-gap amplification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::objective::{loss_ctp, preference_weight, LossConfig};
use crate::policy::{Context, PolicyParams};
use crate::rng::stream_seed;
use crate::world::{Token, Vocab};

/// A random `(theta, ref, context, y_w, y_l)` instance.
#[derive(Debug, Clone)]
pub struct PairInstance {
    pub seed: u64,
    pub theta: PolicyParams,
    pub reference: PolicyParams,
    pub ctx: Context,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
}

fn random_sequence<R: Rng>(vocab: &Vocab, rng: &mut R) -> Vec<Token> {
    let len = rng.gen_range(1..=6);
    let mut y = vec![vocab.bos()];
    // BOS never reappears; EOS only at the end.
    y.extend((0..len).map(|_| rng.gen_range(0..vocab.bos())));
    y.push(vocab.eos());
    y
}

impl PairInstance {
    /// Small random instance; `y_w != y_l`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocab::new(rng.gen_range(4..=6), 2);
        let n_prompts = 2;
        let theta = PolicyParams::random(vocab, n_prompts, 1.0, &mut rng);
        let reference = PolicyParams::random(vocab, n_prompts, 1.0, &mut rng);
        let phi = (0..vocab.n_obj)
            .map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.1..1.0) } else { 0.0 })
            .collect();
        let ctx = Context::new(phi, rng.gen_range(0..n_prompts));
        let chosen = random_sequence(&vocab, &mut rng);
        let mut rejected = random_sequence(&vocab, &mut rng);
        while rejected == chosen {
            rejected = random_sequence(&vocab, &mut rng);
        }
        PairInstance {
            seed,
            theta,
            reference,
            ctx,
            chosen,
            rejected,
        }
    }

    /// Log-likelihood margin `log pi(y_w) - log pi(y_l)` under `theta`.
    pub fn margin(&self, theta: &PolicyParams) -> Result<f64> {
        Ok(theta.sequence_logprob(&self.ctx, &self.chosen, false)?
            - theta.sequence_logprob(&self.ctx, &self.rejected, false)?)
    }

    /// `Delta_theta = beta * (ratio(y_w) - ratio(y_l))`.
    pub fn implicit_margin(&self, beta: f64) -> Result<f64> {
        let ref_margin = self.reference.sequence_logprob(&self.ctx, &self.chosen, false)?
            - self.reference.sequence_logprob(&self.ctx, &self.rejected, false)?;
        Ok(beta * (self.margin(&self.theta)? - ref_margin))
    }

    /// `grad m = grad log pi(y_w) - grad log pi(y_l)` from two independent
    /// gradient evaluations.
    pub fn margin_grad(&self, theta: &PolicyParams) -> Result<PolicyParams> {
        let mut g = theta.logprob_grad(&self.ctx, &self.chosen)?;
        g.axpy(-1.0, &theta.logprob_grad(&self.ctx, &self.rejected)?);
        Ok(g)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub name: &'static str,
    pub passed: bool,
    pub trials: usize,
    /// Largest deviation observed (meaning depends on the check).
    pub worst_deviation: f64,
    pub worst_seed: Option<u64>,
    pub failing_seeds: Vec<u64>,
    pub details: Vec<String>,
}

impl TheoryReport {
    pub fn summary(&self) -> String {
        format!(
            "[{}] {}: trials={} worst={:.3e}{}{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.trials,
            self.worst_deviation,
            self.worst_seed.map(|s| format!(" (seed {s})")).unwrap_or_default(),
            if self.failing_seeds.is_empty() {
                String::new()
            } else {
                format!(" failing seeds {:?}", self.failing_seeds)
            }
        )
    }
}

/// Compares the autonomously computed gradient of the pairwise loss against
/// the assembled `-w (grad log pi(y_w) - grad log pi(y_l))`,
/// `w = beta * sigmoid(-Delta)`.
pub fn verify_lemma_grad_form(n_trials: usize, tol: f64, seed: u64) -> Result<TheoryReport> {
    if n_trials == 0 {
        return Err(Error::InvalidInput("need at least one trial".into()));
    }
    let cfg = LossConfig::default();
    let mut report = TheoryReport {
        name: "pairwise gradient difference form",
        passed: true,
        trials: n_trials,
        worst_deviation: 0.0,
        worst_seed: None,
        failing_seeds: vec![],
        details: vec![],
    };
    for trial in 0..n_trials {
        let s = stream_seed(&[seed, trial as u64]);
        let inst = PairInstance::random(s);
        let (_, grad, delta) = loss_ctp(&inst.theta, &inst.reference, &inst.ctx, &inst.chosen, &inst.rejected, &cfg)?;
        let w = preference_weight(cfg.beta, inst.implicit_margin(cfg.beta)?);
        if !(w > 0.0 && w < cfg.beta) {
            report.passed = false;
            report.failing_seeds.push(s);
            report.details.push(format!("weight {w} outside (0, beta) at Delta = {delta}"));
        }
        let mut assembled = inst.margin_grad(&inst.theta)?;
        assembled.scale(-w);
        let dev = grad.max_abs_diff(&assembled);
        if dev > report.worst_deviation {
            report.worst_deviation = dev;
            report.worst_seed = Some(s);
        }
        if dev > tol {
            report.passed = false;
            report.failing_seeds.push(s);
        }
    }
    // The weight must shrink as the preference becomes satisfied.
    let grid: Vec<f64> = (-40..=40).map(|i| f64::from(i) * 0.5).collect();
    let weights: Vec<f64> = grid.iter().map(|&d| preference_weight(cfg.beta, d)).collect();
    if !weights.windows(2).all(|w| w[1] < w[0]) {
        report.passed = false;
        report.details.push("weight not strictly decreasing on the Delta grid".into());
    }
    Ok(report)
}

/// One gradient step on the pairwise loss must raise the log-likelihood
/// margin; the realized gain must match `eta * w * |grad m|^2` within 10% at
/// the smallest step.
pub fn verify_margin_improvement(n_trials: usize, etas: &[f64], seed: u64) -> Result<TheoryReport> {
    if n_trials == 0 || etas.is_empty() {
        return Err(Error::InvalidInput("need trials and step sizes".into()));
    }
    if etas.iter().any(|&e| !(0.0..=1e-3).contains(&e)) {
        return Err(Error::InvalidInput("step sizes must lie in [0, 1e-3]".into()));
    }
    let cfg = LossConfig::default();
    let eta_min = etas.iter().copied().filter(|&e| e > 0.0).fold(f64::INFINITY, f64::min);
    let mut report = TheoryReport {
        name: "local margin improvement",
        passed: true,
        trials: n_trials,
        worst_deviation: 0.0,
        worst_seed: None,
        failing_seeds: vec![],
        details: vec![],
    };
    for trial in 0..n_trials {
        let s = stream_seed(&[seed, trial as u64]);
        let inst = PairInstance::random(s);
        let (_, grad, delta) = loss_ctp(&inst.theta, &inst.reference, &inst.ctx, &inst.chosen, &inst.rejected, &cfg)?;
        let w = preference_weight(cfg.beta, delta);
        let gm = inst.margin_grad(&inst.theta)?;
        let gm_sq = gm.norm_sq();
        let m0 = inst.margin(&inst.theta)?;
        for &eta in etas {
            let mut next = inst.theta.clone();
            next.axpy(-eta, &grad);
            let m1 = inst.margin(&next)?;
            if eta == 0.0 {
                if m1 != m0 {
                    report.passed = false;
                    report.failing_seeds.push(s);
                    report.details.push(format!("eta = 0 moved the margin at seed {s}"));
                }
                continue;
            }
            if gm_sq.sqrt() <= 1e-12 {
                continue;
            }
            if !(m1 > m0) {
                report.passed = false;
                report.failing_seeds.push(s);
                report.details.push(format!("margin did not increase at seed {s}, eta {eta}"));
            }
            if eta == eta_min {
                let predicted = eta * w * gm_sq;
                let rel = ((m1 - m0) - predicted).abs() / predicted;
                if rel > report.worst_deviation {
                    report.worst_deviation = rel;
                    report.worst_seed = Some(s);
                }
                if rel > 0.1 {
                    report.passed = false;
                    report.failing_seeds.push(s);
                    report.details.push(format!("first-order prediction off by {rel:.3} at seed {s}"));
                }
            }
        }
    }
    Ok(report)
}

/// Monte Carlo estimate of the quality gap for one K.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GapEstimate {
    pub k: usize,
    pub mean: f64,
    pub std_err: f64,
    /// Spearman correlation between sifting score and true quality.
    pub rank_corr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BestOfKReport {
    pub noise: f64,
    pub n_mc: usize,
    pub gaps: Vec<GapEstimate>,
    /// Smallest estimated gap: the empirical directional-correctness margin.
    pub delta_hat: f64,
    pub monotone: bool,
    pub violations: Vec<(usize, usize)>,
}

impl BestOfKReport {
    pub fn passed(&self) -> bool {
        self.monotone && self.delta_hat > 0.0
    }
}

/// Exact expected range of `k` i.i.d. Uniform(0, 1) draws.
pub fn uniform_range_expectation(k: usize) -> f64 {
    (k as f64 - 1.0) / (k as f64 + 1.0)
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean).powi(2);
        vb += (y - mean).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Quality `s* ~ Uniform(0, 1)`, sifting score `s* + N(0, noise^2)`; the
/// winner and loser are the score extrema among `k` draws.
pub fn estimate_gap(k: usize, n_mc: usize, noise: f64, seed: u64) -> Result<GapEstimate> {
    if !(2..=20).contains(&k) {
        return Err(Error::InvalidInput(format!("K must lie in [2, 20], got {k}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidInput("noise must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, k as u64]));
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let corr_samples = n_mc.min(2000) * k;
    let mut scores = Vec::with_capacity(corr_samples);
    let mut quality = Vec::with_capacity(corr_samples);
    let mut q = vec![0.0; k];
    let mut s = vec![0.0; k];
    for trial in 0..n_mc {
        for i in 0..k {
            q[i] = rng.gen::<f64>();
            s[i] = if noise == 0.0 { q[i] } else { q[i] + normal.sample(&mut rng) };
        }
        let (mut hi, mut lo) = (0, 0);
        for i in 1..k {
            if s[i] > s[hi] {
                hi = i;
            }
            if s[i] < s[lo] {
                lo = i;
            }
        }
        let gap = q[hi] - q[lo];
        sum += gap;
        sum_sq += gap * gap;
        if trial < n_mc.min(2000) {
            scores.extend_from_slice(&s);
            quality.extend_from_slice(&q);
        }
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(GapEstimate {
        k,
        mean,
        std_err: (var / n).sqrt(),
        rank_corr: spearman(&scores, &quality),
    })
}

/// Gap as a function of K; monotone within 2-standard-error bands.
pub fn verify_best_of_k(k_values: &[usize], n_mc: usize, noise: f64, seed: u64) -> Result<BestOfKReport> {
    if n_mc < 10_000 {
        return Err(Error::InvalidInput(format!("need n_mc >= 10^4, got {n_mc}")));
    }
    if k_values.is_empty() {
        return Err(Error::InvalidInput("no K values".into()));
    }
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    let gaps = ks
        .iter()
        .map(|&k| estimate_gap(k, n_mc, noise, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut violations = vec![];
    for w in gaps.windows(2) {
        let band = 2.0 * (w[0].std_err.powi(2) + w[1].std_err.powi(2)).sqrt();
        if w[1].mean < w[0].mean - band {
            violations.push((w[0].k, w[1].k));
        }
    }
    Ok(BestOfKReport {
        noise,
        n_mc,
        delta_hat: gaps.iter().map(|g| g.mean).fold(f64::INFINITY, f64::min),
        monotone: violations.is_empty(),
        violations,
        gaps,
    })
}

/// Noise-free case: the gap must match `(K - 1) / (K + 1)` within three
/// standard errors for every K.
pub fn verify_exact_gap(k_values: &[usize], n_mc: usize, seed: u64) -> Result<TheoryReport> {
    let mut report = TheoryReport {
        name: "best-of-K exact gap",
        passed: true,
        trials: k_values.len(),
        worst_deviation: 0.0,
        worst_seed: None,
        failing_seeds: vec![],
        details: vec![],
    };
    for &k in k_values {
        let g = estimate_gap(k, n_mc, 0.0, seed)?;
        let z = (g.mean - uniform_range_expectation(k)).abs() / g.std_err.max(f64::MIN_POSITIVE);
        report.worst_deviation = report.worst_deviation.max(z);
        report.details.push(format!(
            "K={k}: gap {:.5} +- {:.5}, exact {:.5}, z = {z:.2}",
            g.mean,
            g.std_err,
            uniform_range_expectation(k)
        ));
        if z > 3.0 {
            report.passed = false;
            report.failing_seeds.push(k as u64);
        }
    }
    Ok(report)
}

impl From<&BestOfKReport> for TheoryReport {
    fn from(r: &BestOfKReport) -> Self {
        TheoryReport {
            name: "best-of-K monotone gap",
            passed: r.passed(),
            trials: r.gaps.len(),
            worst_deviation: r.delta_hat,
            worst_seed: None,
            failing_seeds: r.violations.iter().map(|&(_, k)| k as u64).collect(),
            details: r
                .gaps
                .iter()
                .map(|g| format!("K={}: gap {:.5} +- {:.5}, rank corr {:.3}", g.k, g.mean, g.std_err, g.rank_corr))
                .collect(),
        }
    }
}

/// The full theory suite at its reference sizes: 100 trials of the
/// gradient-form identity and of the margin-improvement step (eta = 1e-4),
/// and best-of-K gaps at 10^5 Monte Carlo draws.
pub fn verify_all(seed: u64) -> Result<Vec<TheoryReport>> {
    Ok(vec![
        verify_lemma_grad_form(100, 1e-10, seed)?,
        verify_margin_improvement(100, &[1e-4], seed)?,
        verify_exact_gap(&[2, 5, 10], 100_000, seed)?,
        (&verify_best_of_k(&[2, 3, 5, 10], 100_000, 0.25, seed)?).into(),
    ])
}
