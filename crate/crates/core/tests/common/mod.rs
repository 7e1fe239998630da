//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use iris_core::objective::TrainingPair;
use iris_core::policy::{Context, PolicyParams};
use iris_core::world::{Image, Token, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Error-free transformation `a + b = s + e`.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Error-free transformation `a * b = p + e`.
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Double-double number `hi + lo`.
#[derive(Debug, Clone, Copy)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

impl Dd {
    pub fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let e = e + self.lo + o.lo;
        let (hi, lo) = two_sum(s, e);
        Dd { hi, lo }
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + self.hi * o.lo + self.lo * o.hi;
        let (hi, lo) = two_sum(p, e);
        Dd { hi, lo }
    }

    pub fn div_f64(self, d: f64) -> Dd {
        let q1 = self.hi / d;
        let (p, e) = two_prod(q1, d);
        let r = self.add(Dd { hi: -p, lo: -e });
        let q2 = r.hi / d;
        let (hi, lo) = two_sum(q1, q2);
        Dd { hi, lo }
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// `prod_{i=1..step} (1 - beta_i)` for the linear schedule, in double-double.
pub fn dd_alpha_bar(step: usize, total: usize, beta_start: f64, beta_end: f64) -> f64 {
    let span = Dd::new(beta_end).add(Dd::new(beta_start).neg());
    let mut acc = Dd::new(1.0);
    for i in 0..step {
        let beta = Dd::new(beta_start).add(span.mul(Dd::new(i as f64)).div_f64((total - 1) as f64));
        acc = acc.mul(Dd::new(1.0).add(beta.neg()));
    }
    acc.value()
}

/// Compensated sum.
pub fn dd_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(Dd::new(0.0), |acc, x| acc.add(Dd::new(x))).value()
}

/// Logits assembled entry by entry from the parameter matrices.
pub fn naive_logits(theta: &PolicyParams, phi: &[f64], prompt_id: usize, prev: Token) -> Vec<f64> {
    (0..theta.n_vocab())
        .map(|j| {
            let visual = phi.iter().enumerate().map(|(m, &f)| f * theta.visual.get(m, j));
            dd_sum(
                [theta.transition.get(prev, j), theta.prompt.get(prompt_id, j)]
                    .into_iter()
                    .chain(visual),
            )
        })
        .collect()
}

/// Sequence log-probability with compensated log-sum-exp and accumulation.
pub fn naive_logprob(theta: &PolicyParams, phi: &[f64], prompt_id: usize, tokens: &[Token]) -> f64 {
    let terms = tokens.windows(2).map(|w| {
        let z = naive_logits(theta, phi, prompt_id, w[0]);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + dd_sum(z.iter().map(|&v| (v - max).exp())).ln();
        z[w[1]] - lse
    });
    dd_sum(terms.collect::<Vec<_>>())
}

/// Number of trainable coordinates.
pub fn n_coords(p: &PolicyParams) -> usize {
    p.values().count()
}

pub fn coord(p: &PolicyParams, k: usize) -> f64 {
    *p.values().nth(k).expect("coordinate in range")
}

pub fn bump(p: &PolicyParams, k: usize, h: f64) -> PolicyParams {
    let mut q = p.clone();
    *q.values_mut().nth(k).expect("coordinate in range") += h;
    q
}

/// Central finite differences of `f` at `theta`.
pub fn fd_grad(theta: &PolicyParams, h: f64, mut f: impl FnMut(&PolicyParams) -> f64) -> Vec<f64> {
    (0..n_coords(theta))
        .map(|k| (f(&bump(theta, k, h)) - f(&bump(theta, k, -h))) / (2.0 * h))
        .collect()
}

/// `max_k |a_k - n_k| / max(|a_k|, |n_k|, floor)`.
pub fn max_rel_err(analytic: &PolicyParams, numeric: &[f64], floor: f64) -> f64 {
    analytic
        .values()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Random small instance: policy, reference and one training pair with a
/// distinct chosen and rejected response.
pub struct Instance {
    pub theta: PolicyParams,
    pub reference: PolicyParams,
    pub pair: TrainingPair,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::new(rng.gen_range(4..=6), rng.gen_range(2..=3));
    let n_prompts = 2;
    let theta = PolicyParams::random(vocab, n_prompts, 1.0, &mut rng);
    let reference = PolicyParams::random(vocab, n_prompts, 1.0, &mut rng);
    let phi: Vec<f64> = (0..vocab.n_obj)
        .map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.3..1.0) } else { 0.0 })
        .collect();
    let phi_tilde: Vec<f64> = phi.iter().map(|&x| x * 0.5 + rng.gen_range(-0.5..0.5)).collect();
    let prompt_id = rng.gen_range(0..n_prompts);
    let ctx = Context::new(phi, prompt_id);
    let chosen = theta.sample(&ctx, 1.0, 8, &mut rng).expect("valid context");
    let mut rejected = theta.sample(&ctx, 1.0, 8, &mut rng).expect("valid context");
    while rejected == chosen {
        rejected = theta.sample(&ctx, 1.0, 8, &mut rng).expect("valid context");
    }
    Instance {
        theta,
        reference,
        pair: TrainingPair {
            ctx,
            ctx_tilde: Context::new(phi_tilde, prompt_id),
            chosen,
            rejected,
        },
    }
}

/// CHAIR, HalRate and Cover recounted from raw tokens.
pub fn recount(vocab: &Vocab, decoded: &[(&Image, &[Token])]) -> (f64, f64, f64) {
    let (mut mentions, mut bad, mut bad_responses, mut cover) = (0usize, 0usize, 0usize, 0.0);
    for (image, tokens) in decoded {
        let truth: HashSet<Token> = image.objects.iter().copied().collect();
        let mut seen = BTreeSet::new();
        let mut any_bad = false;
        for &t in tokens.iter() {
            if t < vocab.n_obj {
                mentions += 1;
                if truth.contains(&t) {
                    seen.insert(t);
                } else {
                    bad += 1;
                    any_bad = true;
                }
            }
        }
        bad_responses += usize::from(any_bad);
        cover += seen.len() as f64 / truth.len() as f64;
    }
    let n = decoded.len() as f64;
    let chair = if mentions == 0 { 0.0 } else { bad as f64 / mentions as f64 };
    (chair, bad_responses as f64 / n, cover / n)
}
