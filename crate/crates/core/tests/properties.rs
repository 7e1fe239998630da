//! Randomized invariants.

mod common;

use common::{fd_grad, max_rel_err, random_instance};
use iris_core::config::RunConfig;
use iris_core::objective::{loss_ctp, loss_total, loss_total_value, preference_weight, LossConfig};
use iris_core::perturb::crop;
use iris_core::policy::{Context, PolicyParams};
use iris_core::reward::{implicit_reward, rvg_score, RewardScore};
use iris_core::sift::{normalize, postprocess, select_extrema, FilterConfig, Outcome, PairFlags, PreferencePair, ScoredCandidate};
use iris_core::world::{generate_world, grounded_caption, Caption, Vocab, WorldConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cases() -> ProptestConfig {
    ProptestConfig { cases: 64, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(small_cases())]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), prev in 0usize..8) {
        let inst = random_instance(seed);
        let prev = prev % inst.theta.n_vocab();
        let lp = inst.theta.next_token_logprobs(&inst.pair.ctx, prev).unwrap();
        let total: f64 = lp.iter().map(|l| l.exp()).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn logprobs_shift_invariant(seed in any::<u64>(), c in -500.0f64..500.0) {
        let inst = random_instance(seed);
        let mut shifted = inst.theta.clone();
        for v in shifted.prompt.as_mut_slice() {
            *v += c;
        }
        let ctx = &inst.pair.ctx;
        for prev in 0..inst.theta.n_vocab() {
            let a = inst.theta.next_token_logprobs(ctx, prev).unwrap();
            let b = shifted.next_token_logprobs(ctx, prev).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn null_image_ignores_visual_block(seed in any::<u64>(), noise in -10.0f64..10.0) {
        let inst = random_instance(seed);
        let mut other = inst.theta.clone();
        for (i, v) in other.visual.as_mut_slice().iter_mut().enumerate() {
            *v += noise * ((i % 7) as f64 - 3.0);
        }
        let ctx = Context::null(inst.theta.n_obj(), inst.pair.ctx.prompt_id);
        let y = &inst.pair.chosen;
        prop_assert_eq!(
            inst.theta.sequence_logprob(&ctx, y, false).unwrap(),
            other.sequence_logprob(&ctx, y, false).unwrap()
        );
        prop_assert_eq!(
            implicit_reward(&inst.theta, &inst.reference, &ctx, y).unwrap(),
            implicit_reward(&other, &inst.reference, &ctx, y).unwrap()
        );
    }

    #[test]
    fn implicit_reward_vanishes_for_identical_policies(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let p = &inst.pair;
        for ctx in [&p.ctx, &p.ctx_tilde] {
            prop_assert_eq!(implicit_reward(&inst.theta, &inst.theta, ctx, &p.chosen).unwrap(), 0.0);
        }
    }

    #[test]
    fn ctp_gradient_matches_finite_differences(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let cfg = LossConfig::default();
        let p = &inst.pair;
        let (_, g, _) = loss_ctp(&inst.theta, &inst.reference, &p.ctx, &p.chosen, &p.rejected, &cfg).unwrap();
        let n = fd_grad(&inst.theta, 1e-5, |q| {
            loss_ctp(q, &inst.reference, &p.ctx, &p.chosen, &p.rejected, &cfg).unwrap().0
        });
        prop_assert!(max_rel_err(&g, &n, 1e-4) <= 1e-5);
    }

    #[test]
    fn total_loss_decomposes(seed in any::<u64>(), lambda in 0.0f64..3.0, delta in 0.0f64..1.0) {
        let inst = random_instance(seed);
        let cfg = LossConfig { lambda, delta, ..LossConfig::default() };
        let b = loss_total_value(&inst.theta, &inst.reference, std::slice::from_ref(&inst.pair), &cfg).unwrap();
        prop_assert!((b.l_total - (b.l_ctp + lambda * b.l_cvp + b.l_anchor)).abs() <= 1e-12);
        for v in [b.l_ctp, b.l_cvp, b.l_anchor] {
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_pair_gradients(seed in any::<u64>()) {
        let a = random_instance(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = a.pair.clone();
        b.ctx_tilde = Context::new(b.ctx.phi.iter().map(|_| rng.gen_range(0.0..1.0)).collect(), b.ctx.prompt_id);
        std::mem::swap(&mut b.chosen, &mut b.rejected);
        let cfg = LossConfig::default();
        let (_, g_ab) = loss_total(&a.theta, &a.reference, &[a.pair.clone(), b.clone()], &cfg).unwrap();
        let (_, mut g_mean) = loss_total(&a.theta, &a.reference, std::slice::from_ref(&a.pair), &cfg).unwrap();
        let (_, g_b) = loss_total(&a.theta, &a.reference, std::slice::from_ref(&b), &cfg).unwrap();
        g_mean.axpy(1.0, &g_b);
        g_mean.scale(0.5);
        prop_assert!(g_ab.max_abs_diff(&g_mean) <= 1e-12);
    }

    #[test]
    fn preference_weight_bounded_and_decreasing(d in -30.0f64..30.0, step in 1e-3f64..5.0) {
        let beta = 0.1;
        let w = preference_weight(beta, d);
        prop_assert!(w > 0.0 && w < beta);
        prop_assert!(preference_weight(beta, d + step) < w);
    }

    #[test]
    fn rvg_hinge_and_monotonicity(ri in -10.0f64..10.0, gap in 1e-3f64..10.0, g in 0.0f64..20.0, dg in 1e-3f64..5.0) {
        prop_assert_eq!(rvg_score(ri, ri - gap, g).unwrap(), ri);
        let s = rvg_score(ri, ri + gap, g).unwrap();
        prop_assert!(s <= ri);
        prop_assert!(rvg_score(ri, ri + gap, g + dg).unwrap() <= s);
        if g > 0.0 {
            prop_assert!(rvg_score(ri, ri + gap + dg, g).unwrap() < s);
        }
        prop_assert!(rvg_score(ri, ri + gap, -dg).is_err());
    }

    #[test]
    fn extrema_agree_with_exhaustive_scan(scores in proptest::collection::vec(-3i32..3, 2..12)) {
        let cands: Vec<ScoredCandidate> = scores
            .iter()
            .map(|&s| ScoredCandidate {
                caption: Caption { image_id: 0, prompt_id: 0, tokens: vec![] },
                score: RewardScore { r_image: s as f64, r_text: 0.0, s: s as f64, gamma: 0.0 },
            })
            .collect();
        let (hi, lo) = select_extrema(&cands).unwrap();
        let max = *scores.iter().max().unwrap();
        let min = *scores.iter().min().unwrap();
        prop_assert_eq!(hi, scores.iter().position(|&s| s == max).unwrap());
        prop_assert_eq!(lo, scores.iter().position(|&s| s == min).unwrap());
    }

    #[test]
    fn crop_preserves_mass(phi in proptest::collection::vec(0.0f64..1.0, 4..16), seed in any::<u64>(), fraction in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = crop(&phi, fraction, &mut rng).unwrap();
        let mass: f64 = phi.iter().sum();
        let width = (((phi.len() as f64) * fraction).round() as usize).min(phi.len() - 1);
        prop_assert_eq!(out.len(), phi.len());
        if mass > 0.0 && width > 0 {
            prop_assert!((out.iter().sum::<f64>() - mass).abs() <= 1e-9);
            let zeros: Vec<usize> = (0..phi.len()).filter(|&i| out[i] == 0.0 && phi[i] != 0.0).collect();
            if let (Some(&a), Some(&b)) = (zeros.first(), zeros.last()) {
                prop_assert!(b - a < width);
            }
        }
    }

    #[test]
    fn postprocess_invariants(seed in any::<u64>()) {
        let v = Vocab::new(12, 4);
        let cfg = FilterConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let caption = |rng: &mut ChaCha8Rng, prompt_id: usize| {
            let mut t = vec![v.bos()];
            for _ in 0..rng.gen_range(0..5) {
                t.push(v.filler(rng.gen_range(0..4)));
                t.push(rng.gen_range(0..6));
            }
            t.push(v.eos());
            Caption { image_id: 0, prompt_id, tokens: t }
        };
        let prompt_id = rng.gen_range(0..2);
        let y_sft = caption(&mut rng, prompt_id);
        let zero = RewardScore { r_image: 0.0, r_text: 0.0, s: 0.0, gamma: 0.7 };
        let pair = PreferencePair {
            image_id: 0,
            prompt_id,
            chosen: caption(&mut rng, prompt_id),
            rejected: caption(&mut rng, prompt_id),
            s_chosen: 0.5,
            s_rejected: -0.5,
            score_chosen: zero,
            score_rejected: zero,
            flags: PairFlags::default(),
        };
        let once = postprocess(&v, &pair, Some(&y_sft), &cfg);
        if let Outcome::Kept(p) = &once {
            prop_assert_ne!(normalize(&v, &p.chosen.tokens), normalize(&v, &p.rejected.tokens));
            if p.flags.anchored || p.flags.length_filtered {
                prop_assert_eq!(&p.chosen, &y_sft);
            } else {
                prop_assert!(p.s_chosen >= p.s_rejected);
            }
            prop_assert_eq!(postprocess(&v, p, Some(&y_sft), &cfg), once.clone());
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), run_seed in any::<u64>()) {
        let inst = random_instance(seed);
        let bytes = inst.theta.to_checkpoint_bytes(run_seed);
        let (back, s) = PolicyParams::from_checkpoint_bytes(&bytes).unwrap();
        prop_assert_eq!(s, run_seed);
        prop_assert_eq!(&back, &inst.theta);
        prop_assert_eq!(back.content_hash(), inst.theta.content_hash());
        let truncated = &bytes[..bytes.len() - 1];
        prop_assert!(PolicyParams::from_checkpoint_bytes(truncated).is_err());
    }

    #[test]
    fn config_round_trip(gamma in 0.0f64..20.0, lambda in 0.0f64..2.0, k in 2usize..12, seed in 0u64..1_000_000) {
        let mut cfg = RunConfig::default();
        cfg.reward.gamma = gamma;
        cfg.loss.lambda = lambda;
        cfg.sift.k = k;
        cfg.train.seed = seed;
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn generated_worlds_are_well_formed(seed in any::<u64>()) {
        let cfg = WorldConfig::default();
        let w = generate_world(seed, &cfg).unwrap();
        prop_assert_eq!(&w, &generate_world(seed, &cfg).unwrap());
        prop_assert_eq!(w.n_vocab(), cfg.n_obj + cfg.n_filler + 2);
        prop_assert!(w.prior.as_slice().iter().all(|x| x.is_finite()));
        for img in &w.images {
            prop_assert!(!img.objects.is_empty());
            for (m, &x) in img.phi.iter().enumerate() {
                prop_assert!((0.0..=1.0).contains(&x));
                prop_assert_eq!(x > 0.0, img.objects.contains(&m));
            }
            for p in 0..w.n_prompts() {
                let c = grounded_caption(&w, img, p);
                prop_assert!(c.tokens.len() <= cfg.max_len);
                prop_assert_eq!(c.tokens[0], w.vocab.bos());
                prop_assert_eq!(*c.tokens.last().unwrap(), w.vocab.eos());
                for &t in &c.tokens {
                    if w.vocab.is_object(t) {
                        prop_assert!(img.contains(t));
                    }
                }
            }
        }
        prop_assert!(w.bias_pairs.len() >= cfg.n_bias_pairs);
        for &(a, b) in &w.bias_pairs {
            let row = w.prior.row(a);
            let total: f64 = row.iter().sum();
            let mut sorted: Vec<f64> = row.iter().map(|x| x / total).collect();
            sorted.sort_by(|x, y| x.total_cmp(y));
            let n = sorted.len();
            let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
            prop_assert!(row[b] / total > 2.0 * median);
        }
    }
}
