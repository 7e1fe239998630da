//! Biased pretraining, SFT warm-up and iterative preference rounds with
//! separate scoring and optimization references.
//!
//! Round `r` samples from the round `r - 1` policy, scores candidates against
//! the round `r - 2` policy (the base policy when `r = 1`), and optimizes a
//! copy of the round `r - 1` policy against a frozen snapshot of itself.
//!
//! All optimization is gradient descent with a fixed step that is halved
//! (up to `max_halvings` times) whenever a step would increase the loss it
//! was computed on. A step that still increases the loss is skipped.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{PairSource, RunConfig, TextReference};
use crate::error::{Error, Result};
use crate::eval::{score_metrics, MetricsRow};
use crate::objective::{loss_total, loss_total_value, LossBreakdown, TrainingPair};
use crate::perturb::{perturb, DiffusionSchedule};
use crate::policy::{Context, FrozenPolicy, PolicyParams};
use crate::reward::{score_candidate, RewardScore};
use crate::rng::stream_seed;
use crate::sift::{generate_candidates, postprocess, Outcome, PairFlags, PreferencePair, ScoredCandidate, SiftStats};
use crate::world::{biased_text_corpus, generate_world, grounded_caption, Caption, Token, World};

// Stream tags for `stream_seed`.
const TAG_CORPUS: u64 = 1;
const TAG_SAMPLE: u64 = 2;
const TAG_PERTURB: u64 = 3;
const TAG_SHUFFLE: u64 = 4;
const TAG_SUBSET: u64 = 5;
const TAG_FIXED: u64 = 6;

/// A supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct SftItem {
    pub ctx: Context,
    pub tokens: Vec<Token>,
}

impl SftItem {
    pub fn grounded(world: &World, caption: &Caption) -> Self {
        SftItem {
            ctx: Context::new(world.images[caption.image_id].phi.clone(), caption.prompt_id),
            tokens: caption.tokens.clone(),
        }
    }

    /// The caption with the image removed.
    pub fn text_only(n_obj: usize, caption: &Caption) -> Self {
        SftItem {
            ctx: Context::null(n_obj, caption.prompt_id),
            tokens: caption.tokens.clone(),
        }
    }
}

/// Mean negative log-likelihood of a corpus and its gradient.
pub fn corpus_nll_grad(theta: &PolicyParams, items: &[SftItem]) -> Result<(f64, PolicyParams)> {
    if items.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let inv = 1.0 / items.len() as f64;
    let mut grad = theta.zeros_like();
    let mut nll = 0.0;
    for it in items {
        nll -= theta.sequence_logprob(&it.ctx, &it.tokens, false)?;
        theta.accumulate_logprob_grad(&it.ctx, &it.tokens, -inv, &mut grad)?;
    }
    Ok((nll * inv, grad))
}

pub fn corpus_nll(theta: &PolicyParams, items: &[SftItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let mut nll = 0.0;
    for it in items {
        nll -= theta.sequence_logprob(&it.ctx, &it.tokens, false)?;
    }
    Ok(nll / items.len() as f64)
}

#[derive(Debug, Clone)]
pub struct Step {
    pub params: PolicyParams,
    pub loss: f64,
    /// Step size actually taken; 0 when the step was skipped.
    pub lr_used: f64,
}

/// One descent step with backtracking halving.
pub fn backtracking_step(
    theta: &PolicyParams,
    loss: f64,
    grad: &PolicyParams,
    lr: f64,
    max_halvings: u32,
    mut eval: impl FnMut(&PolicyParams) -> Result<f64>,
) -> Result<Step> {
    let mut step = lr;
    for _ in 0..=max_halvings {
        let mut next = theta.clone();
        next.axpy(-step, grad);
        let l = eval(&next)?;
        if l <= loss {
            return Ok(Step {
                params: next,
                loss: l,
                lr_used: step,
            });
        }
        step *= 0.5;
    }
    Ok(Step {
        params: theta.clone(),
        loss,
        lr_used: 0.0,
    })
}

/// Full-batch NLL descent. Returns the trained policy and the NLL before
/// training followed by the NLL after each epoch (non-increasing).
pub fn fit_nll(
    init: &PolicyParams,
    items: &[SftItem],
    epochs: usize,
    lr: f64,
    max_halvings: u32,
) -> Result<(PolicyParams, Vec<f64>)> {
    let mut theta = init.clone();
    let (mut loss, mut grad) = corpus_nll_grad(&theta, items)?;
    let mut history = vec![loss];
    for _ in 0..epochs {
        let step = backtracking_step(&theta, loss, &grad, lr, max_halvings, |p| corpus_nll(p, items))?;
        theta = step.params;
        let (l, g) = corpus_nll_grad(&theta, items)?;
        loss = l;
        grad = g;
        history.push(loss);
    }
    Ok((theta, history))
}

/// Trains the biased base policy from zeros on image-free captions. The
/// visual block stays at zero because every context is the null image.
pub fn pretrain_base(world: &World, corpus: &[Caption], epochs: usize, lr: f64, max_halvings: u32) -> Result<(PolicyParams, Vec<f64>)> {
    let items: Vec<SftItem> = corpus
        .iter()
        .map(|c| SftItem::text_only(world.vocab.n_obj, c))
        .collect();
    let init = PolicyParams::zeros(world.vocab, world.n_prompts());
    fit_nll(&init, &items, epochs, lr, max_halvings)
}

/// SFT warm-up on grounded captions.
pub fn sft_warmup(
    base: &PolicyParams,
    corpus: &[SftItem],
    epochs: usize,
    lr: f64,
    max_halvings: u32,
) -> Result<(PolicyParams, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("SFT corpus is empty".into()));
    }
    fit_nll(base, corpus, epochs, lr, max_halvings)
}

/// Policies in play during one preference round.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub round: usize,
    /// Trainable, initialized from round `r - 1`.
    pub policy: PolicyParams,
    /// Round `r - 2` checkpoint (base policy at `r = 1`).
    pub scoring_ref: FrozenPolicy,
    /// Frozen round `r - 1` checkpoint.
    pub opt_ref: FrozenPolicy,
}

impl RoundState {
    pub fn new(round: usize, previous: &PolicyParams, scoring_ref: FrozenPolicy) -> Result<Self> {
        if round == 0 {
            return Err(Error::InvalidInput("preference rounds start at 1".into()));
        }
        if !previous.same_shape(&scoring_ref) {
            return Err(Error::Shape("scoring reference shaped for another world".into()));
        }
        Ok(RoundState {
            round,
            policy: previous.clone(),
            scoring_ref,
            opt_ref: previous.clone_frozen(),
        })
    }

    /// The sampling policy is the round `r - 1` checkpoint.
    pub fn sampler(&self) -> &PolicyParams {
        &self.opt_ref
    }
}

/// An (image, prompt) slot of the preference dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Slot {
    pub image_id: usize,
    pub prompt_id: usize,
}

/// Training slots; `data_fraction < 1` keeps a seeded random subset in the
/// original order.
pub fn training_slots(world: &World, data_fraction: f64, seed: u64) -> Vec<Slot> {
    let all: Vec<Slot> = world
        .train_images()
        .iter()
        .flat_map(|img| {
            world.prompts.iter().map(move |&p| Slot {
                image_id: img.id,
                prompt_id: p,
            })
        })
        .collect();
    if data_fraction >= 1.0 {
        return all;
    }
    let keep = ((all.len() as f64) * data_fraction).ceil().max(1.0) as usize;
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(&[seed, TAG_SUBSET])));
    idx.truncate(keep);
    idx.sort_unstable();
    idx.into_iter().map(|i| all[i]).collect()
}

/// Per-slot result of stage (A).
#[derive(Debug, Clone)]
pub struct SiftedSlot {
    pub slot: Slot,
    pub candidates: Vec<ScoredCandidate>,
    pub outcome: Outcome,
}

/// Stage (A): sample, score, select extrema and post-process every slot.
pub fn sift_round(
    state: &RoundState,
    text_ref: &PolicyParams,
    world: &World,
    slots: &[Slot],
    cfg: &RunConfig,
) -> Result<Vec<SiftedSlot>> {
    let sampler = state.sampler();
    let max_len = world.config.max_len;
    slots
        .par_iter()
        .enumerate()
        .map(|(i, &slot)| {
            let image = &world.images[slot.image_id];
            let ctx = Context::new(image.phi.clone(), slot.prompt_id);
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[
                cfg.train.seed,
                TAG_SAMPLE,
                state.round as u64,
                i as u64,
            ]));
            let captions = generate_candidates(sampler, &ctx, slot.image_id, cfg.sift.k, cfg.sift.temperature, max_len, &mut rng)?;
            let candidates = captions
                .into_iter()
                .map(|caption| {
                    let score = score_candidate(sampler, &state.scoring_ref, text_ref, &ctx, &caption.tokens, cfg.reward.gamma)?;
                    Ok(ScoredCandidate { caption, score })
                })
                .collect::<Result<Vec<_>>>()?;
            let raw = PreferencePair::from_extrema(&candidates)?;
            let y_sft = grounded_caption(world, image, slot.prompt_id);
            let outcome = postprocess(&world.vocab, &raw, Some(&y_sft), &cfg.sift.filter);
            Ok(SiftedSlot { slot, candidates, outcome })
        })
        .collect()
}

/// Attempts per slot to draw an external response that needs correction.
const FIXED_ATTEMPTS: usize = 8;

/// Static off-policy pairs, built once: the rejected side is a response of
/// an external captioner (`annotated`), the chosen side its minimal
/// correction in which every hallucinated object is replaced by an object of
/// the image. Slots whose external responses never hallucinate are skipped.
pub fn fixed_pairs(
    world: &World,
    slots: &[Slot],
    annotated: &PolicyParams,
    temperature: f64,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    let zero = RewardScore {
        r_image: 0.0,
        r_text: 0.0,
        s: 0.0,
        gamma: 0.0,
    };
    let mut pairs = Vec::new();
    for (i, slot) in slots.iter().enumerate() {
        let image = &world.images[slot.image_id];
        let ctx = Context::new(image.phi.clone(), slot.prompt_id);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, TAG_FIXED, i as u64]));
        for _ in 0..FIXED_ATTEMPTS {
            let y = annotated.sample(&ctx, temperature, world.config.max_len, &mut rng)?;
            if !y.iter().any(|&t| world.vocab.is_object(t) && !image.contains(t)) {
                continue;
            }
            let corrected: Vec<Token> = y
                .iter()
                .map(|&t| {
                    if world.vocab.is_object(t) && !image.contains(t) {
                        image.objects[rng.gen_range(0..image.objects.len())]
                    } else {
                        t
                    }
                })
                .collect();
            let caption = |tokens| Caption {
                image_id: slot.image_id,
                prompt_id: slot.prompt_id,
                tokens,
            };
            pairs.push(PreferencePair {
                image_id: slot.image_id,
                prompt_id: slot.prompt_id,
                chosen: caption(corrected),
                rejected: caption(y),
                s_chosen: 0.0,
                s_rejected: 0.0,
                score_chosen: zero,
                score_rejected: zero,
                flags: PairFlags::default(),
            });
            break;
        }
    }
    Ok(pairs)
}

/// Rejected-image features for pair `index`; `epoch` is `None` when the
/// perturbation is fixed per pair.
pub fn rejected_image(
    world: &World,
    image_id: usize,
    cfg: &RunConfig,
    sched: &DiffusionSchedule,
    round: usize,
    index: usize,
    epoch: Option<usize>,
) -> Result<Vec<f64>> {
    let seed = stream_seed(&[
        cfg.train.seed,
        TAG_PERTURB,
        round as u64,
        index as u64,
        epoch.map_or(u64::MAX, |e| e as u64),
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb(
        cfg.perturb.operator,
        &world.images[image_id],
        world.train_images(),
        &cfg.perturb,
        Some(sched),
        &mut rng,
    )
}

pub fn training_pairs(
    world: &World,
    pairs: &[PreferencePair],
    cfg: &RunConfig,
    sched: &DiffusionSchedule,
    round: usize,
    epoch: Option<usize>,
) -> Result<Vec<TrainingPair>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let phi = world.images[p.image_id].phi.clone();
            let tilde = rejected_image(world, p.image_id, cfg, sched, round, i, epoch)?;
            Ok(TrainingPair {
                ctx: Context::new(phi, p.prompt_id),
                ctx_tilde: Context::new(tilde, p.prompt_id),
                chosen: p.chosen.tokens.clone(),
                rejected: p.rejected.tokens.clone(),
            })
        })
        .collect()
}

/// One optimization step of stage (B).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub round: usize,
    pub epoch: usize,
    pub step: usize,
    pub lr_used: f64,
    /// Minibatch loss before the step.
    pub loss: LossBreakdown,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "round,epoch,step,lr_used,l_ctp,l_cvp,l_anchor,l_total,margin_delta";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.round,
            self.epoch,
            self.step,
            self.lr_used,
            self.loss.l_ctp,
            self.loss.l_cvp,
            self.loss.l_anchor,
            self.loss.l_total,
            self.loss.margin_delta
        )
    }
}

/// Stage (B): minimizes the composite loss against the frozen reference.
/// `batches_for_epoch` supplies the training pairs of each epoch.
pub fn train_preference(
    policy: &PolicyParams,
    opt_ref: &FrozenPolicy,
    cfg: &RunConfig,
    round: usize,
    mut pairs_for_epoch: impl FnMut(usize) -> Result<Vec<TrainingPair>>,
) -> Result<(PolicyParams, Vec<StepLog>)> {
    let mut theta = policy.clone();
    let mut log = Vec::new();
    let mut step_no = 0;
    for epoch in 0..cfg.train.epochs_per_round {
        let pairs = pairs_for_epoch(epoch)?;
        if pairs.is_empty() {
            return Err(Error::Degenerate("no training pairs".into()));
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(&[
            cfg.train.seed,
            TAG_SHUFFLE,
            round as u64,
            epoch as u64,
        ])));
        let bs = if cfg.train.batch_size == 0 {
            pairs.len()
        } else {
            cfg.train.batch_size
        };
        for chunk in order.chunks(bs) {
            let batch: Vec<TrainingPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let (breakdown, grad) = loss_total(&theta, opt_ref, &batch, &cfg.loss)?;
            let step = backtracking_step(&theta, breakdown.l_total, &grad, cfg.train.lr, cfg.train.max_halvings, |p| {
                Ok(loss_total_value(p, opt_ref, &batch, &cfg.loss)?.l_total)
            })?;
            theta = step.params;
            log.push(StepLog {
                round,
                epoch,
                step: step_no,
                lr_used: step.lr_used,
                loss: breakdown,
            });
            step_no += 1;
        }
    }
    Ok((theta, log))
}

#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub round: usize,
    pub policy: PolicyParams,
    pub sifted: Vec<SiftedSlot>,
    pub pairs: Vec<PreferencePair>,
    /// Training pairs of the last epoch, with their rejected images.
    pub training: Vec<TrainingPair>,
    pub stats: SiftStats,
    pub steps: Vec<StepLog>,
    pub scoring_ref_hash: String,
    pub opt_ref_hash_before: String,
    pub opt_ref_hash_after: String,
}

/// Runs stages (A) and (B) of one round. With `fixed` pairs, stage (A) is
/// skipped and the given pairs are reused.
pub fn run_round(
    state: &RoundState,
    text_ref: &PolicyParams,
    world: &World,
    slots: &[Slot],
    cfg: &RunConfig,
    fixed: Option<&[PreferencePair]>,
) -> Result<RoundOutput> {
    let opt_ref_hash_before = state.opt_ref.content_hash();
    let (sifted, pairs, stats) = match fixed {
        Some(p) => (
            Vec::new(),
            p.to_vec(),
            SiftStats {
                emitted: p.len(),
                ..Default::default()
            },
        ),
        None => {
            let sifted = sift_round(state, text_ref, world, slots, cfg)?;
            let mut stats = SiftStats::default();
            let mut pairs = Vec::new();
            for s in &sifted {
                stats.record(&s.outcome);
                if let Outcome::Kept(p) = &s.outcome {
                    pairs.push(p.clone());
                }
            }
            (sifted, pairs, stats)
        }
    };
    if pairs.is_empty() {
        return Err(Error::Degenerate(format!(
            "round {}: every preference pair was screened out",
            state.round
        )));
    }
    let sched = DiffusionSchedule::linear(&cfg.perturb.schedule)?;
    let fixed_tilde = if cfg.perturb.resample_per_epoch {
        None
    } else {
        Some(training_pairs(world, &pairs, cfg, &sched, state.round, None)?)
    };
    let mut last = Vec::new();
    let (policy, steps) = train_preference(&state.policy, &state.opt_ref, cfg, state.round, |epoch| {
        let t = match &fixed_tilde {
            Some(t) => t.clone(),
            None => training_pairs(world, &pairs, cfg, &sched, state.round, Some(epoch))?,
        };
        last = t.clone();
        Ok(t)
    })?;
    Ok(RoundOutput {
        round: state.round,
        policy,
        sifted,
        pairs,
        training: last,
        stats,
        steps,
        scoring_ref_hash: state.scoring_ref.content_hash(),
        opt_ref_hash_before,
        opt_ref_hash_after: state.opt_ref.content_hash(),
    })
}

/// Metrics of a round's final policy: decode metrics plus the mean
/// log-likelihood margin and the loss against the optimization reference on
/// the round's training pairs.
pub fn round_metrics(
    world: &World,
    policy: &PolicyParams,
    opt_ref: &PolicyParams,
    training: &[TrainingPair],
    round: usize,
    cfg: &RunConfig,
) -> Result<MetricsRow> {
    let mut row = score_metrics(policy, world, &cfg.eval)?;
    row.round = round;
    if !training.is_empty() {
        let losses = loss_total_value(policy, opt_ref, training, &cfg.loss)?;
        let mut margin = 0.0;
        for p in training {
            margin += policy.sequence_logprob(&p.ctx, &p.chosen, false)?
                - policy.sequence_logprob(&p.ctx, &p.rejected, false)?;
        }
        row.mean_margin = margin / training.len() as f64;
        row.n_pairs = training.len();
        row = row.with_losses(&losses);
    }
    Ok(row)
}

/// Image-free biased corpus of a run.
pub fn make_biased_corpus(world: &World, cfg: &RunConfig) -> Result<Vec<Caption>> {
    biased_text_corpus(world, cfg.pretrain.n_biased, stream_seed(&[cfg.train.seed, TAG_CORPUS]))
}

/// Pretraining stage of a run.
pub fn pretrain_stage(world: &World, corpus: &[Caption], cfg: &RunConfig) -> Result<(PolicyParams, Vec<f64>)> {
    pretrain_base(world, corpus, cfg.pretrain.epochs, cfg.pretrain.lr, cfg.train.max_halvings)
}

/// Warm-up stage of a run; returns the base policy unchanged (and an empty
/// history) when warm-up is disabled.
pub fn warmup_stage(world: &World, base: &PolicyParams, cfg: &RunConfig) -> Result<(PolicyParams, Vec<f64>)> {
    if !cfg.train.warmup {
        return Ok((base.clone(), Vec::new()));
    }
    let items: Vec<SftItem> = world.sft_corpus().iter().map(|c| SftItem::grounded(world, c)).collect();
    sft_warmup(base, &items, cfg.train.sft_epochs, cfg.train.sft_lr, cfg.train.max_halvings)
}

/// Round-0 metrics row.
pub fn warmup_metrics(world: &World, warm: &PolicyParams, cfg: &RunConfig) -> Result<MetricsRow> {
    let mut row = score_metrics(warm, world, &cfg.eval)?;
    row.round = 0;
    Ok(row)
}

/// Scoring reference for round `r`: the base policy at `r = 1`, else the
/// round `r - 2` checkpoint.
pub fn scoring_reference(round: usize, base: &PolicyParams, checkpoints: &[PolicyParams]) -> Result<FrozenPolicy> {
    match round {
        0 => Err(Error::InvalidInput("preference rounds start at 1".into())),
        1 => Ok(base.clone_frozen()),
        r => checkpoints
            .get(r - 2)
            .map(PolicyParams::clone_frozen)
            .ok_or_else(|| Error::InvalidInput(format!("round {r} needs the round {} checkpoint", r - 2))),
    }
}

/// Runs preference round `r` given the base policy and the checkpoints of
/// rounds `0..r` (index 0 is the warm-up policy).
pub fn round_stage(
    world: &World,
    base: &PolicyParams,
    checkpoints: &[PolicyParams],
    round: usize,
    cfg: &RunConfig,
) -> Result<(RoundOutput, MetricsRow)> {
    if round == 0 || checkpoints.len() < round {
        return Err(Error::InvalidInput(format!(
            "round {round} needs checkpoints 0..{round}, have {}",
            checkpoints.len()
        )));
    }
    let scoring_ref = scoring_reference(round, base, checkpoints)?;
    let state = RoundState::new(round, &checkpoints[round - 1], scoring_ref)?;
    let text_ref = match cfg.reward.text_reference {
        TextReference::Scoring => state.scoring_ref.clone(),
        TextReference::Warmup => checkpoints[0].clone_frozen(),
    };
    let slots = training_slots(world, cfg.train.data_fraction, cfg.train.seed);
    let fixed = match cfg.train.pair_source {
        PairSource::Fixed => Some(fixed_pairs(world, &slots, base, cfg.sift.temperature, cfg.train.seed)?),
        PairSource::SelfGenerated => None,
    };
    let out = run_round(&state, &text_ref, world, &slots, cfg, fixed.as_deref())?;
    let row = round_metrics(world, &out.policy, &state.opt_ref, &out.training, round, cfg)?;
    Ok((out, row))
}

/// Everything produced by a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub config: RunConfig,
    pub world: World,
    pub biased_corpus: Vec<Caption>,
    pub base: PolicyParams,
    pub pretrain_nll: Vec<f64>,
    pub sft_nll: Vec<f64>,
    /// `checkpoints[r]` is the round-`r` policy; index 0 is the warm-up.
    pub checkpoints: Vec<PolicyParams>,
    pub rounds: Vec<RoundOutput>,
    pub metrics: Vec<MetricsRow>,
}

impl PipelineRun {
    pub fn final_metrics(&self) -> &MetricsRow {
        self.metrics.last().expect("round 0 is always present")
    }
}

/// Pretraining, warm-up and all preference rounds, in memory.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let world = generate_world(cfg.train.seed, &cfg.world)?;
    let biased_corpus = make_biased_corpus(&world, cfg)?;
    let (base, pretrain_nll) = pretrain_stage(&world, &biased_corpus, cfg)?;
    let (warm, sft_nll) = warmup_stage(&world, &base, cfg)?;
    let mut metrics = vec![warmup_metrics(&world, &warm, cfg)?];
    let mut checkpoints = vec![warm];
    let mut rounds = Vec::with_capacity(cfg.train.rounds);
    for r in 1..=cfg.train.rounds {
        let (out, row) = round_stage(&world, &base, &checkpoints, r, cfg)?;
        checkpoints.push(out.policy.clone());
        metrics.push(row);
        rounds.push(out);
    }
    Ok(PipelineRun {
        config: cfg.clone(),
        world,
        biased_corpus,
        base,
        pretrain_nll,
        sft_nll,
        checkpoints,
        rounds,
        metrics,
    })
}
