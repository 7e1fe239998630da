//! Hallucination metrics on the synthetic world and the theory harness.
//!
//! Metric analogs, computed over decoded responses on held-out images:
//!
//! * `chair_i`: hallucinated object mentions / all object mentions.
//! * `hal_rate`: fraction of responses with at least one hallucinated object.
//! * `cover`: mean fraction of an image's objects that the response mentions.

pub mod theory;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::LossBreakdown;
use crate::policy::{Context, PolicyParams};
use crate::rng::stream_seed;
use crate::world::{mentioned_object_set, Image, Token, Vocab, World};

/// Mention counts of one response against its image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MentionCounts {
    pub grounded: usize,
    pub hallucinated: usize,
    /// Distinct image objects mentioned at least once.
    pub covered: usize,
    pub n_objects: usize,
}

impl MentionCounts {
    pub fn of(vocab: &Vocab, image: &Image, tokens: &[Token]) -> Self {
        let mut c = MentionCounts {
            n_objects: image.objects.len(),
            ..Default::default()
        };
        for &t in tokens.iter().filter(|&&t| vocab.is_object(t)) {
            if image.contains(t) {
                c.grounded += 1;
            } else {
                c.hallucinated += 1;
            }
        }
        c.covered = mentioned_object_set(vocab, tokens)
            .iter()
            .filter(|&&t| image.contains(t))
            .count();
        c
    }

    pub fn mentions(&self) -> usize {
        self.grounded + self.hallucinated
    }
}

/// Grounding quality `s*(c, y)`: signed fraction of grounded object
/// mentions, in `[-1, 1]`; zero when the response mentions no object.
pub fn grounding_quality(vocab: &Vocab, image: &Image, tokens: &[Token]) -> f64 {
    let c = MentionCounts::of(vocab, image, tokens);
    (c.grounded as f64 - c.hallucinated as f64) / c.mentions().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    /// Responses drawn per (image, prompt) when sampling.
    pub samples_per_context: usize,
    pub seed: u64,
    pub split: Split,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Sample,
            temperature: 0.7,
            samples_per_context: 8,
            seed: 0x5eed_e7a1,
            split: Split::Eval,
        }
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub round: usize,
    pub chair_i: f64,
    pub hal_rate: f64,
    pub cover: f64,
    pub mean_margin: f64,
    pub n_pairs: usize,
    pub l_ctp: f64,
    pub l_cvp: f64,
    pub l_anchor: f64,
    pub l_total: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "seed,round,chair_i,hal_rate,cover,mean_margin,n_pairs,l_ctp,l_cvp,l_anchor,l_total";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.round,
            self.chair_i,
            self.hal_rate,
            self.cover,
            self.mean_margin,
            self.n_pairs,
            self.l_ctp,
            self.l_cvp,
            self.l_anchor,
            self.l_total
        )
    }

    pub fn from_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return None;
        }
        Some(MetricsRow {
            seed: f[0].parse().ok()?,
            round: f[1].parse().ok()?,
            chair_i: f[2].parse().ok()?,
            hal_rate: f[3].parse().ok()?,
            cover: f[4].parse().ok()?,
            mean_margin: f[5].parse().ok()?,
            n_pairs: f[6].parse().ok()?,
            l_ctp: f[7].parse().ok()?,
            l_cvp: f[8].parse().ok()?,
            l_anchor: f[9].parse().ok()?,
            l_total: f[10].parse().ok()?,
        })
    }

    pub fn with_losses(mut self, b: &LossBreakdown) -> Self {
        self.l_ctp = b.l_ctp;
        self.l_cvp = b.l_cvp;
        self.l_anchor = b.l_anchor;
        self.l_total = b.l_total;
        self
    }
}

/// Aggregated decode metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DecodeMetrics {
    pub chair_i: f64,
    pub hal_rate: f64,
    pub cover: f64,
    pub responses: usize,
}

/// Aggregates metrics over `(image, response)` pairs.
pub fn aggregate<'a>(
    vocab: &Vocab,
    responses: impl IntoIterator<Item = (&'a Image, &'a [Token])>,
) -> Result<DecodeMetrics> {
    let mut mentions = 0usize;
    let mut hallucinated = 0usize;
    let mut hal_responses = 0usize;
    let mut cover_sum = 0.0;
    let mut n = 0usize;
    for (image, tokens) in responses {
        let c = MentionCounts::of(vocab, image, tokens);
        mentions += c.mentions();
        hallucinated += c.hallucinated;
        hal_responses += usize::from(c.hallucinated > 0);
        cover_sum += c.covered as f64 / c.n_objects.max(1) as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput("no responses to evaluate".into()));
    }
    Ok(DecodeMetrics {
        chair_i: if mentions == 0 {
            0.0
        } else {
            hallucinated as f64 / mentions as f64
        },
        hal_rate: hal_responses as f64 / n as f64,
        cover: cover_sum / n as f64,
        responses: n,
    })
}

/// Decodes responses for every (image, prompt) of the split.
pub fn decode_split(theta: &PolicyParams, world: &World, cfg: &DecodeConfig) -> Result<Vec<(usize, Vec<Token>)>> {
    let images = match cfg.split {
        Split::Train => world.train_images(),
        Split::Eval => world.eval_images(),
    };
    if images.is_empty() {
        return Err(Error::InvalidInput("evaluation split is empty".into()));
    }
    let per = match cfg.mode {
        DecodeMode::Greedy => 1,
        DecodeMode::Sample => cfg.samples_per_context.max(1),
    };
    let contexts: Vec<(usize, usize)> = images
        .iter()
        .flat_map(|img| world.prompts.iter().map(move |&p| (img.id, p)))
        .collect();
    let max_len = world.config.max_len;
    let decoded: Result<Vec<Vec<(usize, Vec<Token>)>>> = contexts
        .par_iter()
        .enumerate()
        .map(|(i, &(image_id, prompt_id))| {
            let ctx = Context::new(world.images[image_id].phi.clone(), prompt_id);
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[cfg.seed, i as u64]));
            (0..per)
                .map(|_| {
                    let y = match cfg.mode {
                        DecodeMode::Greedy => theta.greedy(&ctx, max_len)?,
                        DecodeMode::Sample => theta.sample(&ctx, cfg.temperature, max_len, &mut rng)?,
                    };
                    Ok((image_id, y))
                })
                .collect()
        })
        .collect();
    Ok(decoded?.into_iter().flatten().collect())
}

/// Decode metrics of a policy on the configured split; round, margin and
/// loss fields are left at zero.
pub fn score_metrics(theta: &PolicyParams, world: &World, cfg: &DecodeConfig) -> Result<MetricsRow> {
    let decoded = decode_split(theta, world, cfg)?;
    let m = aggregate(
        &world.vocab,
        decoded.iter().map(|(id, y)| (&world.images[*id], y.as_slice())),
    )?;
    Ok(MetricsRow {
        seed: world.seed,
        chair_i: m.chair_i,
        hal_rate: m.hal_rate,
        cover: m.cover,
        ..Default::default()
    })
}
