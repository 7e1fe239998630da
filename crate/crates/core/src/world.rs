//! Synthetic grounded-captioning world.
//!
//! A world is a small vocabulary of object and filler tokens, a set of
//! "images" (object-intensity vectors) with ground-truth captions, and a
//! language-prior transition table with a handful of engineered
//! object-to-object shortcuts. Pretraining on text sampled from the prior
//! while ignoring the image produces a policy that hallucinates along those
//! shortcuts.
//!
//! Token layout: objects occupy `[0, n_obj)`, fillers `[n_obj, n_obj + n_filler)`,
//! followed by `BOS` and `EOS`.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub type Token = usize;

/// `image_id` carried by captions that were generated without any image.
pub const NO_IMAGE: usize = usize::MAX;

/// Token-id layout shared by the world and every policy built on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_obj: usize,
    pub n_filler: usize,
}

impl Vocab {
    pub fn new(n_obj: usize, n_filler: usize) -> Self {
        Vocab { n_obj, n_filler }
    }

    pub fn size(&self) -> usize {
        self.n_obj + self.n_filler + 2
    }

    pub fn bos(&self) -> Token {
        self.n_obj + self.n_filler
    }

    pub fn eos(&self) -> Token {
        self.n_obj + self.n_filler + 1
    }

    pub fn filler(&self, k: usize) -> Token {
        self.n_obj + k % self.n_filler
    }

    pub fn is_object(&self, t: Token) -> bool {
        t < self.n_obj
    }

    pub fn is_filler(&self, t: Token) -> bool {
        t >= self.n_obj && t < self.n_obj + self.n_filler
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_obj: usize,
    pub n_filler: usize,
    pub n_prompts: usize,
    pub n_images: usize,
    pub max_len: usize,
    /// Upper bound on objects per image (lower bound is 1).
    pub max_objects: usize,
    /// Number of engineered object-to-object shortcuts in the prior.
    pub n_bias_pairs: usize,
    /// Weight of a shortcut as a multiple of its row median.
    pub bias_strength: f64,
    /// Fraction of images held out for evaluation.
    pub eval_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_obj: 12,
            n_filler: 4,
            n_prompts: 2,
            n_images: 200,
            max_len: 12,
            max_objects: 4,
            n_bias_pairs: 6,
            bias_strength: 60.0,
            eval_fraction: 0.25,
        }
    }
}

impl WorldConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.n_obj, self.n_filler)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len < 3 {
            return Err(Error::Config(format!(
                "max_len = {} cannot hold BOS, one token and EOS",
                self.max_len
            )));
        }
        if self.n_obj < 4 || self.n_filler < 2 || self.n_images < 50 {
            return Err(Error::Config(format!(
                "world needs n_obj >= 4, n_filler >= 2, n_images >= 50 (got {}, {}, {})",
                self.n_obj, self.n_filler, self.n_images
            )));
        }
        if self.n_prompts == 0 {
            return Err(Error::Config("n_prompts must be positive".into()));
        }
        if self.max_objects == 0 || self.max_objects > self.n_obj {
            return Err(Error::Config(format!(
                "max_objects must lie in [1, n_obj], got {}",
                self.max_objects
            )));
        }
        if 2 + 2 * self.max_objects > self.max_len {
            return Err(Error::Config(format!(
                "grounded template for {} objects needs {} tokens, max_len is {}",
                self.max_objects,
                2 + 2 * self.max_objects,
                self.max_len
            )));
        }
        if self.n_bias_pairs > self.n_obj * (self.n_obj - 1) {
            return Err(Error::Config("too many bias pairs for n_obj".into()));
        }
        if !(self.bias_strength.is_finite() && self.bias_strength > 0.0) {
            return Err(Error::Config("bias_strength must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config("eval_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub id: usize,
    /// Object intensities; exactly zero for absent objects.
    pub phi: Vec<f64>,
    /// Present objects in ascending order.
    pub objects: Vec<Token>,
}

impl Image {
    pub fn contains(&self, obj: Token) -> bool {
        self.objects.binary_search(&obj).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption {
    pub image_id: usize,
    pub prompt_id: usize,
    pub tokens: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub config: WorldConfig,
    pub vocab: Vocab,
    /// Language-prior transition weights, `[n_vocab x n_vocab]`.
    pub prior: Matrix,
    pub bias_pairs: Vec<(Token, Token)>,
    pub images: Vec<Image>,
    pub prompts: Vec<usize>,
    /// Images with id `>= n_train` form the held-out evaluation split.
    pub n_train: usize,
}

impl World {
    pub fn n_vocab(&self) -> usize {
        self.vocab.size()
    }

    pub fn n_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn image(&self, id: usize) -> Option<&Image> {
        self.images.get(id)
    }

    pub fn train_images(&self) -> &[Image] {
        &self.images[..self.n_train]
    }

    pub fn eval_images(&self) -> &[Image] {
        &self.images[self.n_train..]
    }

    /// Grounded (image, prompt, caption) triples over the training split.
    pub fn sft_corpus(&self) -> Vec<Caption> {
        self.train_images()
            .iter()
            .flat_map(|img| self.prompts.iter().map(move |&p| grounded_caption(self, img, p)))
            .collect()
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Builds the world deterministically from `(seed, cfg)`.
pub fn generate_world(seed: u64, cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let vocab = cfg.vocab();
    let n_vocab = vocab.size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Object popularity drives which objects the prior mentions when it has
    // no image to look at.
    let popularity: Vec<f64> = {
        let dist = LogNormal::new(0.0, 0.75).expect("valid lognormal");
        (0..cfg.n_obj).map(|_| dist.sample(&mut rng)).collect()
    };

    let floor = 0.05;
    let mut prior = Matrix::zeros(n_vocab, n_vocab);
    for row in 0..n_vocab {
        for col in 0..n_vocab {
            if col != vocab.bos() {
                prior.set(row, col, floor);
            }
        }
    }
    let bos = vocab.bos();
    let eos = vocab.eos();
    for k in 0..cfg.n_filler {
        prior.set(bos, vocab.filler(k), if k == 0 { 4.0 } else { 1.0 });
    }
    for k in 0..cfg.n_filler {
        let f = vocab.filler(k);
        for (m, &w) in popularity.iter().enumerate() {
            prior.set(f, m, w);
        }
        prior.set(f, eos, 0.3);
    }
    for a in 0..cfg.n_obj {
        for k in 0..cfg.n_filler {
            prior.set(a, vocab.filler(k), 1.0);
        }
        prior.set(a, eos, 1.2);
    }

    let mut bias_pairs: Vec<(Token, Token)> = Vec::with_capacity(cfg.n_bias_pairs);
    while bias_pairs.len() < cfg.n_bias_pairs {
        let a = rng.gen_range(0..cfg.n_obj);
        let b = rng.gen_range(0..cfg.n_obj);
        if a != b && !bias_pairs.iter().any(|&(x, _)| x == a) {
            bias_pairs.push((a, b));
        }
        if bias_pairs.len() == cfg.n_obj {
            break;
        }
    }
    // Heads may repeat once every object already has one shortcut.
    while bias_pairs.len() < cfg.n_bias_pairs {
        let a = rng.gen_range(0..cfg.n_obj);
        let b = rng.gen_range(0..cfg.n_obj);
        if a != b && !bias_pairs.contains(&(a, b)) {
            bias_pairs.push((a, b));
        }
    }
    for &(a, b) in &bias_pairs {
        let med = median(prior.row(a));
        let boosted = (cfg.bias_strength * med).max(prior.get(a, b));
        prior.set(a, b, boosted);
    }

    let mut images = Vec::with_capacity(cfg.n_images);
    for id in 0..cfg.n_images {
        let k = rng.gen_range(1..=cfg.max_objects);
        let mut objects: Vec<Token> = index::sample(&mut rng, cfg.n_obj, k).into_vec();
        objects.sort_unstable();
        let mut phi = vec![0.0; cfg.n_obj];
        for &m in &objects {
            phi[m] = rng.gen_range(0.3..=1.0);
        }
        images.push(Image { id, phi, objects });
    }

    let n_eval = (cfg.n_images as f64 * cfg.eval_fraction).round() as usize;
    Ok(World {
        seed,
        config: cfg.clone(),
        vocab,
        prior,
        bias_pairs,
        images,
        prompts: (0..cfg.n_prompts).collect(),
        n_train: cfg.n_images - n_eval,
    })
}

/// Ground-truth caption: objects in ascending id order, each preceded by a
/// filler whose index is the object's position shifted by the prompt id.
pub fn grounded_caption(world: &World, image: &Image, prompt_id: usize) -> Caption {
    let vocab = world.vocab;
    let mut tokens = Vec::with_capacity(2 + 2 * image.objects.len());
    tokens.push(vocab.bos());
    for (pos, &obj) in image.objects.iter().enumerate() {
        tokens.push(vocab.filler(pos + prompt_id));
        tokens.push(obj);
    }
    tokens.push(vocab.eos());
    Caption {
        image_id: image.id,
        prompt_id,
        tokens,
    }
}

/// Text-only captions drawn from the prior transition table, ignoring images.
pub fn biased_text_corpus(world: &World, n: usize, seed: u64) -> Result<Vec<Caption>> {
    if n == 0 {
        return Err(Error::InvalidInput("biased corpus size must be >= 1".into()));
    }
    let vocab = world.vocab;
    let n_vocab = vocab.size();
    let max_len = world.config.max_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cumulative: Vec<Vec<f64>> = (0..n_vocab)
        .map(|r| {
            let mut acc = 0.0;
            world
                .prior
                .row(r)
                .iter()
                .map(|&w| {
                    acc += w;
                    acc
                })
                .collect()
        })
        .collect();

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let prompt_id = rng.gen_range(0..world.n_prompts());
        let mut tokens = vec![vocab.bos()];
        loop {
            if tokens.len() == max_len - 1 {
                tokens.push(vocab.eos());
                break;
            }
            let prev = *tokens.last().expect("nonempty");
            let row = &cumulative[prev];
            let u = rng.gen::<f64>() * row[n_vocab - 1];
            let next = row.partition_point(|&c| c <= u).min(n_vocab - 1);
            tokens.push(next);
            if next == vocab.eos() {
                break;
            }
        }
        out.push(Caption {
            image_id: NO_IMAGE,
            prompt_id,
            tokens,
        });
    }
    Ok(out)
}

/// Object tokens of a caption, in order of appearance.
pub fn mentioned_objects(vocab: &Vocab, tokens: &[Token]) -> Vec<Token> {
    tokens.iter().copied().filter(|&t| vocab.is_object(t)).collect()
}

/// Distinct object tokens of a caption.
pub fn mentioned_object_set(vocab: &Vocab, tokens: &[Token]) -> BTreeSet<Token> {
    tokens.iter().copied().filter(|&t| vocab.is_object(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_short_max_len() {
        let cfg = WorldConfig {
            max_len: 2,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(1, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_small_worlds() {
        for cfg in [
            WorldConfig { n_obj: 3, ..Default::default() },
            WorldConfig { n_filler: 1, ..Default::default() },
            WorldConfig { n_images: 49, ..Default::default() },
        ] {
            assert!(generate_world(1, &cfg).is_err());
        }
    }

    #[test]
    fn vocab_layout_is_dense() {
        let v = Vocab::new(12, 4);
        assert_eq!(v.size(), 18);
        assert_eq!(v.bos(), 16);
        assert_eq!(v.eos(), 17);
        assert!(v.is_filler(12) && v.is_filler(15) && !v.is_filler(16));
        assert_eq!(v.filler(5), 13);
    }

    #[test]
    fn single_object_caption_shape() {
        let world = generate_world(1, &WorldConfig::default()).unwrap();
        let img = Image {
            id: 0,
            phi: {
                let mut p = vec![0.0; 12];
                p[3] = 0.5;
                p
            },
            objects: vec![3],
        };
        let cap = grounded_caption(&world, &img, 0);
        assert_eq!(cap.tokens, vec![16, 12, 3, 17]);
    }

    #[test]
    fn two_object_caption_order() {
        let world = generate_world(1, &WorldConfig::default()).unwrap();
        let mut phi = vec![0.0; 12];
        phi[5] = 1.0;
        phi[2] = 0.4;
        let img = Image { id: 0, phi, objects: vec![2, 5] };
        let cap = grounded_caption(&world, &img, 1);
        assert_eq!(mentioned_objects(&world.vocab, &cap.tokens), vec![2, 5]);
    }

    #[test]
    fn biased_corpus_requires_positive_size() {
        let world = generate_world(1, &WorldConfig::default()).unwrap();
        assert!(biased_text_corpus(&world, 0, 0).is_err());
    }

    #[test]
    fn biased_corpus_is_seeded() {
        let world = generate_world(1, &WorldConfig::default()).unwrap();
        let a = biased_text_corpus(&world, 200, 9).unwrap();
        let b = biased_text_corpus(&world, 200, 9).unwrap();
        assert_eq!(a, b);
        let max_len = world.config.max_len;
        for c in &a {
            assert_eq!(c.image_id, NO_IMAGE);
            assert_eq!(c.tokens[0], world.vocab.bos());
            assert_eq!(*c.tokens.last().unwrap(), world.vocab.eos());
            assert!(c.tokens.len() <= max_len);
            assert!(!c.tokens[1..].contains(&world.vocab.bos()));
        }
    }
}
