//! Log-linear bigram captioning policy.
//!
//! The next-token logits are
//! `z_j = transition[prev, j] + prompt[p, j] + sum_m phi[m] * visual[m, j]`,
//! so every log-probability and its gradient is available in closed form.
//! An all-zero `phi` is the null image.

use std::fs;
use std::io::Write as _;
use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::world::{Token, Vocab};

/// Below this temperature sampling degenerates to greedy argmax decoding.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

const CHECKPOINT_MAGIC: &[u8; 8] = b"IRISCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Conditioning context: image features plus prompt id.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub phi: Vec<f64>,
    pub prompt_id: usize,
}

impl Context {
    pub fn new(phi: Vec<f64>, prompt_id: usize) -> Self {
        Context { phi, prompt_id }
    }

    /// Null-image context for the same prompt.
    pub fn null(n_obj: usize, prompt_id: usize) -> Self {
        Context {
            phi: vec![0.0; n_obj],
            prompt_id,
        }
    }

    pub fn without_image(&self) -> Self {
        Context::null(self.phi.len(), self.prompt_id)
    }

    pub fn is_null(&self) -> bool {
        self.phi.iter().all(|&x| x == 0.0)
    }
}

/// Policy parameters. Gradients share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: Vocab,
    n_prompts: usize,
    /// `[n_vocab x n_vocab]`, indexed by previous token.
    pub transition: Matrix,
    /// `[n_prompts x n_vocab]`.
    pub prompt: Matrix,
    /// `[n_obj x n_vocab]`.
    pub visual: Matrix,
}

/// Read-only snapshot of a policy, used as a reference within a round.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPolicy(Arc<PolicyParams>);

impl Deref for FrozenPolicy {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

impl FrozenPolicy {
    /// Thawed copy that may be trained.
    pub fn to_trainable(&self) -> PolicyParams {
        (*self.0).clone()
    }
}

pub(crate) fn log_softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for v in z.iter_mut() {
        *v -= lse;
    }
}

impl PolicyParams {
    pub fn zeros(vocab: Vocab, n_prompts: usize) -> Self {
        let n = vocab.size();
        PolicyParams {
            vocab,
            n_prompts,
            transition: Matrix::zeros(n, n),
            prompt: Matrix::zeros(n_prompts, n),
            visual: Matrix::zeros(vocab.n_obj, n),
        }
    }

    /// Random parameters with i.i.d. `N(0, scale^2)` entries.
    pub fn random<R: Rng + ?Sized>(vocab: Vocab, n_prompts: usize, scale: f64, rng: &mut R) -> Self {
        let normal = rand_distr::Normal::new(0.0, scale).expect("finite scale");
        let mut p = PolicyParams::zeros(vocab, n_prompts);
        for v in p.values_mut() {
            *v = rand_distr::Distribution::sample(&normal, rng);
        }
        p
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn n_vocab(&self) -> usize {
        self.vocab.size()
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn n_obj(&self) -> usize {
        self.vocab.n_obj
    }

    pub fn n_params(&self) -> usize {
        self.transition.as_slice().len() + self.prompt.as_slice().len() + self.visual.as_slice().len()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.transition
            .as_slice()
            .iter()
            .chain(self.prompt.as_slice())
            .chain(self.visual.as_slice())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.transition
            .as_mut_slice()
            .iter_mut()
            .chain(self.prompt.as_mut_slice().iter_mut())
            .chain(self.visual.as_mut_slice().iter_mut())
    }

    pub fn zeros_like(&self) -> Self {
        PolicyParams::zeros(self.vocab, self.n_prompts)
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.vocab == other.vocab && self.n_prompts == other.n_prompts
    }

    fn check_same_shape(&self, other: &PolicyParams) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "policies built for different worlds: {:?}/{} vs {:?}/{}",
                self.vocab, self.n_prompts, other.vocab, other.n_prompts
            )))
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &PolicyParams) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in self.values_mut() {
            *a *= alpha;
        }
    }

    pub fn dot(&self, other: &PolicyParams) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn max_abs_diff(&self, other: &PolicyParams) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn clone_frozen(&self) -> FrozenPolicy {
        FrozenPolicy(Arc::new(self.clone()))
    }

    fn check_context(&self, ctx: &Context) -> Result<()> {
        if ctx.phi.len() != self.n_obj() {
            return Err(Error::Shape(format!(
                "context has {} image features, policy expects {}",
                ctx.phi.len(),
                self.n_obj()
            )));
        }
        if ctx.prompt_id >= self.n_prompts {
            return Err(Error::InvalidInput(format!(
                "prompt id {} out of range for {} prompts",
                ctx.prompt_id, self.n_prompts
            )));
        }
        Ok(())
    }

    fn check_sequence(&self, tokens: &[Token]) -> Result<()> {
        let n = self.n_vocab();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= n) {
            return Err(Error::TokenOutOfRange { token: bad, n_vocab: n });
        }
        if tokens.len() < 2 || tokens[0] != self.vocab.bos() {
            return Err(Error::InvalidInput(
                "sequence must start with BOS and predict at least one token".into(),
            ));
        }
        Ok(())
    }

    /// Prompt and image contributions to the logits; constant along a sequence.
    fn context_bias(&self, ctx: &Context) -> Vec<f64> {
        let mut bias = self.prompt.row(ctx.prompt_id).to_vec();
        for (m, &f) in ctx.phi.iter().enumerate() {
            if f != 0.0 {
                for (b, &v) in bias.iter_mut().zip(self.visual.row(m)) {
                    *b += f * v;
                }
            }
        }
        bias
    }

    fn logits_with_bias(&self, bias: &[f64], prev: Token, out: &mut [f64]) {
        for ((o, &t), &b) in out.iter_mut().zip(self.transition.row(prev)).zip(bias) {
            *o = t + b;
        }
    }

    pub fn next_token_logits(&self, ctx: &Context, prev: Token) -> Result<Vec<f64>> {
        self.check_context(ctx)?;
        if prev >= self.n_vocab() {
            return Err(Error::TokenOutOfRange {
                token: prev,
                n_vocab: self.n_vocab(),
            });
        }
        let bias = self.context_bias(ctx);
        let mut z = vec![0.0; self.n_vocab()];
        self.logits_with_bias(&bias, prev, &mut z);
        Ok(z)
    }

    /// Next-token log-probabilities at temperature 1.
    pub fn next_token_logprobs(&self, ctx: &Context, prev: Token) -> Result<Vec<f64>> {
        let mut z = self.next_token_logits(ctx, prev)?;
        log_softmax_in_place(&mut z);
        Ok(z)
    }

    /// Sum over predicted tokens (everything after BOS) of the token
    /// log-probabilities; divided by the predicted-token count when
    /// `normalize` is set.
    pub fn sequence_logprob(&self, ctx: &Context, tokens: &[Token], normalize: bool) -> Result<f64> {
        self.check_context(ctx)?;
        self.check_sequence(tokens)?;
        let bias = self.context_bias(ctx);
        let mut z = vec![0.0; self.n_vocab()];
        let mut total = 0.0;
        for w in tokens.windows(2) {
            self.logits_with_bias(&bias, w[0], &mut z);
            log_softmax_in_place(&mut z);
            total += z[w[1]];
        }
        let predicted = (tokens.len() - 1) as f64;
        Ok(if normalize { total / predicted } else { total })
    }

    /// Adds `scale * grad log pi(tokens | ctx)` (unnormalized) into `grad`.
    pub fn accumulate_logprob_grad(
        &self,
        ctx: &Context,
        tokens: &[Token],
        scale: f64,
        grad: &mut PolicyParams,
    ) -> Result<()> {
        self.check_context(ctx)?;
        self.check_sequence(tokens)?;
        self.check_same_shape(grad)?;
        let n = self.n_vocab();
        let bias = self.context_bias(ctx);
        let mut z = vec![0.0; n];
        // d log pi(y_t) / d z_j = 1[j = y_t] - pi_j, accumulated per position;
        // the prompt and visual blocks see the sum over positions.
        let mut dz_total = vec![0.0; n];
        for w in tokens.windows(2) {
            let (prev, next) = (w[0], w[1]);
            self.logits_with_bias(&bias, prev, &mut z);
            log_softmax_in_place(&mut z);
            let row = grad.transition.row_mut(prev);
            for j in 0..n {
                let d = scale * (f64::from(u8::from(j == next)) - z[j].exp());
                row[j] += d;
                dz_total[j] += d;
            }
        }
        for (g, d) in grad.prompt.row_mut(ctx.prompt_id).iter_mut().zip(&dz_total) {
            *g += d;
        }
        for (m, &f) in ctx.phi.iter().enumerate() {
            if f != 0.0 {
                for (g, d) in grad.visual.row_mut(m).iter_mut().zip(&dz_total) {
                    *g += f * d;
                }
            }
        }
        Ok(())
    }

    /// Exact gradient of the unnormalized sequence log-probability.
    pub fn logprob_grad(&self, ctx: &Context, tokens: &[Token]) -> Result<PolicyParams> {
        let mut g = self.zeros_like();
        self.accumulate_logprob_grad(ctx, tokens, 1.0, &mut g)?;
        Ok(g)
    }

    /// Samples a caption from `softmax(z / temperature)` until EOS; the last
    /// slot is forced to EOS when `max_len` is reached. Temperatures below
    /// [`GREEDY_TEMPERATURE`] decode greedily.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        ctx: &Context,
        temperature: f64,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Vec<Token>> {
        self.check_context(ctx)?;
        if !(temperature > 0.0) {
            return Err(Error::InvalidInput(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if max_len < 2 {
            return Err(Error::InvalidInput("max_len must be at least 2".into()));
        }
        let n = self.n_vocab();
        let eos = self.vocab.eos();
        let bias = self.context_bias(ctx);
        let mut z = vec![0.0; n];
        let mut tokens = vec![self.vocab.bos()];
        loop {
            if tokens.len() == max_len - 1 {
                tokens.push(eos);
                break;
            }
            let prev = *tokens.last().expect("nonempty");
            self.logits_with_bias(&bias, prev, &mut z);
            let next = if temperature < GREEDY_TEMPERATURE {
                argmax(&z)
            } else {
                for v in z.iter_mut() {
                    *v /= temperature;
                }
                log_softmax_in_place(&mut z);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = n - 1;
                for (j, &lp) in z.iter().enumerate() {
                    acc += lp.exp();
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                pick
            };
            tokens.push(next);
            if next == eos {
                break;
            }
        }
        Ok(tokens)
    }

    /// Greedy argmax decoding.
    pub fn greedy(&self, ctx: &Context, max_len: usize) -> Result<Vec<Token>> {
        // The rng is never consulted on the greedy path.
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        self.sample(ctx, GREEDY_TEMPERATURE / 2.0, max_len, &mut rng)
    }

    /// Serializes to the checkpoint format: magic, little-endian header
    /// `{version, n_vocab, n_prompts, n_obj, n_filler, seed}`, then the three
    /// blocks row-major as IEEE-754 little-endian `f64`.
    pub fn to_checkpoint_bytes(&self, seed: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * 5 + 8 + 8 * self.n_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for dim in [self.n_vocab(), self.n_prompts, self.vocab.n_obj, self.vocab.n_filler] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&seed.to_le_bytes());
        for v in self.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Inverse of [`to_checkpoint_bytes`](Self::to_checkpoint_bytes); returns
    /// the parameters and the recorded seed.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> std::result::Result<(Self, u64), String> {
        let mut cursor = bytes;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            if cursor.len() < n {
                return Err("truncated checkpoint".into());
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err("bad checkpoint magic".into());
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let n_vocab = u32_at(take(4)?) as usize;
        let n_prompts = u32_at(take(4)?) as usize;
        let n_obj = u32_at(take(4)?) as usize;
        let n_filler = u32_at(take(4)?) as usize;
        let seed = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let vocab = Vocab::new(n_obj, n_filler);
        if vocab.size() != n_vocab {
            return Err(format!(
                "inconsistent header: n_vocab {n_vocab} != {n_obj} + {n_filler} + 2"
            ));
        }
        let mut params = PolicyParams::zeros(vocab, n_prompts);
        let n_params = params.n_params();
        let body = take(8 * n_params)?;
        for (v, chunk) in params.values_mut().zip(body.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        if !cursor.is_empty() {
            return Err("trailing bytes after checkpoint body".into());
        }
        Ok((params, seed))
    }

    /// Hex SHA-256 of the checkpoint encoding with seed 0; equal hashes mean
    /// bit-identical parameters.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_checkpoint_bytes(0));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the checkpoint atomically (temporary file, then rename).
    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        write_atomic(path, &self.to_checkpoint_bytes(seed))
    }

    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        PolicyParams::from_checkpoint_bytes(&bytes).map_err(|r| Error::format(path, r))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = j;
        }
    }
    best
}
