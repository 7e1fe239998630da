//! Rejected-image operators for the visual preference term.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbOp {
    /// All-zero features, identical to the null image.
    Black,
    /// Features of a different image from the pool.
    Random,
    /// Zero a contiguous block of coordinates, rescale the rest.
    Crop,
    /// DDPM forward noising at a fixed step.
    Diffusion,
}

impl PerturbOp {
    pub const ALL: [PerturbOp; 4] = [
        PerturbOp::Black,
        PerturbOp::Random,
        PerturbOp::Crop,
        PerturbOp::Diffusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbOp::Black => "black",
            PerturbOp::Random => "random",
            PerturbOp::Crop => "crop",
            PerturbOp::Diffusion => "diffusion",
        }
    }
}

impl std::str::FromStr for PerturbOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation operator {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            total_steps: 1000,
            t: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear-beta DDPM schedule. Steps are 1-indexed.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub total_steps: usize,
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        let n = cfg.total_steps;
        if n < 2 || cfg.t == 0 || cfg.t > n {
            return Err(Error::Config(format!(
                "diffusion step t = {} must lie in [1, {}] with at least 2 steps",
                cfg.t, n
            )));
        }
        if !(0.0 < cfg.beta_start && cfg.beta_start < cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start < beta_end < 1, got {} and {}",
                cfg.beta_start, cfg.beta_end
            )));
        }
        let mut alpha_bar = Vec::with_capacity(n);
        let mut acc = 1.0;
        for i in 0..n {
            let beta = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(DiffusionSchedule {
            total_steps: n,
            t: cfg.t,
            beta_start: cfg.beta_start,
            beta_end: cfg.beta_end,
            alpha_bar,
        })
    }

    pub fn beta(&self, step: usize) -> f64 {
        self.beta_start
            + (self.beta_end - self.beta_start) * (step - 1) as f64 / (self.total_steps - 1) as f64
    }

    /// Cumulative product of `1 - beta` up to and including `step`.
    pub fn alpha_bar(&self, step: usize) -> f64 {
        self.alpha_bar[step - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps` at the configured step.
    pub fn noise_with(&self, x0: &[f64], eps: &[f64]) -> Vec<f64> {
        let ab = self.alpha_bar(self.t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub operator: PerturbOp,
    pub crop_fraction: f64,
    pub schedule: ScheduleConfig,
    /// Draw a fresh rejected image every epoch instead of once per pair.
    pub resample_per_epoch: bool,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            operator: PerturbOp::Diffusion,
            crop_fraction: 0.5,
            schedule: ScheduleConfig::default(),
            resample_per_epoch: false,
        }
    }
}

/// Zeroes a uniformly chosen contiguous window covering `fraction` of the
/// coordinates and rescales the survivors to the original L1 mass. Only
/// windows that leave some mass are eligible; a zero input is returned as is.
pub fn crop<R: Rng + ?Sized>(phi: &[f64], fraction: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidInput(format!("crop fraction must lie in [0, 1), got {fraction}")));
    }
    let n = phi.len();
    // Rounding may reach n; one coordinate always survives.
    let width = (((n as f64) * fraction).round() as usize).min(n.saturating_sub(1));
    let mass: f64 = phi.iter().map(|x| x.abs()).sum();
    if width == 0 || mass == 0.0 {
        return Ok(phi.to_vec());
    }
    let outside_mass = |start: usize| -> f64 {
        phi.iter()
            .enumerate()
            .filter(|&(i, _)| i < start || i >= start + width)
            .map(|(_, x)| x.abs())
            .sum()
    };
    let starts: Vec<usize> = (0..=n - width).filter(|&s| outside_mass(s) > 0.0).collect();
    // Some window always leaves mass: a window of width < n can avoid any
    // single nonzero coordinate.
    let start = starts[rng.gen_range(0..starts.len())];
    let scale = mass / outside_mass(start);
    Ok(phi
        .iter()
        .enumerate()
        .map(|(i, &x)| if i >= start && i < start + width { 0.0 } else { x * scale })
        .collect())
}

/// Builds the rejected image for `source`.
pub fn perturb<R: Rng + ?Sized>(
    op: PerturbOp,
    source: &Image,
    pool: &[Image],
    cfg: &PerturbConfig,
    sched: Option<&DiffusionSchedule>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let phi = &source.phi;
    match op {
        PerturbOp::Black => Ok(vec![0.0; phi.len()]),
        PerturbOp::Random => {
            let others: Vec<&Image> = pool.iter().filter(|img| img.id != source.id).collect();
            if others.is_empty() {
                return Err(Error::InvalidInput(
                    "random perturbation needs a pool image other than the source".into(),
                ));
            }
            Ok(others[rng.gen_range(0..others.len())].phi.clone())
        }
        PerturbOp::Crop => crop(phi, cfg.crop_fraction, rng),
        PerturbOp::Diffusion => {
            let sched = sched.ok_or_else(|| {
                Error::InvalidInput("diffusion perturbation needs a schedule".into())
            })?;
            let eps: Vec<f64> = (0..phi.len()).map(|_| StandardNormal.sample(rng)).collect();
            Ok(sched.noise_with(phi, &eps))
        }
    }
}
