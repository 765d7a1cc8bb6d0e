//! DDPM mathematics: noise schedule, forward noising, the denoising loss,
//! clean-image recovery from a noise prediction, classifier-free guidance,
//! and an ancestral sampler.
//!
//! Model access is through closures so the math is testable against stubs:
//! a raw prediction is `Fn(&[f64], usize, Option<&[f64]>) -> Vec<f64>`
//! taking (x_t, t, encoded condition or None for the null condition).

use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Lab default: 250 steps compresses the classic 1000-step linear schedule
/// 4× (β scaled up so the total noise budget matches: ᾱ_T stays ~4e-5)
/// to keep single-core sampling loops short.
pub const DEFAULT_TIMESTEPS: usize = 250;
pub const DEFAULT_BETA_MIN: f64 = 4e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.08;

/// Raw (untaped) conditional noise prediction: (x_t, t, cond) → ε̂.
/// `cond` is the encoded prompt vector; `None` selects the model's
/// dedicated null condition.
pub trait RawPredict: Fn(&[f64], usize, Option<&[f64]>) -> Vec<f64> {}
impl<F: Fn(&[f64], usize, Option<&[f64]>) -> Vec<f64>> RawPredict for F {}

/// Serializable recipe for a [`NoiseSchedule`]; stored in checkpoints so a
/// model never runs against a schedule it was not trained for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            timesteps: DEFAULT_TIMESTEPS,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> NoiseSchedule {
        build_schedule(self.timesteps, self.beta_min, self.beta_max)
    }

    /// Whether [`build_schedule`]'s preconditions hold (checked by config
    /// and checkpoint loaders before building, which would panic instead).
    pub fn is_valid(&self) -> bool {
        self.timesteps >= 2
            && self.beta_min > 0.0
            && self.beta_min <= self.beta_max
            && self.beta_max < 1.0
    }
}

/// Variance schedule of the forward process and its cumulative products.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// ᾱ_{t−1}, with the t=0 convention ᾱ_{−1} = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior noise scale of the ancestral sampler step at t:
    /// σ_t² = (1−ᾱ_{t−1})/(1−ᾱ_t)·β_t, with σ_0 = 0.
    pub fn sigma(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        ((1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar[t]) * self.beta[t]).sqrt()
    }
}

/// Linear β interpolation from `beta_min` at t=0 to `beta_max` at t=T−1.
pub fn build_schedule(timesteps: usize, beta_min: f64, beta_max: f64) -> NoiseSchedule {
    assert!(timesteps >= 2, "schedule needs at least 2 steps, got {timesteps}");
    assert!(
        0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0,
        "invalid beta range [{beta_min}, {beta_max}]"
    );
    let mut beta = Vec::with_capacity(timesteps);
    let mut alpha = Vec::with_capacity(timesteps);
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut prod = 1.0;
    for t in 0..timesteps {
        let b = beta_min + (beta_max - beta_min) * t as f64 / (timesteps - 1) as f64;
        let a = 1.0 - b;
        prod *= a;
        beta.push(b);
        alpha.push(a);
        alpha_bar.push(prod);
    }
    debug_assert!(alpha_bar.windows(2).all(|w| w[1] < w[0]));
    debug_assert!(alpha_bar.iter().all(|&ab| 0.0 < ab && ab < 1.0));
    NoiseSchedule { beta, alpha, alpha_bar }
}

/// Forward noising: x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Tensor {
    assert!(t < s.timesteps(), "t={t} out of range");
    assert_eq!(x0.shape(), eps.shape(), "q_sample shape mismatch");
    let ab = s.alpha_bar(t);
    let (c0, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| c0 * x + ce * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Clean-image estimate from a noise prediction:
/// x̂₀ = x_t/√ᾱ_t − (√(1−ᾱ_t)/√ᾱ_t)·ε̂.
pub fn x0_hat(x_t: &Tensor, eps_pred: &Tensor, t: usize, s: &NoiseSchedule) -> Tensor {
    assert!(t < s.timesteps(), "t={t} out of range");
    assert_eq!(x_t.shape(), eps_pred.shape(), "x0_hat shape mismatch");
    let ab = s.alpha_bar(t);
    assert!(ab > 0.0, "degenerate schedule: alpha_bar({t}) = 0");
    let inv = 1.0 / ab.sqrt();
    let coef = (1.0 - ab).sqrt() * inv;
    let data = x_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(x, e)| x * inv - e * coef)
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// [`x0_hat`] recorded on a tape so that gradients flow through `eps_pred`.
/// Uses the identical two-coefficient form as the raw version, so values
/// agree bit for bit.
pub fn x0_hat_on_tape(
    tape: &mut Tape,
    x_t: NodeId,
    eps_pred: NodeId,
    t: usize,
    s: &NoiseSchedule,
) -> NodeId {
    assert!(t < s.timesteps(), "t={t} out of range");
    let ab = s.alpha_bar(t);
    assert!(ab > 0.0, "degenerate schedule: alpha_bar({t}) = 0");
    let inv = 1.0 / ab.sqrt();
    let coef = (1.0 - ab).sqrt() * inv;
    let sx = tape.scale(x_t, inv);
    let se = tape.scale(eps_pred, coef);
    tape.sub(sx, se)
}

/// Denoising objective on one example: ‖predict(x_t, t) − ε‖² averaged over
/// elements, recorded on the tape. `predict` is the model applied to a fixed
/// condition; the caller draws ε explicitly so runs are reproducible.
pub fn denoise_loss(
    tape: &mut Tape,
    predict: impl FnOnce(&mut Tape, &Tensor, usize) -> NodeId,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    s: &NoiseSchedule,
) -> NodeId {
    let x_t = q_sample(x0, t, eps, s);
    let pred = predict(tape, &x_t, t);
    let target = tape.leaf(eps.clone());
    tape.mse(pred, target)
}

/// Classifier-free guidance: (1−α)·G(x_t, ∅) + α·G(x_t, y).
pub fn cfg_predict(
    predict: &impl RawPredict,
    x_t: &[f64],
    t: usize,
    cond: &[f64],
    alpha: f64,
) -> Vec<f64> {
    let uncond = predict(x_t, t, None);
    let cond_pred = predict(x_t, t, Some(cond));
    uncond
        .iter()
        .zip(&cond_pred)
        .map(|(u, c)| (1.0 - alpha) * u + alpha * c)
        .collect()
}

/// Ancestral DDPM sampling from x_T ~ 𝒩(0,1) down to x₀, guiding every step
/// with [`cfg_predict`]. Noise draw order is fixed (x_T first, then one z per
/// step t=T−1..1), so output is bit-identical for a given seed and model.
pub fn sample(
    predict: &impl RawPredict,
    cond: &[f64],
    s: &NoiseSchedule,
    guidance_alpha: f64,
    numel: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
    for t in (0..s.timesteps()).rev() {
        let eps_hat = cfg_predict(predict, &x, t, cond, guidance_alpha);
        let (b, a, ab) = (s.beta(t), s.alpha(t), s.alpha_bar(t));
        let coef = b / (1.0 - ab).sqrt();
        let inv_sqrt_a = 1.0 / a.sqrt();
        for (xi, e) in x.iter_mut().zip(&eps_hat) {
            *xi = (*xi - coef * e) * inv_sqrt_a;
        }
        if t > 0 {
            let sig = s.sigma(t);
            for xi in x.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *xi += sig * z;
            }
        }
    }
    x
}
