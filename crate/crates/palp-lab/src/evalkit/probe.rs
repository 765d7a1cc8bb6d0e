//! Denoising-belief probe: what clean image does a checkpointed model
//! predict when shown scaled pure noise at chosen timesteps?
//!
//! For each probed `t`, the input is `x_t = √(1−ᾱ_t)·ε` — the forward
//! process applied to a black (all-zero) image — using one shared noise draw
//! across the grid so rows differ only in noise level. One conditional
//! forward pass produces ε̂, and the row records the implied clean estimate.
//! Early-timestep rows reveal the prior the conditioning text carries before
//! any signal exists; late rows show reconstruction behavior.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::denoiser::{forward_raw, Checkpoint, Prompt, PromptError, PromptRole};
use crate::diffcore::tensor::Tensor;
use crate::diffusion::x0_hat;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("timestep {t} outside schedule (T = {timesteps})")]
    BadTimestep { t: usize, timesteps: usize },
    #[error("checkpoint schedule is invalid")]
    BadSchedule,
}

#[derive(Clone, Debug)]
pub struct ProbeRow {
    pub t: usize,
    pub x_t: Tensor,
    pub x0_hat: Tensor,
}

#[derive(Debug, Error, PartialEq)]
pub enum GridParseError {
    #[error("empty timestep grid")]
    Empty,
    #[error("bad grid entry `{0}`")]
    BadEntry(String),
    #[error("grid entries must increase: {0} then {1}")]
    NotIncreasing(usize, usize),
}

/// Parse a probe grid like `"10,60,120,240"` or `"10 60 120"`. Entries must
/// be strictly increasing; range checks against a schedule happen later.
pub fn parse_t_grid(text: &str) -> Result<Vec<usize>, GridParseError> {
    let mut out = Vec::new();
    for part in text.split(|c: char| c == ',' || c.is_whitespace()) {
        if part.is_empty() {
            continue;
        }
        let t: usize =
            part.parse().map_err(|_| GridParseError::BadEntry(part.to_owned()))?;
        if let Some(&prev) = out.last() {
            if t <= prev {
                return Err(GridParseError::NotIncreasing(prev, t));
            }
        }
        out.push(t);
    }
    if out.is_empty() {
        return Err(GridParseError::Empty);
    }
    Ok(out)
}

/// Run the probe. Rows come back in `t_grid` order; the same ε is reused for
/// every row so the grid is comparable across noise levels.
pub fn x0hat_probe(
    ckpt: &Checkpoint,
    prompt_text: &str,
    t_grid: &[usize],
    seed: u64,
) -> Result<Vec<ProbeRow>, ProbeError> {
    if !ckpt.schedule.is_valid() {
        return Err(ProbeError::BadSchedule);
    }
    let schedule = ckpt.schedule.build();
    for &t in t_grid {
        if t >= schedule.timesteps() {
            return Err(ProbeError::BadTimestep { t, timesteps: schedule.timesteps() });
        }
    }
    let prompt = Prompt::parse(prompt_text, PromptRole::Target)?;
    let cond = ckpt.table.encode(&prompt)?;
    let pixels = ckpt.params.config.image_pixels();
    let side = ckpt.params.config.image_side;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let eps: Vec<f64> = (0..pixels).map(|_| rng.sample(StandardNormal)).collect();

    let rows = t_grid
        .iter()
        .map(|&t| {
            let scale = (1.0 - schedule.alpha_bar(t)).sqrt();
            let x_t: Vec<f64> = eps.iter().map(|e| scale * e).collect();
            let eps_pred = forward_raw(&ckpt.params, ckpt.lora.as_ref(), &x_t, t, &cond);
            let x_t = Tensor::new(vec![side, side], x_t);
            let pred = Tensor::new(vec![side, side], eps_pred);
            let x0 = x0_hat(&x_t, &pred, t, &schedule);
            ProbeRow { t, x_t, x0_hat: x0 }
        })
        .collect();
    Ok(rows)
}
