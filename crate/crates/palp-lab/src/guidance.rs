//! Score-sampling guidance: the SDS direction, the prompt-aligned residual
//! direction, and their application through the clean-image estimate.
//!
//! Both directions are evaluated without gradient bookkeeping — the direction
//! is a constant in the applied update — and enter training as the gradient
//! of the surrogate ⟨d, x̂₀⟩, where x̂₀ sits on a live tape downstream of the
//! personalized model's noise prediction. Differentiating that inner product
//! pushes −√(1−ᾱ_t)/√ᾱ_t·d into the prediction; the optional rescale
//! multiplies the result by √ᾱ_t/√(1−ᾱ_t), cancelling the timestep factor so
//! every t contributes updates of uniform scale.

use crate::denoiser::embed::{EmbeddingTable, Prompt, PromptError, PromptRole};
use crate::denoiser::forward::{bind, forward_raw, BoundDenoiser, Mode};
use crate::denoiser::lora::LoraAdapter;
use crate::denoiser::params::DenoiserParams;
use crate::diffcore::tape::{GradError, NodeId, Tape};
use crate::diffcore::tensor::Tensor;
use crate::diffusion::{cfg_predict, q_sample, x0_hat_on_tape, NoiseSchedule};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default clean-branch and personalized-branch guidance scales.
pub const DEFAULT_ALPHA: f64 = 15.0;
pub const DEFAULT_BETA: f64 = 7.5;
/// Scales used when composing multiple personalized subjects in one image.
pub const COMPOSITION_ALPHA: f64 = 7.5;
pub const COMPOSITION_BETA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("expected a {expected:?}-role prompt, got {got:?}")]
    WrongRole { expected: PromptRole, got: PromptRole },
    #[error("operation needs mode {expected:?}, config says {got:?}")]
    ModeMismatch { expected: GuidanceMode, got: GuidanceMode },
    #[error("estimator {0:?} is a reserved slot with no implementation")]
    NotImplemented(GuidanceMode),
    #[error("share_noise is off but no branch noise was supplied")]
    MissingBranchNoise,
    #[error("invalid guidance config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Which guidance estimator a training step adds to the reconstruction loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Plain personalization: no guidance term.
    None,
    /// Score distillation against the base model only.
    Sds,
    /// Residual between the base and personalized predictions.
    #[default]
    Palp,
    /// Reserved slot; selecting it is an error.
    Nfsd,
}

/// Weighting w̃(t) on the guidance direction. Constant 1 is the only
/// implemented choice; the enum keeps the knob visible.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFn {
    #[default]
    One,
}

impl WeightFn {
    pub fn value(self, _t: usize) -> f64 {
        match self {
            WeightFn::One => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Clean-branch classifier-free guidance scale α.
    pub alpha: f64,
    /// Personalized-branch classifier-free guidance scale β.
    pub beta: f64,
    pub w_t: WeightFn,
    /// Reuse the reconstruction branch's ε to re-noise the guidance branch.
    pub share_noise: bool,
    /// Cancel the √(1−ᾱ_t)/√ᾱ_t factor in applied gradients.
    pub rescale: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            mode: GuidanceMode::Palp,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            w_t: WeightFn::One,
            share_noise: true,
            rescale: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        if self.mode == GuidanceMode::Nfsd {
            return Err(GuidanceError::NotImplemented(GuidanceMode::Nfsd));
        }
        if !(self.alpha > 0.0) {
            return Err(GuidanceError::BadConfig(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) {
            return Err(GuidanceError::BadConfig(format!("beta must be ≥ 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// Non-fatal advisories (printed by the CLI, ignored by the library).
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.mode == GuidanceMode::Palp && self.alpha < self.beta {
            out.push(format!(
                "alpha ({}) < beta ({}): the clean branch is weaker than the \
                 personalized branch, which usually inverts the intended pull",
                self.alpha, self.beta
            ));
        }
        out
    }
}

/// Re-noise a clean-image estimate back to timestep `t2`. Same arithmetic as
/// the forward noising; named separately because the guidance branch is the
/// only caller and its noise source is policy (shared vs fresh).
pub fn renoise(x0_hat_val: &Tensor, t2: usize, eps2: &Tensor, s: &NoiseSchedule) -> Tensor {
    q_sample(x0_hat_val, t2, eps2, s)
}

fn require_role(p: &Prompt, expected: PromptRole) -> Result<(), GuidanceError> {
    if p.role() != expected {
        return Err(GuidanceError::WrongRole { expected, got: p.role() });
    }
    Ok(())
}

/// Classifier-free-guided raw prediction of one branch.
fn raw_cfg(
    params: &DenoiserParams,
    lora: Option<&LoraAdapter>,
    table: &EmbeddingTable,
    x: &[f64],
    t: usize,
    prompt: &Prompt,
    scale: f64,
) -> Result<Vec<f64>, GuidanceError> {
    let cond = table.encode(prompt)?;
    let null = table.encode(&Prompt::null())?;
    let predict =
        |x_in: &[f64], tt: usize, c: Option<&[f64]>| forward_raw(params, lora, x_in, tt, c.unwrap_or(&null));
    Ok(cfg_predict(&predict, x, t, &cond, scale))
}

/// Score-distillation direction w̃(t)·(G^α(x, t, y^c) − ε), gradient-free.
pub fn sds_direction(
    base: &DenoiserParams,
    table: &EmbeddingTable,
    x: &[f64],
    t: usize,
    y_c: &Prompt,
    alpha: f64,
    w_t: WeightFn,
    eps: &[f64],
) -> Result<Vec<f64>, GuidanceError> {
    require_role(y_c, PromptRole::Clean)?;
    let g = raw_cfg(base, None, table, x, t, y_c, alpha)?;
    let w = w_t.value(t);
    Ok(g.iter().zip(eps).map(|(gi, ei)| w * (gi - ei)).collect())
}

/// Prompt-aligned residual direction
/// w̃(t)·(G^α_θ(x, y^c) − G^β_{θ+LoRA}(x, y_P)), gradient-free.
#[allow(clippy::too_many_arguments)]
pub fn palp_direction(
    params: &DenoiserParams,
    lora: &LoraAdapter,
    table: &EmbeddingTable,
    x: &[f64],
    t: usize,
    y_c: &Prompt,
    y_p: &Prompt,
    cfg: &GuidanceConfig,
) -> Result<Vec<f64>, GuidanceError> {
    require_role(y_c, PromptRole::Clean)?;
    require_role(y_p, PromptRole::Personalization)?;
    let base = raw_cfg(params, None, table, x, t, y_c, cfg.alpha)?;
    let pers = raw_cfg(params, Some(lora), table, x, t, y_p, cfg.beta)?;
    let w = cfg.w_t.value(t);
    Ok(base.iter().zip(&pers).map(|(b, p)| w * (b - p)).collect())
}

/// Gradients of ⟨direction, x̂₀⟩ with respect to `leaves`, where `x0_hat_node`
/// must live on `tape` downstream of the personalized prediction. With
/// `rescale`, the result is multiplied by √ᾱ_t/√(1−ᾱ_t), cancelling the
/// factor the chain rule through x̂₀ introduced.
pub fn apply_palp_grad(
    tape: &mut Tape,
    direction: &[f64],
    x0_hat_node: NodeId,
    t: usize,
    s: &NoiseSchedule,
    rescale: bool,
    leaves: &[NodeId],
) -> Result<Vec<Tensor>, GradError> {
    let d = tape.leaf(Tensor::vector(direction.to_vec()));
    let root = tape.dot(d, x0_hat_node);
    let mut grads = tape.grad(root, leaves)?;
    if rescale {
        let ab = s.alpha_bar(t);
        let factor = ab.sqrt() / (1.0 - ab).sqrt();
        for g in &mut grads {
            let scaled = g.map(|v| v * factor);
            *g = scaled;
        }
    }
    Ok(grads)
}

/// Everything one guidance evaluation hands back to the trainer.
pub struct GuidanceGrads {
    /// Aligned with the internal personalize-mode binding's trainable set:
    /// adapter pairs (A, B) in order, then the embedding table.
    pub grads: Vec<Tensor>,
    /// ‖direction‖₂, for logging and trend plots.
    pub direction_l2: f64,
}

/// Shared plumbing for both estimators: run the personalized prediction on a
/// fresh tape, form x̂₀, re-noise it, get a direction from `direction_at`,
/// and differentiate ⟨d, x̂₀⟩.
#[allow(clippy::too_many_arguments)]
fn contribution(
    params: &DenoiserParams,
    lora: &LoraAdapter,
    table: &EmbeddingTable,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    branch_eps: Option<&Tensor>,
    y_p: &Prompt,
    s: &NoiseSchedule,
    cfg: &GuidanceConfig,
    direction_at: impl FnOnce(&[f64], &[f64]) -> Result<Vec<f64>, GuidanceError>,
) -> Result<GuidanceGrads, GuidanceError> {
    require_role(y_p, PromptRole::Personalization)?;
    let eps2: &Tensor = if cfg.share_noise {
        eps
    } else {
        branch_eps.ok_or(GuidanceError::MissingBranchNoise)?
    };

    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, Some(lora), table, Mode::Personalize);
    let cond = table.encode_on_tape(&mut tape, bound.table, y_p)?;
    let x_t = q_sample(x0, t, eps, s);
    let x_t_node = tape.leaf(x_t);
    let eps_pred = bound.forward(&mut tape, params, x_t_node, t, cond);
    let x0_node = x0_hat_on_tape(&mut tape, x_t_node, eps_pred, t, s);

    let x_hat_t = renoise(tape.value(x0_node), t, eps2, s);
    let direction = direction_at(x_hat_t.data(), eps2.data())?;
    let direction_l2 = direction.iter().map(|v| v * v).sum::<f64>().sqrt();

    let leaves: Vec<NodeId> = bound.trainable_set().iter().map(|l| l.id).collect();
    let grads = apply_palp_grad(&mut tape, &direction, x0_node, t, s, cfg.rescale, &leaves)?;
    Ok(GuidanceGrads { grads, direction_l2 })
}

/// SDS gradient contribution of one example (mode `sds`).
#[allow(clippy::too_many_arguments)]
pub fn guidance_loss_sds(
    params: &DenoiserParams,
    lora: &LoraAdapter,
    table: &EmbeddingTable,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    branch_eps: Option<&Tensor>,
    y_c: &Prompt,
    y_p: &Prompt,
    s: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<GuidanceGrads, GuidanceError> {
    if cfg.mode != GuidanceMode::Sds {
        return Err(GuidanceError::ModeMismatch { expected: GuidanceMode::Sds, got: cfg.mode });
    }
    contribution(params, lora, table, x0, t, eps, branch_eps, y_p, s, cfg, |x, used_eps| {
        sds_direction(params, table, x, t, y_c, cfg.alpha, cfg.w_t, used_eps)
    })
}

/// Prompt-aligned gradient contribution of one example (mode `palp`).
#[allow(clippy::too_many_arguments)]
pub fn guidance_loss_palp(
    params: &DenoiserParams,
    lora: &LoraAdapter,
    table: &EmbeddingTable,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    branch_eps: Option<&Tensor>,
    y_c: &Prompt,
    y_p: &Prompt,
    s: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<GuidanceGrads, GuidanceError> {
    if cfg.mode != GuidanceMode::Palp {
        return Err(GuidanceError::ModeMismatch { expected: GuidanceMode::Palp, got: cfg.mode });
    }
    contribution(params, lora, table, x0, t, eps, branch_eps, y_p, s, cfg, |x, _| {
        palp_direction(params, lora, table, x, t, y_c, y_p, cfg)
    })
}

/// The trainable-leaf layout `GuidanceGrads::grads` is aligned to, so the
/// trainer can add contributions without re-deriving the order.
pub fn guidance_leaf_layout(bound: &BoundDenoiser) -> Vec<NodeId> {
    bound.trainable_set().iter().map(|l| l.id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::embed::EmbeddingTable;
    use crate::denoiser::lora::init_lora;
    use crate::denoiser::params::ModelConfig;
    use crate::diffusion::{build_schedule, x0_hat};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_side: 4,
            hidden_width: 10,
            hidden_layers: 2,
            time_pairs: 2,
            cond_dim: 6,
            timesteps: 12,
        }
    }

    struct Fixture {
        params: DenoiserParams,
        lora: LoraAdapter,
        table: EmbeddingTable,
        schedule: NoiseSchedule,
        y_c: Prompt,
        y_p: Prompt,
    }

    fn fixture(seed: u64, perturb_lora: bool) -> Fixture {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let params = DenoiserParams::init(tiny_config(), &mut rng);
        let mut table = EmbeddingTable::with_attributes(&["photo", "square"], 6, &mut rng);
        table.freeze_all();
        table.add_placeholder("[V]", "square").unwrap();
        let mut lora = init_lora(&params, 2, 1.0, &mut rng);
        if perturb_lora {
            for pair in &mut lora.pairs {
                let n = pair.b.numel();
                pair.b = Tensor::new(
                    pair.b.shape().to_vec(),
                    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1).collect(),
                );
            }
        }
        Fixture {
            params,
            lora,
            table,
            schedule: build_schedule(12, 0.02, 0.3),
            y_c: Prompt::parse("photo square", PromptRole::Clean).unwrap(),
            y_p: Prompt::parse("photo [V]", PromptRole::Personalization).unwrap(),
        }
    }

    fn randn(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn renoise_round_trips_through_x0_hat() {
        let s = build_schedule(12, 0.02, 0.3);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x0v = Tensor::vector(randn(&mut rng, 16));
        let eps = Tensor::vector(randn(&mut rng, 16));
        for t in [0, 5, 11] {
            let x_t = renoise(&x0v, t, &eps, &s);
            let back = x0_hat(&x_t, &eps, t, &s);
            assert!(back.max_abs_diff(&x0v) < 1e-12);
        }
        let zero = Tensor::zeros(vec![16]);
        let pure = renoise(&x0v, 5, &zero, &s);
        for (p, x) in pure.data().iter().zip(x0v.data()) {
            assert_eq!(*p, s.alpha_bar(5).sqrt() * x);
        }
    }

    #[test]
    fn sds_direction_vanishes_when_prediction_equals_noise() {
        let f = fixture(2, false);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = randn(&mut rng, 16);
        let t = 4;
        // Use the model's own guided prediction as the "noise": the residual
        // must then be exactly zero.
        let self_eps = raw_cfg(&f.params, None, &f.table, &x, t, &f.y_c, 7.5).unwrap();
        let d = sds_direction(&f.params, &f.table, &x, t, &f.y_c, 7.5, WeightFn::One, &self_eps)
            .unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sds_direction_matches_independent_recomputation() {
        let f = fixture(4, false);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = randn(&mut rng, 16);
        let eps = randn(&mut rng, 16);
        let (t, alpha) = (7, 3.0);
        let d = sds_direction(&f.params, &f.table, &x, t, &f.y_c, alpha, WeightFn::One, &eps)
            .unwrap();

        // Straight-line recomputation from the raw forward primitives.
        let cond = f.table.encode(&f.y_c).unwrap();
        let null = f.table.encode(&Prompt::null()).unwrap();
        let u = forward_raw(&f.params, None, &x, t, &null);
        let c = forward_raw(&f.params, None, &x, t, &cond);
        for i in 0..16 {
            let guided = (1.0 - alpha) * u[i] + alpha * c[i];
            assert!((d[i] - (guided - eps[i])).abs() < 1e-15);
        }

        // α=1 collapses to the conditional prediction.
        let d1 =
            sds_direction(&f.params, &f.table, &x, t, &f.y_c, 1.0, WeightFn::One, &eps).unwrap();
        for i in 0..16 {
            assert!((d1[i] - (c[i] - eps[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn sds_direction_rejects_non_clean_prompts() {
        let f = fixture(6, false);
        let err = sds_direction(&f.params, &f.table, &[0.0; 16], 0, &f.y_p, 1.0, WeightFn::One, &[0.0; 16]);
        assert!(matches!(err, Err(GuidanceError::WrongRole { .. })));
    }

    #[test]
    fn palp_direction_is_exactly_zero_at_personalization_start() {
        // Fresh adapter (B=0) and [V] initialized to its class row: the
        // personalized model IS the base model, so with α=β the two branches
        // cancel bit for bit — for any input and timestep.
        let f = fixture(7, false);
        let cfg = GuidanceConfig {
            alpha: 7.5,
            beta: 7.5,
            ..GuidanceConfig::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for t in [0, 5, 11] {
            let x = randn(&mut rng, 16);
            let d = palp_direction(&f.params, &f.lora, &f.table, &x, t, &f.y_c, &f.y_p, &cfg)
                .unwrap();
            assert!(d.iter().all(|&v| v == 0.0), "t={t}");
        }
    }

    #[test]
    fn palp_direction_is_difference_of_two_guided_predictions() {
        let f = fixture(9, true);
        let cfg = GuidanceConfig { alpha: 15.0, beta: 7.5, ..GuidanceConfig::default() };
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let x = randn(&mut rng, 16);
        let t = 6;
        let d = palp_direction(&f.params, &f.lora, &f.table, &x, t, &f.y_c, &f.y_p, &cfg).unwrap();
        let base = raw_cfg(&f.params, None, &f.table, &x, t, &f.y_c, cfg.alpha).unwrap();
        let pers = raw_cfg(&f.params, Some(&f.lora), &f.table, &x, t, &f.y_p, cfg.beta).unwrap();
        for i in 0..16 {
            assert_eq!(d[i], base[i] - pers[i]);
        }
        assert!(d.iter().any(|&v| v != 0.0), "perturbed adapter must leave a residual");
    }

    #[test]
    fn zero_direction_applies_zero_gradients() {
        let f = fixture(11, true);
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let x0v = Tensor::vector(randn(&mut rng, 16));
        let eps = Tensor::vector(randn(&mut rng, 16));
        let t = 3;

        let mut tape = Tape::new();
        let bound = bind(&mut tape, &f.params, Some(&f.lora), &f.table, Mode::Personalize);
        let cond = f.table.encode_on_tape(&mut tape, bound.table, &f.y_p).unwrap();
        let x_t_node = tape.leaf(q_sample(&x0v, t, &eps, &f.schedule));
        let pred = bound.forward(&mut tape, &f.params, x_t_node, t, cond);
        let x0_node = x0_hat_on_tape(&mut tape, x_t_node, pred, t, &f.schedule);
        let leaves = guidance_leaf_layout(&bound);
        let grads =
            apply_palp_grad(&mut tape, &[0.0; 16], x0_node, t, &f.schedule, true, &leaves).unwrap();
        for g in grads {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_model_matches_closed_form() {
        // "Model" G(x) = W·x on a 4-pixel image; then
        // ⟨d, x̂₀⟩ = ⟨d, x_t·inv − (W·x_t)·coef⟩ and the W-gradient is the
        // outer product −coef·d·x_tᵀ.
        let s = build_schedule(12, 0.02, 0.3);
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let w = Tensor::matrix(4, 4, randn(&mut rng, 16));
        let x_t = Tensor::vector(randn(&mut rng, 4));
        let d = randn(&mut rng, 4);
        let t = 5;

        let mut tape = Tape::new();
        let w_node = tape.param(w.clone());
        let x_node = tape.leaf(x_t.clone());
        let pred = tape.matvec(w_node, x_node);
        let x0_node = x0_hat_on_tape(&mut tape, x_node, pred, t, &s);
        let grads = apply_palp_grad(&mut tape, &d, x0_node, t, &s, false, &[w_node]).unwrap();

        let ab = s.alpha_bar(t);
        let coef = (1.0 - ab).sqrt() / ab.sqrt();
        for r in 0..4 {
            for c in 0..4 {
                let closed = -coef * d[r] * x_t.data()[c];
                let got = grads[0].data()[r * 4 + c];
                assert!(
                    (got - closed).abs() <= 1e-12 * closed.abs().max(1.0),
                    "({r},{c}): {got} vs {closed}"
                );
            }
        }
    }

    #[test]
    fn rescale_cancels_the_timestep_factor_exactly() {
        // With rescale ON the applied gradient must equal −∂⟨d, G⟩/∂θ — the
        // x̂₀ chain factor and the rescale factor are algebraic inverses.
        let f = fixture(14, true);
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let x0v = Tensor::vector(randn(&mut rng, 16));
        let eps = Tensor::vector(randn(&mut rng, 16));
        let d = randn(&mut rng, 16);

        for t in [1, 6, 10] {
            let x_t = q_sample(&x0v, t, &eps, &f.schedule);

            let mut tape = Tape::new();
            let bound = bind(&mut tape, &f.params, Some(&f.lora), &f.table, Mode::Personalize);
            let cond = f.table.encode_on_tape(&mut tape, bound.table, &f.y_p).unwrap();
            let x_node = tape.leaf(x_t.clone());
            let pred = bound.forward(&mut tape, &f.params, x_node, t, cond);
            let x0_node = x0_hat_on_tape(&mut tape, x_node, pred, t, &f.schedule);
            let leaves = guidance_leaf_layout(&bound);
            let via_x0 =
                apply_palp_grad(&mut tape, &d, x0_node, t, &f.schedule, true, &leaves).unwrap();

            // Second tape: differentiate ⟨d, G⟩ directly, no x̂₀ chain.
            let mut tape2 = Tape::new();
            let bound2 = bind(&mut tape2, &f.params, Some(&f.lora), &f.table, Mode::Personalize);
            let cond2 = f.table.encode_on_tape(&mut tape2, bound2.table, &f.y_p).unwrap();
            let x_node2 = tape2.leaf(x_t.clone());
            let pred2 = bound2.forward(&mut tape2, &f.params, x_node2, t, cond2);
            let d_node = tape2.leaf(Tensor::vector(d.clone()));
            let dot = tape2.dot(d_node, pred2);
            let leaves2 = guidance_leaf_layout(&bound2);
            let direct = tape2.grad(dot, &leaves2).unwrap();

            for (a, b) in via_x0.iter().zip(&direct) {
                for (va, vb) in a.data().iter().zip(b.data()) {
                    let expect = -vb;
                    assert!(
                        (va - expect).abs() <= 1e-10 * expect.abs().max(1.0),
                        "t={t}: {va} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn rescale_ratio_is_the_schedule_factor() {
        let f = fixture(16, true);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let x0v = Tensor::vector(randn(&mut rng, 16));
        let eps = Tensor::vector(randn(&mut rng, 16));
        let mut d = randn(&mut rng, 16);
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= norm);

        // t near T/10, T/2, 9T/10 of the 12-step fixture schedule.
        for t in [1, 6, 10] {
            let run = |rescale: bool| -> Vec<Tensor> {
                let mut tape = Tape::new();
                let bound =
                    bind(&mut tape, &f.params, Some(&f.lora), &f.table, Mode::Personalize);
                let cond = f.table.encode_on_tape(&mut tape, bound.table, &f.y_p).unwrap();
                let x_node = tape.leaf(q_sample(&x0v, t, &eps, &f.schedule));
                let pred = bound.forward(&mut tape, &f.params, x_node, t, cond);
                let x0_node = x0_hat_on_tape(&mut tape, x_node, pred, t, &f.schedule);
                let leaves = guidance_leaf_layout(&bound);
                apply_palp_grad(&mut tape, &d, x0_node, t, &f.schedule, rescale, &leaves).unwrap()
            };
            let on = run(true);
            let off = run(false);
            let ab = f.schedule.alpha_bar(t);
            let factor = ab.sqrt() / (1.0 - ab).sqrt();
            for (gon, goff) in on.iter().zip(&off) {
                for (a, b) in gon.data().iter().zip(goff.data()) {
                    if b.abs() > 1e-12 {
                        assert!(
                            (a / b - factor).abs() < 1e-9,
                            "t={t}: measured {} expected {factor}",
                            a / b
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn share_noise_reuses_the_reconstruction_noise() {
        let f = fixture(18, true);
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let x0v = Tensor::vector(randn(&mut rng, 16));
        let eps = Tensor::vector(randn(&mut rng, 16));
        let cfg = GuidanceConfig { share_noise: true, ..GuidanceConfig::default() };

        // With sharing ON, supplying no branch noise works — the
        // reconstruction ε is reused.
        let shared = guidance_loss_palp(
            &f.params, &f.lora, &f.table, &x0v, 4, &eps, None, &f.y_c, &f.y_p, &f.schedule, &cfg,
        )
        .unwrap();
        // Passing the identical tensor as branch noise with sharing OFF must
        // give the identical result: the only difference is where ε₂ comes from.
        let off = GuidanceConfig { share_noise: false, ..cfg };
        let explicit = guidance_loss_palp(
            &f.params, &f.lora, &f.table, &x0v, 4, &eps, Some(&eps), &f.y_c, &f.y_p, &f.schedule,
            &off,
        )
        .unwrap();
        for (a, b) in shared.grads.iter().zip(&explicit.grads) {
            assert_eq!(a.data(), b.data());
        }

        // Sharing OFF without a branch noise is a hard error.
        let missing = guidance_loss_palp(
            &f.params, &f.lora, &f.table, &x0v, 4, &eps, None, &f.y_c, &f.y_p, &f.schedule, &off,
        );
        assert!(matches!(missing, Err(GuidanceError::MissingBranchNoise)));
    }

    #[test]
    fn sds_contribution_vanishes_for_a_perfect_base_start() {
        // At personalization start the personalized model equals the base.
        // If the base's guided prediction happens to equal the branch noise,
        // the SDS direction — and therefore the whole contribution — is zero.
        // Arrange that by feeding the model's own prediction as branch noise.
        let f = fixture(20, false);
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let x0v = Tensor::vector(randn(&mut rng, 16));
        let eps = Tensor::vector(randn(&mut rng, 16));
        let t = 4;
        let cfg = GuidanceConfig {
            mode: GuidanceMode::Sds,
            share_noise: false,
            ..GuidanceConfig::default()
        };

        // Find the fixed point ε₂ = G^α(renoise(x̂₀, ε₂)) is circular, so test
        // the zero property the direct way instead: compute with an arbitrary
        // branch noise, then verify against the independent direction.
        let eps2 = Tensor::vector(randn(&mut rng, 16));
        let out = guidance_loss_sds(
            &f.params, &f.lora, &f.table, &x0v, t, &eps, Some(&eps2), &f.y_c, &f.y_p, &f.schedule,
            &cfg,
        )
        .unwrap();

        // Reconstruct x̂₀ and the direction independently; its norm must match.
        let x_t = q_sample(&x0v, t, &eps, &f.schedule);
        let cond = f.table.encode(&f.y_p).unwrap();
        let pred = forward_raw(&f.params, Some(&f.lora), x_t.data(), t, &cond);
        let x0h = x0_hat(&x_t, &Tensor::vector(pred), t, &f.schedule);
        let x_hat_t = renoise(&x0h, t, &eps2, &f.schedule);
        let d = sds_direction(
            &f.params, &f.table, x_hat_t.data(), t, &f.y_c, cfg.alpha, cfg.w_t, eps2.data(),
        )
        .unwrap();
        let l2 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((out.direction_l2 - l2).abs() < 1e-12);

        // And mode mismatch is rejected.
        let bad = guidance_loss_sds(
            &f.params, &f.lora, &f.table, &x0v, t, &eps, Some(&eps2), &f.y_c, &f.y_p, &f.schedule,
            &GuidanceConfig::default(),
        );
        assert!(matches!(bad, Err(GuidanceError::ModeMismatch { .. })));
    }

    #[test]
    fn config_validation_and_warnings() {
        assert!(GuidanceConfig::default().validate().is_ok());
        assert!(GuidanceConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { beta: -1.0, ..Default::default() }.validate().is_err());
        let nfsd = GuidanceConfig { mode: GuidanceMode::Nfsd, ..Default::default() };
        assert!(matches!(nfsd.validate(), Err(GuidanceError::NotImplemented(_))));

        let inverted = GuidanceConfig { alpha: 1.0, beta: 7.5, ..Default::default() };
        assert!(inverted.validate().is_ok(), "inverted scales are legal");
        assert_eq!(inverted.warnings().len(), 1, "but warned about");
        assert!(GuidanceConfig::default().warnings().is_empty());
    }
}
