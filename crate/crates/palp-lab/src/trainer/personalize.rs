//! Subject personalization: adapter + placeholder-row fine-tuning on the
//! reference photos, optionally steered toward a target prompt by the
//! guidance gradients, both applied in the same optimizer step.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::denoiser::checkpoint::Checkpoint;
use crate::denoiser::embed::{EmbeddingTable, Prompt, PromptRole};
use crate::denoiser::forward::{bind, forward_raw, Mode};
use crate::denoiser::lora::{init_lora, LoraAdapter, DEFAULT_RANK, DEFAULT_SCALE};
use crate::denoiser::params::DenoiserParams;
use crate::diffcore::tape::Tape;
use crate::diffcore::tensor::Tensor;
use crate::diffusion::{denoise_loss, x0_hat, NoiseSchedule, ScheduleSpec};
use crate::evalkit::report::MetricsRow;
use crate::guidance::{guidance_loss_palp, guidance_loss_sds, GuidanceMode};
use crate::trainer::eval::{sample_images, score_samples, EvalSpec};
use crate::trainer::optim::Adam;
use crate::trainer::{mode_label, reshape_like, SubjectSet, TrainConfig, TrainError};

/// Pure-noise reconstruction probes per logged step.
const PROBE_DRAWS: usize = 4;

/// Mutable state threaded through personalization steps. The base layers
/// are never optimizer targets; only adapter factors and unfrozen table
/// rows move.
pub struct TrainState {
    pub params: DenoiserParams,
    pub table: EmbeddingTable,
    pub lora: LoraAdapter,
    pub schedule_spec: ScheduleSpec,
    pub schedule: NoiseSchedule,
    pub opt: Adam,
    pub step: usize,
    /// The single training stream. Draw order per step is documented on
    /// [`train_step`]; evaluation uses separate generators.
    rng: ChaCha12Rng,
}

impl TrainState {
    /// Clone the base checkpoint and attach a fresh adapter plus one
    /// trainable placeholder row per subject. The stream seeded by
    /// `config.seed` first initializes the adapter, then drives training.
    pub fn new(
        base: &Checkpoint,
        subjects: &[&SubjectSet],
        config: &TrainConfig,
    ) -> Result<TrainState, TrainError> {
        config.validate()?;
        let params = base.params.clone();
        if base.schedule.build().timesteps() != params.config.timesteps {
            return Err(TrainError::BadConfig(format!(
                "schedule has {} timesteps but the model expects {}",
                base.schedule.build().timesteps(),
                params.config.timesteps
            )));
        }
        let mut table = base.table.clone();
        table.freeze_all();
        for s in subjects {
            s.validate()?;
            if s.images[0].numel() != params.config.image_pixels() {
                return Err(TrainError::BadSubject(format!(
                    "reference images have {} pixels, model expects {}",
                    s.images[0].numel(),
                    params.config.image_pixels()
                )));
            }
            table.add_placeholder(&s.placeholder, &s.class_token)?;
        }
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let lora = init_lora(&params, DEFAULT_RANK, DEFAULT_SCALE, &mut rng);
        let opt = {
            let mut leaves: Vec<&Tensor> = Vec::new();
            for pair in &lora.pairs {
                leaves.push(&pair.a);
                leaves.push(&pair.b);
            }
            leaves.push(table.rows());
            Adam::new(config.lr, &leaves)
        };
        let schedule = base.schedule.build();
        Ok(TrainState {
            params,
            table,
            lora,
            schedule_spec: base.schedule,
            schedule,
            opt,
            step: 0,
            rng,
        })
    }

    /// Uniform choice among `n` subjects, drawn from the training stream
    /// *before* the step's batch draws (the documented multi-subject order).
    pub(crate) fn pick_subject(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Package the adapted weights; base layers are byte-identical to the
    /// checkpoint this state was created from.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            table: self.table.clone(),
            lora: Some(self.lora.clone()),
            schedule: self.schedule_spec,
        }
    }
}

/// A target prompt split into the two forms guidance needs.
#[derive(Clone, Debug)]
pub struct PalpTarget {
    /// The prompt as given, placeholders intact (y_P for the guided branch).
    pub prompt: Prompt,
    /// The clean form: every placeholder replaced by its class token.
    pub clean: Prompt,
}

/// Split a target prompt against the table's placeholder registry.
pub fn decompose_target(target_text: &str, table: &EmbeddingTable) -> Result<PalpTarget, TrainError> {
    let prompt = Prompt::parse(target_text, PromptRole::Personalization)?;
    let classes = table.placeholder_classes().to_vec();
    let class_of =
        |tok: &str| classes.iter().find(|(p, _)| p == tok).map(|(_, c)| c.clone());
    let clean = prompt.to_clean(class_of)?;
    Ok(PalpTarget { prompt, clean })
}

/// What one optimizer step reports back.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    /// Batch-mean reconstruction loss.
    pub loss: f64,
    /// Batch-mean ‖direction‖₂ of the guidance term; 0 when inactive.
    pub direction_l2: f64,
}

/// One optimizer step on a batch drawn from `pool`.
///
/// Draw order on the state's stream, per step: first, for every batch slot,
/// (image index, timestep, ε); then — only when guidance is active and
/// `share_noise` is off — one branch ε per slot. The reconstruction draws
/// therefore do not depend on the guidance settings, which is what makes
/// λ=0 bit-identical to the baseline.
pub fn train_step(
    state: &mut TrainState,
    pool: &[Tensor],
    recon_prompt: &Prompt,
    target: Option<&PalpTarget>,
    config: &TrainConfig,
) -> Result<StepStats, TrainError> {
    let numel = state.params.config.image_pixels();
    let timesteps = state.schedule.timesteps();
    let guided = target.is_some()
        && config.guidance.mode != GuidanceMode::None
        && config.lambda_palp > 0.0;

    let batch: Vec<(usize, usize, Tensor)> = (0..config.batch)
        .map(|_| {
            let idx = state.rng.random_range(0..pool.len());
            let t = state.rng.random_range(0..timesteps);
            let eps: Vec<f64> =
                (0..numel).map(|_| state.rng.sample(StandardNormal)).collect();
            (idx, t, Tensor::vector(eps))
        })
        .collect();
    let branch_eps: Vec<Option<Tensor>> = if guided && !config.guidance.share_noise {
        (0..config.batch)
            .map(|_| {
                let eps: Vec<f64> =
                    (0..numel).map(|_| state.rng.sample(StandardNormal)).collect();
                Some(Tensor::vector(eps))
            })
            .collect()
    } else {
        vec![None; config.batch]
    };

    // Reconstruction pass: every sample on one tape, mean loss.
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &state.params, Some(&state.lora), &state.table, Mode::Personalize);
    let cond = state.table.encode_on_tape(&mut tape, bound.table, recon_prompt)?;
    let mut losses = Vec::with_capacity(config.batch);
    for (idx, t, eps) in &batch {
        let x0 = reshape_like(&pool[*idx], eps);
        let loss = denoise_loss(
            &mut tape,
            |tape, x_t, t| {
                let x_node = tape.leaf(x_t.clone());
                bound.forward(tape, &state.params, x_node, t, cond)
            },
            &x0,
            *t,
            eps,
            &state.schedule,
        );
        losses.push(loss);
    }
    let total = losses[1..].iter().fold(losses[0], |acc, &l| tape.add(acc, l));
    let mean = tape.scale(total, 1.0 / config.batch as f64);
    let loss_val = tape.value(mean).data()[0];
    if !loss_val.is_finite() {
        return Err(TrainError::Diverged { step: state.step + 1, loss: loss_val });
    }
    let leaves: Vec<_> = bound.trainable_set().iter().map(|l| l.id).collect();
    let mut grads = tape.grad(mean, &leaves)?;
    drop(tape);

    // Guidance pass: per-sample contributions, averaged and weighted by λ.
    let mut direction_l2 = 0.0;
    if guided {
        let target = target.expect("guided implies target");
        let weight = config.lambda_palp / config.batch as f64;
        for ((idx, t, eps), branch) in batch.iter().zip(&branch_eps) {
            let x0 = reshape_like(&pool[*idx], eps);
            let gg = match config.guidance.mode {
                GuidanceMode::Palp => guidance_loss_palp(
                    &state.params,
                    &state.lora,
                    &state.table,
                    &x0,
                    *t,
                    eps,
                    branch.as_ref(),
                    &target.clean,
                    &target.prompt,
                    &state.schedule,
                    &config.guidance,
                )?,
                GuidanceMode::Sds => guidance_loss_sds(
                    &state.params,
                    &state.lora,
                    &state.table,
                    &x0,
                    *t,
                    eps,
                    branch.as_ref(),
                    &target.clean,
                    &target.prompt,
                    &state.schedule,
                    &config.guidance,
                )?,
                GuidanceMode::None | GuidanceMode::Nfsd => {
                    return Err(TrainError::BadConfig(format!(
                        "guidance mode {:?} cannot drive a guided step",
                        config.guidance.mode
                    )))
                }
            };
            direction_l2 += gg.direction_l2 / config.batch as f64;
            for (g, c) in grads.iter_mut().zip(&gg.grads) {
                let gd = g.data_mut();
                for (gv, cv) in gd.iter_mut().zip(c.data()) {
                    *gv += weight * cv;
                }
            }
        }
    }

    // Frozen rows stay frozen: zero their gradients so the optimizer's
    // moments never accumulate and the update is exactly zero.
    let table_grad = grads.last_mut().expect("table is always trainable");
    let dim = state.table.dim();
    let mask = state.table.trainable_mask().to_vec();
    for (row, keep) in mask.iter().enumerate() {
        if !keep {
            table_grad.data_mut()[row * dim..(row + 1) * dim].fill(0.0);
        }
    }

    let mut targets: Vec<&mut Tensor> = Vec::new();
    for pair in state.lora.pairs.iter_mut() {
        targets.push(&mut pair.a);
        targets.push(&mut pair.b);
    }
    targets.push(state.table.rows_mut());
    state.opt.step(&mut targets, &grads);
    state.step += 1;
    Ok(StepStats { loss: loss_val, direction_l2 })
}

/// One prompt-aligned step: reconstruction plus λ-weighted guidance, as a
/// single optimizer update. Requires `guidance.mode == palp`; with λ=0 the
/// guidance branch is skipped entirely (the baseline reduction).
pub fn palp_step(
    state: &mut TrainState,
    pool: &[Tensor],
    recon_prompt: &Prompt,
    target: &PalpTarget,
    config: &TrainConfig,
) -> Result<StepStats, TrainError> {
    if config.guidance.mode != GuidanceMode::Palp {
        return Err(TrainError::BadConfig(format!(
            "palp_step requires guidance mode palp, got {:?}",
            config.guidance.mode
        )));
    }
    train_step(state, pool, recon_prompt, Some(target), config)
}

/// Everything a personalization run produces.
pub struct PersonalizeOutcome {
    pub checkpoint: Checkpoint,
    /// One row per logged step.
    pub metrics: Vec<MetricsRow>,
    /// (step, mean MSE of single-step pure-noise x̂₀ to the nearest
    /// reference image) at each logged step — the reconstruction-dominance
    /// probe.
    pub probe_mse: Vec<(usize, f64)>,
    pub final_text_align: f64,
    pub final_subject_sim: f64,
}

/// Single-step x̂₀ probes from pure noise: how strongly does the model now
/// reproduce its training data? Reported as mean-over-probes of the MSE to
/// the nearest reference image.
fn probe_recon_mse(
    state: &TrainState,
    refs: &[Tensor],
    recon_prompt: &Prompt,
    probe_seed: u64,
) -> Result<f64, TrainError> {
    let numel = state.params.config.image_pixels();
    let t = state.schedule.timesteps() - 1;
    let cond = state.table.encode(recon_prompt)?;
    let mut rng = ChaCha12Rng::seed_from_u64(probe_seed);
    let mut total = 0.0;
    for _ in 0..PROBE_DRAWS {
        let x: Vec<f64> = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
        let x_t = Tensor::vector(x);
        let pred = forward_raw(&state.params, Some(&state.lora), x_t.data(), t, &cond);
        let x0 = x0_hat(&x_t, &Tensor::vector(pred), t, &state.schedule);
        let nearest = refs
            .iter()
            .map(|r| {
                x0.data()
                    .iter()
                    .zip(r.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / numel as f64
            })
            .fold(f64::INFINITY, f64::min);
        total += nearest;
    }
    Ok(total / PROBE_DRAWS as f64)
}

/// Shared personalization driver. `target_prompt` `None` runs the
/// reconstruction-only baseline; `Some` adds the guidance branch in the
/// mode `config.guidance` selects. Metrics are logged at the config's step
/// grid, always scored against `eval.prompt`.
pub fn personalize_with(
    base: &Checkpoint,
    subject: &SubjectSet,
    target_prompt: Option<&str>,
    config: &TrainConfig,
    eval: &EvalSpec,
    run_id: &str,
) -> Result<PersonalizeOutcome, TrainError> {
    match (target_prompt, config.guidance.mode) {
        (None, GuidanceMode::None) => {}
        (Some(_), GuidanceMode::Sds | GuidanceMode::Palp) => {}
        (None, mode) => {
            return Err(TrainError::BadConfig(format!(
                "guidance mode {mode:?} needs a target prompt"
            )))
        }
        (Some(_), mode) => {
            return Err(TrainError::BadConfig(format!(
                "target prompt given but guidance mode is {mode:?}"
            )))
        }
    }
    let mut state = TrainState::new(base, &[subject], config)?;
    let recon_prompt =
        Prompt::parse(&subject.personalization_prompt, PromptRole::Personalization)?;
    let target = match target_prompt {
        Some(text) => Some(decompose_target(text, &state.table)?),
        None => None,
    };

    let label = mode_label(config.guidance.mode).to_owned();
    let log_steps = config.log_steps();
    let probe_seed = eval.seed ^ 0x0b0e;
    let mut metrics = Vec::new();
    let mut probe_mse = Vec::new();
    let mut final_scores = None;

    for step in 1..=config.steps {
        let stats =
            train_step(&mut state, &subject.images, &recon_prompt, target.as_ref(), config)?;
        if log_steps.contains(&step) {
            let images =
                sample_images(&state.params, Some(&state.lora), &state.table, &state.schedule, eval)?;
            let scores = score_samples(&images, &eval.prompt, Some(&subject.images));
            metrics.push(MetricsRow {
                run_id: run_id.to_owned(),
                mode: label.clone(),
                step: step as u64,
                text_align: scores.text_align,
                subject_sim: scores.subject_sim,
                loss: stats.loss,
                seed: config.seed,
            });
            probe_mse.push((step, probe_recon_mse(&state, &subject.images, &recon_prompt, probe_seed)?));
            final_scores = Some(scores);
        }
    }
    let scores = final_scores.expect("log grid always includes the final step");
    Ok(PersonalizeOutcome {
        checkpoint: state.to_checkpoint(),
        metrics,
        probe_mse,
        final_text_align: scores.text_align,
        final_subject_sim: scores.subject_sim,
    })
}

fn default_eval_seed(config: &TrainConfig) -> u64 {
    config.seed ^ 0xE7A1
}

/// Reconstruction-only personalization (adapter + placeholder row on the
/// reference photos). Requires `guidance.mode == none`; metrics are scored
/// against the personalization prompt.
pub fn personalize_baseline(
    base: &Checkpoint,
    subject: &SubjectSet,
    config: &TrainConfig,
) -> Result<PersonalizeOutcome, TrainError> {
    let eval = EvalSpec::new(&subject.personalization_prompt, default_eval_seed(config));
    let run_id = format!("baseline-seed{}", config.seed);
    personalize_with(base, subject, None, config, &eval, &run_id)
}

/// Prompt-aligned personalization toward `target_prompt`. Requires
/// `guidance.mode == palp`; metrics are scored against the target prompt.
pub fn personalize_palp(
    base: &Checkpoint,
    subject: &SubjectSet,
    target_prompt: &str,
    config: &TrainConfig,
) -> Result<PersonalizeOutcome, TrainError> {
    if config.guidance.mode != GuidanceMode::Palp {
        return Err(TrainError::BadConfig(format!(
            "personalize_palp requires guidance mode palp, got {:?}",
            config.guidance.mode
        )));
    }
    let eval = EvalSpec::new(target_prompt, default_eval_seed(config));
    let run_id = format!("palp-seed{}", config.seed);
    personalize_with(base, subject, Some(target_prompt), config, &eval, &run_id)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::denoiser::embed::PromptError;
    use crate::denoiser::params::ModelConfig;
    use crate::guidance::GuidanceConfig;

    /// Full-size images (the oracles insist on 16×16) but a skinny, short
    /// model so the wiring tests stay fast.
    pub(crate) fn tiny_base(seed: u64) -> Checkpoint {
        let cfg = ModelConfig {
            image_side: 16,
            hidden_width: 12,
            hidden_layers: 2,
            time_pairs: 2,
            cond_dim: 8,
            timesteps: 12,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let params = DenoiserParams::init(cfg, &mut rng);
        let table = EmbeddingTable::with_attributes(
            &["photo", "sketch", "square", "circle"],
            8,
            &mut rng,
        );
        Checkpoint {
            params,
            table,
            lora: None,
            schedule: ScheduleSpec { timesteps: 12, beta_min: 1e-3, beta_max: 0.05 },
        }
    }

    pub(crate) fn tiny_subject(seed: u64) -> SubjectSet {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let images = (0..3)
            .map(|_| {
                Tensor::new(
                    vec![16, 16],
                    (0..256).map(|_| rng.random_range(0.0..1.0)).collect(),
                )
            })
            .collect();
        SubjectSet {
            images,
            personalization_prompt: "photo [V]".into(),
            placeholder: "[V]".into(),
            class_token: "square".into(),
        }
    }

    fn quick_config(mode: GuidanceMode, lambda: f64) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            steps: 4,
            batch: 2,
            seed: 9,
            guidance: GuidanceConfig { mode, ..Default::default() },
            lambda_palp: lambda,
            early_stop_grid: None,
        }
    }

    fn checkpoint_bytes(c: &Checkpoint) -> Vec<u8> {
        c.encode()
    }

    #[test]
    fn lambda_zero_matches_baseline_bitwise() {
        let base = tiny_base(1);
        let subject = tiny_subject(2);
        let baseline =
            personalize_baseline(&base, &subject, &quick_config(GuidanceMode::None, 0.0))
                .unwrap();
        let palp = personalize_palp(
            &base,
            &subject,
            "sketch [V]",
            &quick_config(GuidanceMode::Palp, 0.0),
        )
        .unwrap();
        assert_eq!(
            checkpoint_bytes(&baseline.checkpoint),
            checkpoint_bytes(&palp.checkpoint),
            "λ=0 must reduce to the baseline exactly"
        );
    }

    #[test]
    fn fresh_adapter_matched_prompts_equal_scales_is_a_baseline_step() {
        let base = tiny_base(3);
        let subject = tiny_subject(4);
        let config_b = quick_config(GuidanceMode::None, 0.0);
        let mut config_p = quick_config(GuidanceMode::Palp, 1.0);
        config_p.guidance.alpha = 5.0;
        config_p.guidance.beta = 5.0;

        let mut sb = TrainState::new(&base, &[&subject], &config_b).unwrap();
        let mut sp = TrainState::new(&base, &[&subject], &config_p).unwrap();
        let recon =
            Prompt::parse(&subject.personalization_prompt, PromptRole::Personalization).unwrap();
        // Guidance target == reconstruction prompt, so with B=0 the
        // personalized and clean branches produce the same prediction and
        // the direction is exactly zero.
        let target = decompose_target("photo [V]", &sp.table).unwrap();

        train_step(&mut sb, &subject.images, &recon, None, &config_b).unwrap();
        let stats = palp_step(&mut sp, &subject.images, &recon, &target, &config_p).unwrap();
        assert_eq!(stats.direction_l2, 0.0, "zero residual direction");
        assert_eq!(
            checkpoint_bytes(&sb.to_checkpoint()),
            checkpoint_bytes(&sp.to_checkpoint()),
            "the step must be bit-identical to a baseline step"
        );
    }

    #[test]
    fn base_layers_stay_byte_identical_and_runs_are_deterministic() {
        let base = tiny_base(5);
        let subject = tiny_subject(6);
        let config = quick_config(GuidanceMode::Palp, 1.0);
        let a = personalize_palp(&base, &subject, "sketch [V]", &config).unwrap();
        let b = personalize_palp(&base, &subject, "sketch [V]", &config).unwrap();
        assert_eq!(checkpoint_bytes(&a.checkpoint), checkpoint_bytes(&b.checkpoint));
        for (la, lb) in a.checkpoint.params.layers.iter().zip(&base.params.layers) {
            assert_eq!(la.w.data(), lb.w.data(), "frozen base weights moved");
            assert_eq!(la.b.data(), lb.b.data(), "frozen base biases moved");
        }
        // Frozen table rows (everything but the placeholder) unchanged.
        let dim = base.table.dim();
        for row in 0..base.table.len() {
            assert_eq!(
                &a.checkpoint.table.rows().data()[row * dim..(row + 1) * dim],
                base.table.row(row),
                "frozen row {row} moved"
            );
        }
    }

    #[test]
    fn mode_and_target_mismatches_are_rejected() {
        let base = tiny_base(7);
        let subject = tiny_subject(8);
        let err = personalize_palp(&base, &subject, "sketch [V]", &quick_config(GuidanceMode::None, 1.0));
        assert!(err.is_err());
        let eval = EvalSpec::new("photo [V]", 1);
        let err = personalize_with(
            &base,
            &subject,
            Some("sketch [V]"),
            &quick_config(GuidanceMode::None, 1.0),
            &eval,
            "x",
        );
        assert!(matches!(err, Err(TrainError::BadConfig(_))));
        let err = personalize_with(
            &base,
            &subject,
            None,
            &quick_config(GuidanceMode::Palp, 1.0),
            &eval,
            "x",
        );
        assert!(matches!(err, Err(TrainError::BadConfig(_))));
    }

    #[test]
    fn unregistered_placeholder_in_target_fails_decomposition() {
        let base = tiny_base(9);
        let subject = tiny_subject(10);
        let state = TrainState::new(&base, &[&subject], &quick_config(GuidanceMode::Palp, 1.0))
            .unwrap();
        let err = decompose_target("sketch [W]", &state.table);
        assert!(matches!(err, Err(TrainError::Prompt(PromptError::UnknownToken(_)))));
    }

    #[test]
    fn metrics_rows_land_on_the_log_grid() {
        let base = tiny_base(11);
        let subject = tiny_subject(12);
        let mut config = quick_config(GuidanceMode::None, 0.0);
        config.steps = 6;
        config.early_stop_grid = Some(vec![2, 4, 6]);
        let out = personalize_baseline(&base, &subject, &config).unwrap();
        let steps: Vec<u64> = out.metrics.iter().map(|m| m.step).collect();
        assert_eq!(steps, vec![2, 4, 6]);
        assert_eq!(out.probe_mse.len(), 3);
        assert!(out.metrics.iter().all(|m| m.mode == "baseline"));
    }
}
