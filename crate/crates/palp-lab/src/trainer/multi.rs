//! Joint personalization of two subjects under one adapter: each step
//! trains on one subject's photos (chosen uniformly), while the guidance
//! branch pulls toward a single composed target prompt naming both.

use crate::denoiser::checkpoint::Checkpoint;
use crate::denoiser::embed::{Prompt, PromptRole};
use crate::evalkit::report::MetricsRow;
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::trainer::eval::{sample_images, score_samples, EvalSpec};
use crate::trainer::personalize::{decompose_target, train_step, PalpTarget, TrainState};
use crate::trainer::{mode_label, SubjectSet, TrainConfig, TrainError};

/// Guidance scales for composed (multi-subject) targets: gentler than the
/// single-subject defaults, keeping both subjects renderable.
pub const COMPOSITION_ALPHA: f64 = 7.5;
pub const COMPOSITION_BETA: f64 = 1.0;

/// The standard guidance configuration for composition runs.
pub fn composition_guidance() -> GuidanceConfig {
    GuidanceConfig { alpha: COMPOSITION_ALPHA, beta: COMPOSITION_BETA, ..Default::default() }
}

pub struct MultiOutcome {
    pub checkpoint: Checkpoint,
    /// Rows log the *minimum* of the per-subject similarities — the joint
    /// score is only as good as the weaker subject.
    pub metrics: Vec<MetricsRow>,
    pub final_text_align: f64,
    /// Final similarity per subject, in input order.
    pub final_subject_sims: Vec<f64>,
}

/// Jointly personalize two subjects toward one composed target prompt.
///
/// Per step, on the training stream: subject choice (uniform), then the
/// usual batch draws over that subject's photos. Reconstruction uses the
/// chosen subject's own prompt; guidance always uses the composed target.
/// `guidance.mode == none` or λ=0 trains the joint baseline (no guidance),
/// which is the comparison arm for composition ablations.
pub fn multi_subject_personalize(
    base: &Checkpoint,
    subjects: &[SubjectSet],
    target_prompt: &str,
    config: &TrainConfig,
) -> Result<MultiOutcome, TrainError> {
    let eval = EvalSpec::new(target_prompt, config.seed ^ 0xE7A2);
    let run_id = format!("multi-{}-seed{}", mode_label(config.guidance.mode), config.seed);
    multi_subject_personalize_with(base, subjects, target_prompt, config, &eval, &run_id)
}

/// [`multi_subject_personalize`] with explicit evaluation settings.
pub fn multi_subject_personalize_with(
    base: &Checkpoint,
    subjects: &[SubjectSet],
    target_prompt: &str,
    config: &TrainConfig,
    eval: &EvalSpec,
    run_id: &str,
) -> Result<MultiOutcome, TrainError> {
    if subjects.len() != 2 {
        return Err(TrainError::BadSubject(format!(
            "joint personalization needs exactly 2 subjects, got {}",
            subjects.len()
        )));
    }
    if subjects[0].placeholder == subjects[1].placeholder {
        return Err(TrainError::BadSubject(format!(
            "subjects must use distinct placeholders, both use `{}`",
            subjects[0].placeholder
        )));
    }
    if config.guidance.mode == GuidanceMode::Sds {
        return Err(TrainError::BadConfig(
            "composition supports guidance modes none and palp".into(),
        ));
    }

    let refs: Vec<&SubjectSet> = subjects.iter().collect();
    let mut state = TrainState::new(base, &refs, config)?;
    let recon_prompts: Vec<Prompt> = subjects
        .iter()
        .map(|s| Prompt::parse(&s.personalization_prompt, PromptRole::Personalization))
        .collect::<Result<_, _>>()?;
    let target = decompose_target(target_prompt, &state.table)?;
    for s in subjects {
        if !target.prompt.tokens().iter().any(|t| t == &s.placeholder) {
            return Err(TrainError::BadConfig(format!(
                "target `{target_prompt}` does not mention placeholder `{}`",
                s.placeholder
            )));
        }
    }
    let guided = config.guidance.mode == GuidanceMode::Palp && config.lambda_palp > 0.0;
    let target_for_step: Option<&PalpTarget> = guided.then_some(&target);

    let label = mode_label(config.guidance.mode).to_owned();
    let log_steps = config.log_steps();
    let mut metrics = Vec::new();
    let mut final_scores: Option<(f64, Vec<f64>)> = None;

    for step in 1..=config.steps {
        let which = state.pick_subject(subjects.len());
        let stats = train_step(
            &mut state,
            &subjects[which].images,
            &recon_prompts[which],
            target_for_step,
            config,
        )?;
        if log_steps.contains(&step) {
            let images =
                sample_images(&state.params, Some(&state.lora), &state.table, &state.schedule, eval)?;
            let text =
                score_samples(&images, &eval.prompt, None).text_align;
            let sims: Vec<f64> = subjects
                .iter()
                .map(|s| {
                    score_samples(&images, &eval.prompt, Some(&s.images)).subject_sim
                })
                .collect();
            let joint = sims.iter().copied().fold(f64::INFINITY, f64::min);
            metrics.push(MetricsRow {
                run_id: run_id.to_owned(),
                mode: label.clone(),
                step: step as u64,
                text_align: text,
                subject_sim: joint,
                loss: stats.loss,
                seed: config.seed,
            });
            final_scores = Some((text, sims));
        }
    }
    let (final_text_align, final_subject_sims) =
        final_scores.expect("log grid always includes the final step");
    Ok(MultiOutcome {
        checkpoint: state.to_checkpoint(),
        metrics,
        final_text_align,
        final_subject_sims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::personalize::tests::{tiny_base, tiny_subject};
    use crate::trainer::DEFAULT_EARLY_STOP_GRID;

    fn two_subjects() -> Vec<SubjectSet> {
        let mut a = tiny_subject(21);
        a.placeholder = "[V1]".into();
        a.personalization_prompt = "photo [V1]".into();
        a.class_token = "square".into();
        let mut b = tiny_subject(22);
        b.placeholder = "[V2]".into();
        b.personalization_prompt = "photo [V2]".into();
        b.class_token = "circle".into();
        vec![a, b]
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            steps: 3,
            batch: 2,
            seed: 13,
            guidance: composition_guidance(),
            lambda_palp: 1.0,
            early_stop_grid: None,
        }
    }

    #[test]
    fn composition_scales_are_the_documented_defaults() {
        let g = composition_guidance();
        assert_eq!((g.alpha, g.beta), (7.5, 1.0));
        assert_eq!(DEFAULT_EARLY_STOP_GRID.len(), 6);
    }

    #[test]
    fn needs_two_subjects_with_distinct_placeholders() {
        let base = tiny_base(20);
        let subs = two_subjects();
        let one = multi_subject_personalize(&base, &subs[..1], "sketch [V1] [V2]", &quick_config());
        assert!(matches!(one, Err(TrainError::BadSubject(_))));

        let mut same = two_subjects();
        same[1].placeholder = "[V1]".into();
        same[1].personalization_prompt = "photo [V1]".into();
        let err = multi_subject_personalize(&base, &same, "sketch [V1] [V2]", &quick_config());
        assert!(matches!(err, Err(TrainError::BadSubject(_))));
    }

    #[test]
    fn target_must_mention_both_placeholders() {
        let base = tiny_base(20);
        let subs = two_subjects();
        let err = multi_subject_personalize(&base, &subs, "sketch [V1]", &quick_config());
        assert!(matches!(err, Err(TrainError::BadConfig(_))));
    }

    #[test]
    fn joint_run_is_deterministic_and_reports_both_subjects() {
        let base = tiny_base(20);
        let subs = two_subjects();
        let a = multi_subject_personalize(&base, &subs, "sketch [V1] [V2]", &quick_config())
            .unwrap();
        let b = multi_subject_personalize(&base, &subs, "sketch [V1] [V2]", &quick_config())
            .unwrap();
        assert_eq!(a.checkpoint.encode(), b.checkpoint.encode());
        assert_eq!(a.final_subject_sims.len(), 2);
        assert_eq!(a.metrics.last().unwrap().step, 3);
        let joint = a.metrics.last().unwrap().subject_sim;
        let min = a.final_subject_sims.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(joint, min);
    }
}
