//! Recorded-quality fixtures for the cached base model. The thresholds here
//! are measurements taken on the default pretraining recipe and pinned with
//! margin, so a regression in the model, the data generator, or the sampler
//! shows up as a loud test failure rather than silent drift.

use palp_lab::denoiser::embed::{Prompt, PromptRole};
use palp_lab::denoiser::forward::forward_raw;
use palp_lab::diffusion::sample;
use palp_lab::evalkit::oracle::classify_style;
use palp_lab::evalkit::world::{gen_dataset, AttributeSpec, Style, IMAGE_SIDE};
use palp_lab::trainer::eval::DEFAULT_EVAL_CFG_SCALE;
use palp_lab::trainer::pretrain::{
    default_pretrain_config, pretrain, pretrain_cached, validation_loss, DEFAULT_DATASET_SEED,
    DEFAULT_N_PER_CELL,
};
use palp_lab::diffcore::tensor::Tensor;

/// Draw `n` samples for `prompt_text` from the cached base at `cfg_scale`.
fn base_samples(prompt_text: &str, cfg_scale: f64, n: usize, seed: u64) -> Vec<Tensor> {
    let config = default_pretrain_config();
    let ckpt = pretrain_cached(&config, DEFAULT_N_PER_CELL, DEFAULT_DATASET_SEED)
        .expect("cached pretrain");
    let schedule = ckpt.schedule.build();
    let prompt = Prompt::parse(prompt_text, PromptRole::Clean).unwrap();
    let cond = ckpt.table.encode(&prompt).unwrap();
    let null = ckpt.table.encode(&Prompt::null()).unwrap();
    let predict =
        |x: &[f64], t: usize, c: Option<&[f64]>| forward_raw(&ckpt.params, None, x, t, c.unwrap_or(&null));
    let numel = ckpt.params.config.image_pixels();
    (0..n)
        .map(|i| {
            let px = sample(&predict, &cond, &schedule, cfg_scale, numel, seed + i as u64);
            Tensor::new(vec![IMAGE_SIDE, IMAGE_SIDE], px)
        })
        .collect()
}

/// The default recipe drives ε-prediction validation loss from 1.2072 at
/// initialization to 0.1207 (measured once; an estimator study against the
/// posterior mean puts the dataset's floor near 0.101·initial, so the run
/// lands within a percent of the best any model could do). Pinned with
/// margin: absolute < 0.127 and ratio < 0.105·initial.
#[test]
fn validation_loss_reaches_recorded_floor() {
    let config = default_pretrain_config();
    let ckpt =
        pretrain_cached(&config, DEFAULT_N_PER_CELL, DEFAULT_DATASET_SEED).expect("cached pretrain");
    let dataset = gen_dataset(&AttributeSpec::default(), DEFAULT_N_PER_CELL, DEFAULT_DATASET_SEED);
    let final_loss = validation_loss(&ckpt, &dataset, config.seed).unwrap();

    // A one-step run re-derives the untrained model's loss (initialization
    // depends only on the seed), so the ratio check stays self-contained.
    let initial = {
        let mut probe = config.clone();
        probe.steps = 1;
        pretrain(&probe, &dataset).unwrap().initial_val_loss
    };
    assert!(
        (1.0..1.5).contains(&initial),
        "untrained validation loss {initial:.4} left its recorded band [1.0, 1.5)"
    );
    assert!(
        final_loss < 0.127,
        "validation loss {final_loss:.4} above the recorded fixture 0.127"
    );
    assert!(
        final_loss < 0.105 * initial,
        "validation loss {final_loss:.4} is {:.4}·initial ({initial:.4}); recorded ratio 0.100",
        final_loss / initial
    );
}

/// Conditioning gates on fresh samples, thresholds recorded from a sweep
/// over guidance scales and seeds:
///
/// * photo prompt at the metric-default scale 3.0 — all 32 samples
///   classified photo (the analog `style_score` tops out near 0.85 on
///   samples because the noise gate discounts residual sampling speckle
///   over the textured photo background, so the gate is pinned on the
///   classifier, not the analog score); pinned at ≥ 29/32.
/// * sketch prompt at scale 5.0 (where the sketch gate peaks) — 28/32
///   samples measured sketch-classified, stable across scales 5–6 and
///   seeds; pinned at ≥ 25/32. The shortfall from 32/32 is a property of
///   plain unclipped ancestral sampling at this scale: a few trajectories
///   leave the data range and never recover, independent of conditioning.
#[test]
fn sampling_style_gates_match_recorded_thresholds() {
    let photo = base_samples("photo square plain", DEFAULT_EVAL_CFG_SCALE, 32, 501);
    let photo_hits =
        photo.iter().filter(|img| classify_style(img) == Style::Photo).count();
    assert!(
        photo_hits >= 29,
        "photo-style gate: {photo_hits}/32 samples classified photo, recorded fixture needs 29"
    );

    let sketch = base_samples("sketch circle plain", 5.0, 32, 77);
    let sketch_hits =
        sketch.iter().filter(|img| classify_style(img) == Style::Sketch).count();
    assert!(
        sketch_hits >= 25,
        "sketch-style gate: {sketch_hits}/32 samples classified sketch, recorded fixture needs 25"
    );
}
