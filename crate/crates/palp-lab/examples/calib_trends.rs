//! Calibration sweep: runs every personalization arm the trend tests compare
//! (plain reconstruction, guided variants, noise-sharing ablation, and the
//! joint two-subject setup) at one learning rate on the cached base model,
//! printing trend curves and the clean-estimate probes. The recorded
//! thresholds in the integration tests were pinned from these printouts.
//!
//! Usage: `cargo run --release --example calib_trends [seed] [lr] [alpha] [beta] [multi_alpha] [multi_beta]`

use palp_lab::denoiser::checkpoint::Checkpoint;
use palp_lab::evalkit::oracle::background_whiteness;
use palp_lab::evalkit::probe::x0hat_probe;
use palp_lab::evalkit::world::SubjectKind;
use palp_lab::guidance::{GuidanceConfig, GuidanceMode, WeightFn};
use palp_lab::trainer::eval::{mean_scores, sample_images, EvalSpec};
use palp_lab::trainer::multi::{multi_subject_personalize_with, COMPOSITION_ALPHA, COMPOSITION_BETA};
use palp_lab::trainer::personalize::{personalize_with, PersonalizeOutcome};
use palp_lab::trainer::pretrain::{
    default_pretrain_config, pretrain_cached, DEFAULT_DATASET_SEED, DEFAULT_N_PER_CELL,
};
use palp_lab::trainer::{SubjectSet, TrainConfig, DEFAULT_EARLY_STOP_GRID};

const TARGET: &str = "sketch [V] plain";
const PROBE_T: usize = 200;
const PROBE_SEEDS: u64 = 16;

fn probe_whiteness(ckpt: &Checkpoint, prompt: &str) -> f64 {
    (0..PROBE_SEEDS)
        .map(|seed| {
            let rows = x0hat_probe(ckpt, prompt, &[PROBE_T], seed).unwrap();
            background_whiteness(&rows[0].x0_hat)
        })
        .sum::<f64>()
        / PROBE_SEEDS as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let alpha: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(15.0);
    let beta: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(7.5);
    let multi_alpha: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(COMPOSITION_ALPHA);
    let multi_beta: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(COMPOSITION_BETA);
    let base =
        pretrain_cached(&default_pretrain_config(), DEFAULT_N_PER_CELL, DEFAULT_DATASET_SEED)
            .unwrap();
    let subject = SubjectSet::from_kind(SubjectKind::TexturedDiamond, 3, "[V]", 1001);
    let eval = EvalSpec { prompt: TARGET.into(), n_samples: 16, cfg_scale: 3.0, seed: seed ^ 0xE7A1 };

    let run = |label: &str, mode: GuidanceMode, share: bool, rescale: bool, lambda: f64| {
        let config = TrainConfig {
            lr,
            steps: 500,
            batch: 8,
            seed,
            guidance: GuidanceConfig {
                mode,
                alpha,
                beta,
                w_t: WeightFn::One,
                share_noise: share,
                rescale,
            },
            lambda_palp: lambda,
            early_stop_grid: Some(DEFAULT_EARLY_STOP_GRID.to_vec()),
        };
        let target = (mode != GuidanceMode::None).then_some(TARGET);
        let out = personalize_with(&base, &subject, target, &config, &eval, label).unwrap();
        let curve: Vec<String> = out
            .metrics
            .iter()
            .map(|r| format!("{}:{:.3}/{:.3}", r.step, r.text_align, r.subject_sim))
            .collect();
        println!(
            "{label:<16} final text {:.4} sim {:.4} probe_mse {:.4} | {}",
            out.final_text_align,
            out.final_subject_sim,
            out.probe_mse.last().map(|&(_, m)| m).unwrap_or(f64::NAN),
            curve.join(" ")
        );
        out
    };

    println!("== single subject, seed {seed}, lr {lr}, a {alpha} b {beta} (step:text/sim) ==");
    let baseline = run("baseline", GuidanceMode::None, true, true, 0.0);
    let palp = run("palp-rescale", GuidanceMode::Palp, true, true, 1.0);
    let flat = run("palp-flat", GuidanceMode::Palp, true, false, 1.0);
    run("sds-flat", GuidanceMode::Sds, true, false, 1.0);
    run("palp-fresh", GuidanceMode::Palp, false, true, 1.0);

    let probe = |o: &PersonalizeOutcome| probe_whiteness(&o.checkpoint, TARGET);
    println!(
        "whiteness@t{PROBE_T}: palp-rescale {:.4} palp-flat {:.4} baseline {:.4}",
        probe(&palp),
        probe(&flat),
        probe(&baseline),
    );

    println!("== joint subjects, seed {seed}, lr {lr}, a {multi_alpha} b {multi_beta} ==");
    let subjects = vec![
        SubjectSet::from_kind(SubjectKind::TexturedDiamond, 3, "[V1]", 1001),
        SubjectSet::from_kind(SubjectKind::StripedEllipse, 3, "[V2]", 1002),
    ];
    let multi_target = "sketch [V1] [V2] plain";
    let multi_eval =
        EvalSpec { prompt: multi_target.into(), n_samples: 16, cfg_scale: 3.0, seed: seed ^ 0xE7A2 };
    for (label, mode, lambda) in
        [("multi-control", GuidanceMode::None, 0.0), ("multi-palp", GuidanceMode::Palp, 1.0)]
    {
        let config = TrainConfig {
            lr,
            steps: 500,
            batch: 8,
            seed,
            guidance: GuidanceConfig {
                mode,
                alpha: multi_alpha,
                beta: multi_beta,
                w_t: WeightFn::One,
                share_noise: true,
                rescale: true,
            },
            lambda_palp: lambda,
            early_stop_grid: Some(DEFAULT_EARLY_STOP_GRID.to_vec()),
        };
        let out = multi_subject_personalize_with(
            &base,
            &subjects,
            multi_target,
            &config,
            &multi_eval,
            label,
        )
        .unwrap();
        let ckpt = &out.checkpoint;
        let images = sample_images(
            &ckpt.params,
            ckpt.lora.as_ref(),
            &ckpt.table,
            &ckpt.schedule.build(),
            &multi_eval,
        )
        .unwrap();
        let style = mean_scores(&images, multi_target).style.unwrap_or(f64::NAN);
        println!(
            "{label:<16} final text {:.4} sims {:.4}/{:.4} joint-style {:.4}",
            out.final_text_align, out.final_subject_sims[0], out.final_subject_sims[1], style
        );
    }
}
