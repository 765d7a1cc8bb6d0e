//! One-off diagnostic: distribution of oracle scores on fresh base-model
//! samples, used to pin the recorded thresholds in the quality fixtures.

use palp_lab::denoiser::embed::{Prompt, PromptRole};
use palp_lab::denoiser::forward::forward_raw;
use palp_lab::diffusion::sample;
use palp_lab::evalkit::oracle::{classify_style, style_score};
use palp_lab::evalkit::world::{Style, IMAGE_SIDE};
use palp_lab::trainer::pretrain::{
    default_pretrain_config, pretrain_cached, DEFAULT_DATASET_SEED, DEFAULT_N_PER_CELL,
};
use palp_lab::diffcore::tensor::Tensor;

fn main() {
    let ckpt = pretrain_cached(&default_pretrain_config(), DEFAULT_N_PER_CELL, DEFAULT_DATASET_SEED)
        .unwrap();
    let schedule = ckpt.schedule.build();
    let null = ckpt.table.encode(&Prompt::null()).unwrap();
    let numel = ckpt.params.config.image_pixels();
    for (prompt_text, cfg, style, seed) in [
        ("photo square plain", 3.0, Style::Photo, 501u64),
        ("photo square plain", 5.0, Style::Photo, 501),
        ("sketch circle plain", 5.0, Style::Sketch, 77),
    ] {
        let prompt = Prompt::parse(prompt_text, PromptRole::Clean).unwrap();
        let cond = ckpt.table.encode(&prompt).unwrap();
        let predict = |x: &[f64], t: usize, c: Option<&[f64]>| {
            forward_raw(&ckpt.params, None, x, t, c.unwrap_or(&null))
        };
        let mut scores: Vec<f64> = (0..32)
            .map(|i| {
                let px = sample(&predict, &cond, &schedule, cfg, numel, seed + i as u64);
                let img = Tensor::new(vec![IMAGE_SIDE, IMAGE_SIDE], px);
                style_score(&img, style)
            })
            .collect();
        scores.sort_by(f64::total_cmp);
        let n_class = (0..32)
            .map(|i| {
                let px = sample(&predict, &cond, &schedule, cfg, numel, seed + i as u64);
                let img = Tensor::new(vec![IMAGE_SIDE, IMAGE_SIDE], px);
                (classify_style(&img) == style) as usize
            })
            .sum::<usize>();
        println!(
            "{prompt_text} cfg {cfg}: classified {n_class}/32; scores min {:.3} p10 {:.3} med {:.3} p90 {:.3} max {:.3}",
            scores[0], scores[3], scores[16], scores[28], scores[31]
        );
    }
}
