//! Build (or load) the default cached base checkpoint and print the
//! measurements the test suite pins: validation loss, the sketch sampling
//! gate, and prompt sensitivity of the pure-noise x̂₀ probe.

use palp_lab::evalkit::oracle::{background_whiteness, classify_style, style_score};
use palp_lab::evalkit::probe::x0hat_probe;
use palp_lab::evalkit::world::{gen_dataset, AttributeSpec, Style};
use palp_lab::trainer::eval::{sample_images, EvalSpec};
use palp_lab::trainer::pretrain::{
    checkpoint_hash, default_pretrain_config, pretrain_cached, validation_loss,
    DEFAULT_DATASET_SEED, DEFAULT_N_PER_CELL,
};
use std::time::Instant;

fn main() {
    let config = default_pretrain_config();
    let t0 = Instant::now();
    let ckpt = pretrain_cached(&config, DEFAULT_N_PER_CELL, DEFAULT_DATASET_SEED).unwrap();
    println!(
        "checkpoint ready in {:.1}s  hash {}",
        t0.elapsed().as_secs_f64(),
        &checkpoint_hash(&ckpt)[..16]
    );

    let ds = gen_dataset(&AttributeSpec::default(), DEFAULT_N_PER_CELL, DEFAULT_DATASET_SEED);
    let val = validation_loss(&ckpt, &ds, config.seed).unwrap();
    println!("validation loss {val:.6}");

    let schedule = ckpt.schedule.build();
    for (label, prompt) in
        [("sketch circle plain", "sketch circle plain"), ("photo circle plain", "photo circle plain")]
    {
        let spec = EvalSpec { prompt: prompt.into(), n_samples: 32, cfg_scale: 3.0, seed: 77 };
        let imgs = sample_images(&ckpt.params, None, &ckpt.table, &schedule, &spec).unwrap();
        let n_sketch = imgs.iter().filter(|i| classify_style(i) == Style::Sketch).count();
        let mean_style: f64 =
            imgs.iter().map(|i| style_score(i, Style::Sketch)).sum::<f64>() / imgs.len() as f64;
        let mean_white: f64 =
            imgs.iter().map(background_whiteness).sum::<f64>() / imgs.len() as f64;
        println!(
            "{label}: {n_sketch}/32 sketch, sketch score {mean_style:.3}, whiteness {mean_white:.3}"
        );
    }

    // Prompt sensitivity of one-step x̂₀ from pure noise, several probe seeds.
    for t_probe in [100usize, 150, 200, 249] {
        let mut gap_sum = 0.0;
        let mut wins = 0;
        let n_seeds = 16u64;
        for seed in 0..n_seeds {
            let sketch = x0hat_probe(&ckpt, "sketch circle plain", &[t_probe], seed).unwrap();
            let photo = x0hat_probe(&ckpt, "photo circle plain", &[t_probe], seed).unwrap();
            let ws = background_whiteness(&sketch[0].x0_hat);
            let wp = background_whiteness(&photo[0].x0_hat);
            gap_sum += ws - wp;
            if ws > wp {
                wins += 1;
            }
        }
        println!(
            "x0hat whiteness t={t_probe}: sketch-vs-photo gap {:+.4} mean, {wins}/{n_seeds} seeds positive",
            gap_sum / n_seeds as f64
        );
    }
}
