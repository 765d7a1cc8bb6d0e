//! Pretraining throughput / quality probe: validation-loss trajectory, the
//! sketch-style sampling gate, and the prompt-sensitivity of pure-noise x̂₀.

use palp_lab::denoiser::embed::{Prompt, PromptRole};
use palp_lab::denoiser::forward::forward_raw;
use palp_lab::diffusion::x0_hat;
use palp_lab::diffcore::tensor::Tensor;
use palp_lab::evalkit::oracle::{classify_style, ring_values, style_score};
use palp_lab::evalkit::world::{gen_dataset, AttributeSpec, Style};
use palp_lab::trainer::eval::{sample_images, EvalSpec};
use palp_lab::trainer::pretrain::pretrain;
use palp_lab::trainer::TrainConfig;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let ds = gen_dataset(&AttributeSpec::default(), 50, 20_260_110);
    eprintln!("dataset: {} items; steps {steps}, lr {lr}", ds.len());
    let config = TrainConfig {
        lr,
        steps,
        batch: 32,
        seed: 11,
        guidance: Default::default(),
        lambda_palp: 0.0,
        early_stop_grid: None,
    };
    let t0 = Instant::now();
    let out = pretrain(&config, &ds).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    eprintln!(
        "{} steps in {:.1}s ({:.1}/s) val {:.4} -> {:.4} (ratio {:.3})",
        steps, dt, steps as f64 / dt, out.initial_val_loss, out.final_val_loss,
        out.final_val_loss / out.initial_val_loss
    );

    let ckpt = &out.checkpoint;
    let schedule = ckpt.schedule.build();

    // Sketch gate: 32 samples at cfg 3.0 for (sketch, circle, plain).
    let t1 = Instant::now();
    let spec = EvalSpec {
        prompt: "sketch circle plain".into(),
        n_samples: 32,
        cfg_scale: 3.0,
        seed: 77,
    };
    let imgs = sample_images(&ckpt.params, None, &ckpt.table, &schedule, &spec).unwrap();
    let n_sketch = imgs.iter().filter(|i| classify_style(i) == Style::Sketch).count();
    let mean_style: f64 =
        imgs.iter().map(|i| style_score(i, Style::Sketch)).sum::<f64>() / 32.0;
    eprintln!(
        "sketch gate: {n_sketch}/32 classified sketch, mean sketch score {:.3}  ({:.1}s)",
        mean_style,
        t1.elapsed().as_secs_f64()
    );
    let px: Vec<f64> = imgs.iter().flat_map(|i| i.data().iter().copied()).collect();
    let mean = px.iter().sum::<f64>() / px.len() as f64;
    let std = (px.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / px.len() as f64).sqrt();
    let lo = px.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ring_mean: f64 = imgs
        .iter()
        .map(|i| ring_values(i).iter().sum::<f64>() / ring_values(i).len() as f64)
        .sum::<f64>()
        / imgs.len() as f64;
    eprintln!("  sample px mean {mean:.3} std {std:.3} range [{lo:.2},{hi:.2}] ring mean {ring_mean:.3}");

    // Does conditioning matter to the loss? Same (item, t, eps) scored with the
    // true prompt vs the null prompt.
    let mut rng_gap = ChaCha12Rng::seed_from_u64(13);
    let (mut with_cond, mut with_null) = (0.0, 0.0);
    let null_cond = ckpt.table.encode(&Prompt::null()).unwrap();
    for _ in 0..500 {
        let item = &ds[rng_gap.random_range(0..ds.len())];
        let t = rng_gap.random_range(50..schedule.timesteps());
        let ab = schedule.alpha_bar(t);
        let eps: Vec<f64> = (0..256).map(|_| rng_gap.sample(StandardNormal)).collect();
        let x_t: Vec<f64> = item
            .image
            .data()
            .iter()
            .zip(&eps)
            .map(|(a, e)| ab.sqrt() * a + (1.0 - ab).sqrt() * e)
            .collect();
        let prompt = Prompt::parse(&item.label.prompt_text(), PromptRole::Clean).unwrap();
        let cond = ckpt.table.encode(&prompt).unwrap();
        let mse = |pred: &[f64]| {
            pred.iter().zip(&eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>() / 256.0
        };
        with_cond += mse(&forward_raw(&ckpt.params, None, &x_t, t, &cond));
        with_null += mse(&forward_raw(&ckpt.params, None, &x_t, t, &null_cond));
    }
    eprintln!(
        "  cond gap (t>=50): true-cond {:.4} vs null-cond {:.4}",
        with_cond / 500.0,
        with_null / 500.0
    );

    // First-layer column-block energy: is the conditioning pathway alive?
    let w1 = &ckpt.params.layers[0].w;
    let d_in = w1.shape()[1];
    let d_h = w1.shape()[0];
    let npx = 256;
    let ntf = ckpt.params.config.time_feature_width();
    let block_norm = |lo: usize, hi: usize| -> f64 {
        let mut acc = 0.0;
        for r in 0..d_h {
            for c in lo..hi {
                let v = w1.data()[r * d_in + c];
                acc += v * v;
            }
        }
        (acc / (d_h * (hi - lo)) as f64).sqrt()
    };
    eprintln!(
        "  w1 rms by block: pixels {:.4} time {:.4} cond {:.4}",
        block_norm(0, npx),
        block_norm(npx, npx + ntf),
        block_norm(npx + ntf, d_in)
    );
    let rows = ckpt.table.rows();
    let dim = rows.shape()[1];
    let nrows = rows.shape()[0];
    let mut mean_row = vec![0.0; dim];
    for r in 0..nrows {
        for c in 0..dim {
            mean_row[c] += rows.data()[r * dim + c] / nrows as f64;
        }
    }
    let spread: f64 = (0..nrows)
        .map(|r| {
            (0..dim)
                .map(|c| {
                    let d = rows.data()[r * dim + c] - mean_row[c];
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / nrows as f64;
    eprintln!("  table rows: {nrows} rows, mean distance from centroid {spread:.4}");

    // x̂₀ prompt sensitivity at large t: ring whiteness sketch vs photo.
    let t_large = schedule.timesteps() - 1;
    let whiteness = |text: &str| -> f64 {
        let prompt = Prompt::parse(text, PromptRole::Target).unwrap();
        let cond = ckpt.table.encode(&prompt).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut acc = 0.0;
        for _ in 0..8 {
            let x: Vec<f64> = (0..256).map(|_| rng.sample(StandardNormal)).collect();
            let xt = Tensor::vector(x);
            let pred = forward_raw(&ckpt.params, None, xt.data(), t_large, &cond);
            let x0 = x0_hat(&xt, &Tensor::vector(pred), t_large, &schedule);
            let img = Tensor::new(vec![16, 16], x0.data().to_vec());
            acc += ring_values(&img).iter().sum::<f64>() / (ring_values(&img).len() as f64);
        }
        acc / 8.0
    };
    let w_sketch = whiteness("sketch circle plain");
    let w_photo = whiteness("photo circle dots");
    eprintln!("x̂₀ ring mean at t={t_large}: sketch-prompt {w_sketch:.3} vs photo-prompt {w_photo:.3}");

    // Per-band validation loss of the trained model.
    let s = &schedule;
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let mut by_band = [0.0f64; 5];
    let mut band_n = [0usize; 5];
    for _ in 0..1000 {
        let item = &ds[rng.random_range(0..ds.len())];
        let t = rng.random_range(0..s.timesteps());
        let ab = s.alpha_bar(t);
        let eps: Vec<f64> = (0..256).map(|_| rng.sample(StandardNormal)).collect();
        let x_t: Vec<f64> = item
            .image
            .data()
            .iter()
            .zip(&eps)
            .map(|(a, e)| ab.sqrt() * a + (1.0 - ab).sqrt() * e)
            .collect();
        let prompt = Prompt::parse(&item.label.prompt_text(), PromptRole::Clean).unwrap();
        let cond = ckpt.table.encode(&prompt).unwrap();
        let pred = forward_raw(&ckpt.params, None, &x_t, t, &cond);
        let mse: f64 =
            pred.iter().zip(&eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>() / 256.0;
        let band = (t * 5 / s.timesteps()).min(4);
        by_band[band] += mse;
        band_n[band] += 1;
    }
    for b in 0..5 {
        eprintln!("  model t band {}..{}: {:.4}", b * 50, (b + 1) * 50, by_band[b] / band_n[b].max(1) as f64);
    }
}
