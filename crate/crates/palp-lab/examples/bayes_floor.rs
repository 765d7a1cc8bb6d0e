//! Estimate the best achievable ε-prediction MSE on the grid dataset: the
//! Bayes estimator E[ε | x_t, label] computed from the empirical train set,
//! and the value of conditioning (label-aware vs label-blind posterior).

use palp_lab::diffusion::{build_schedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_TIMESTEPS};
use palp_lab::evalkit::world::{gen_dataset, AttributeSpec};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

const BANDS: usize = 10;

fn posterior_x0(x_t: &[f64], sa: f64, one_minus_ab: f64, peers: &[&[f64]]) -> Vec<f64> {
    let logw: Vec<f64> = peers
        .iter()
        .map(|p| {
            let d2: f64 = x_t
                .iter()
                .zip(p.iter())
                .map(|(xt, pv)| {
                    let m = xt - sa * pv;
                    m * m
                })
                .sum();
            -d2 / (2.0 * one_minus_ab)
        })
        .collect();
    let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - mx).exp()).collect();
    let wsum: f64 = w.iter().sum();
    let mut ex0 = vec![0.0f64; x_t.len()];
    for (wi, p) in w.iter().zip(peers) {
        for (o, pv) in ex0.iter_mut().zip(p.iter()) {
            *o += wi / wsum * pv;
        }
    }
    ex0
}

fn eps_mse(x_t: &[f64], ex0: &[f64], eps: &[f64], sa: f64, sb: f64) -> f64 {
    x_t.iter()
        .zip(ex0)
        .zip(eps)
        .map(|((xt, e0), e)| {
            let eh = (xt - sa * e0) / sb;
            (eh - e) * (eh - e)
        })
        .sum::<f64>()
        / x_t.len() as f64
}

fn main() {
    let ds = gen_dataset(&AttributeSpec::default(), 50, 20_260_110);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, item) in ds.iter().enumerate() {
        if i % 10 == 9 { val.push(item) } else { train.push(item) }
    }
    let s = build_schedule(DEFAULT_TIMESTEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX);
    let all_peers: Vec<&[f64]> = train.iter().map(|p| p.image.data()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let n_trials = 2000;
    let (mut total_aware, mut total_blind) = (0.0, 0.0);
    let mut aware = [0.0f64; BANDS];
    let mut blind = [0.0f64; BANDS];
    let mut band_n = [0usize; BANDS];
    for _ in 0..n_trials {
        let item = val[rng.random_range(0..val.len())];
        let t = rng.random_range(0..s.timesteps());
        let ab = s.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0 = item.image.data();
        let eps: Vec<f64> = (0..256).map(|_| rng.sample(StandardNormal)).collect();
        let x_t: Vec<f64> = x0.iter().zip(&eps).map(|(a, e)| sa * a + sb * e).collect();
        let peers: Vec<&[f64]> = train
            .iter()
            .filter(|p| p.label == item.label)
            .map(|p| p.image.data())
            .collect();
        let ex0_aware = posterior_x0(&x_t, sa, 1.0 - ab, &peers);
        let ex0_blind = posterior_x0(&x_t, sa, 1.0 - ab, &all_peers);
        let ma = eps_mse(&x_t, &ex0_aware, &eps, sa, sb);
        let mb = eps_mse(&x_t, &ex0_blind, &eps, sa, sb);
        total_aware += ma;
        total_blind += mb;
        let band = (t * BANDS / s.timesteps()).min(BANDS - 1);
        aware[band] += ma;
        blind[band] += mb;
        band_n[band] += 1;
    }
    println!(
        "bayes-floor ε-MSE ≈ {:.4} label-aware, {:.4} label-blind",
        total_aware / n_trials as f64,
        total_blind / n_trials as f64
    );
    let w = DEFAULT_TIMESTEPS / BANDS;
    for b in 0..BANDS {
        let n = band_n[b].max(1) as f64;
        println!(
            "  t {:3}..{:3} (ᾱ {:.4}..{:.4}): aware {:.4} blind {:.4} label-value {:+.4}",
            b * w,
            (b + 1) * w,
            s.alpha_bar(b * w),
            s.alpha_bar(((b + 1) * w).min(DEFAULT_TIMESTEPS - 1)),
            aware[b] / n,
            blind[b] / n,
            (blind[b] - aware[b]) / n
        );
    }
}
