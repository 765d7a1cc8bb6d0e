//! Denoiser weights and architecture configuration.

use crate::diffcore::tensor::Tensor;
use crate::diffusion;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

pub const DEFAULT_IMAGE_SIDE: usize = 16;
pub const DEFAULT_HIDDEN_WIDTH: usize = 256;
pub const DEFAULT_HIDDEN_LAYERS: usize = 2;
pub const DEFAULT_TIME_PAIRS: usize = 8;
pub const DEFAULT_COND_DIM: usize = 16;

/// Architecture hyperparameters. Serialized into checkpoints so a file is
/// self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_side: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// sin/cos pairs in the time embedding (feature width = 2·pairs).
    pub time_pairs: usize,
    pub cond_dim: usize,
    /// Timestep count of the schedule the model is trained against; time
    /// features normalize t by it.
    pub timesteps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_side: DEFAULT_IMAGE_SIDE,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            hidden_layers: DEFAULT_HIDDEN_LAYERS,
            time_pairs: DEFAULT_TIME_PAIRS,
            cond_dim: DEFAULT_COND_DIM,
            timesteps: diffusion::DEFAULT_TIMESTEPS,
        }
    }
}

impl ModelConfig {
    pub fn image_pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn time_feature_width(&self) -> usize {
        2 * self.time_pairs
    }

    pub fn input_width(&self) -> usize {
        self.image_pixels() + self.time_feature_width() + self.cond_dim
    }
}

/// One affine block: `w·x + b` with `w: [d_out, d_in]`, `b: [d_out]`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
}

impl Affine {
    pub fn d_out(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[1]
    }
}

/// The denoiser MLP: hidden affine blocks with tanh between, then a linear
/// output block back to image shape.
#[derive(Clone, Debug)]
pub struct DenoiserParams {
    pub config: ModelConfig,
    pub layers: Vec<Affine>,
}

impl DenoiserParams {
    /// Fresh network with `w ~ 𝒩(0, 1/d_in)` per layer and zero biases.
    pub fn init(config: ModelConfig, rng: &mut ChaCha12Rng) -> Self {
        assert!(config.hidden_layers >= 1, "need at least one hidden layer");
        assert!(config.timesteps >= 2);
        let mut widths = vec![config.input_width()];
        widths.extend(std::iter::repeat_n(config.hidden_width, config.hidden_layers));
        widths.push(config.image_pixels());

        let layers = widths
            .windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                let dist = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).unwrap();
                let weights = (0..d_out * d_in).map(|_| rng.sample(dist)).collect();
                Affine {
                    w: Tensor::matrix(d_out, d_in, weights),
                    b: Tensor::zeros(vec![d_out]),
                }
            })
            .collect();
        DenoiserParams { config, layers }
    }

    /// Sinusoidal features of a timestep: for k < pairs, frequencies
    /// ω_k = π·2^k applied to τ = t/(T−1) ∈ [0, 1].
    pub fn time_features(&self, t: usize) -> Vec<f64> {
        assert!(t < self.config.timesteps, "t={t} out of range");
        let tau = t as f64 / (self.config.timesteps - 1) as f64;
        let mut out = Vec::with_capacity(self.config.time_feature_width());
        for k in 0..self.config.time_pairs {
            let omega = std::f64::consts::PI * (1u64 << k) as f64;
            out.push((omega * tau).sin());
            out.push((omega * tau).cos());
        }
        out
    }

    /// Indices of the layers low-rank adapters attach to: every hidden
    /// affine; the output projection stays frozen.
    pub fn adapted_layers(&self) -> Vec<usize> {
        (0..self.layers.len() - 1).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_chain_from_input_to_image() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let p = DenoiserParams::init(cfg.clone(), &mut rng);
        assert_eq!(p.layers.len(), cfg.hidden_layers + 1);
        assert_eq!(p.layers[0].d_in(), 256 + 16 + 16);
        assert_eq!(p.layers.last().unwrap().d_out(), 256);
        for pair in p.layers.windows(2) {
            assert_eq!(pair[0].d_out(), pair[1].d_in());
        }
    }

    #[test]
    fn time_features_span_unit_circle_points() {
        let p = DenoiserParams::init(ModelConfig::default(), &mut ChaCha12Rng::seed_from_u64(2));
        let f0 = p.time_features(0);
        assert_eq!(f0.len(), 16);
        // τ=0: every pair is (sin 0, cos 0) = (0, 1).
        for pair in f0.chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
        // Distinct timesteps must be distinguishable.
        let (a, b) = (p.time_features(1), p.time_features(2));
        assert_ne!(a, b);
        for f in p.time_features(p.config.timesteps - 1) {
            assert!(f.abs() <= 1.0);
        }
    }

    #[test]
    fn same_seed_same_init() {
        let a = DenoiserParams::init(ModelConfig::default(), &mut ChaCha12Rng::seed_from_u64(3));
        let b = DenoiserParams::init(ModelConfig::default(), &mut ChaCha12Rng::seed_from_u64(3));
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.w.data(), lb.w.data());
        }
    }
}
