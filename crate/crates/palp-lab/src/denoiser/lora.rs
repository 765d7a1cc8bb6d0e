//! Low-rank adapters on the denoiser's hidden affine layers.

use super::params::DenoiserParams;
use crate::diffcore::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::Normal;

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_SCALE: f64 = 1.0;

/// One adapted layer: delta = scale·B·A with `a: [r, d_in]`, `b: [d_out, r]`.
#[derive(Clone, Debug)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

/// Adapter factors for every adapted layer, in [`DenoiserParams::adapted_layers`]
/// order.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub pairs: Vec<LoraPair>,
    pub rank: usize,
    pub scale: f64,
    /// Layer indices the pairs attach to.
    pub targets: Vec<usize>,
}

/// Fresh adapter with `A ~ 𝒩(0, 1/d_in)` and `B = 0`, so the effective
/// weight delta is exactly zero until training moves B.
pub fn init_lora(
    params: &DenoiserParams,
    rank: usize,
    scale: f64,
    rng: &mut ChaCha12Rng,
) -> LoraAdapter {
    assert!(rank >= 1, "rank must be positive");
    let targets = params.adapted_layers();
    let pairs = targets
        .iter()
        .map(|&li| {
            let layer = &params.layers[li];
            let (d_out, d_in) = (layer.d_out(), layer.d_in());
            assert!(
                rank <= d_in.min(d_out),
                "rank {rank} exceeds layer {li} dims {d_out}x{d_in}"
            );
            let dist = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).unwrap();
            LoraPair {
                a: Tensor::matrix(rank, d_in, (0..rank * d_in).map(|_| rng.sample(dist)).collect()),
                b: Tensor::zeros(vec![d_out, rank]),
            }
        })
        .collect();
    LoraAdapter { pairs, rank, scale, targets }
}
