//! The conditional denoiser G(x_t, t, y; θ): raw and taped forward passes.
//!
//! Both passes walk the identical op sequence over the identical shared
//! kernels, so a raw forward and a taped forward of the same inputs agree
//! bit for bit. Raw is what samplers and guidance probes call (no gradient
//! bookkeeping); taped is what training losses differentiate through.

use super::embed::EmbeddingTable;
use super::lora::LoraAdapter;
use super::params::DenoiserParams;
use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::{self, Tensor};

/// Which parameter group a training step may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Everything trains: base layers and the embedding table.
    Pretrain,
    /// Only adapter factors and placeholder rows train; base θ is frozen.
    Personalize,
}

/// Identity of a trainable leaf, for mapping gradients back to storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafTarget {
    LayerW(usize),
    LayerB(usize),
    /// Index into the adapter's pair list, not the layer list.
    LoraA(usize),
    LoraB(usize),
    Table,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainableLeaf {
    pub id: NodeId,
    pub target: LeafTarget,
}

/// Untaped forward pass. `lora`, when present, adds `scale·B·(A·input)` to
/// each adapted layer's pre-activation.
pub fn forward_raw(
    params: &DenoiserParams,
    lora: Option<&LoraAdapter>,
    x_t: &[f64],
    t: usize,
    cond: &[f64],
) -> Vec<f64> {
    let cfg = &params.config;
    assert_eq!(x_t.len(), cfg.image_pixels(), "image size mismatch");
    assert_eq!(cond.len(), cfg.cond_dim, "condition width mismatch");

    let mut h = Vec::with_capacity(cfg.input_width());
    h.extend_from_slice(x_t);
    h.extend_from_slice(&params.time_features(t));
    h.extend_from_slice(cond);

    let last = params.layers.len() - 1;
    for (li, layer) in params.layers.iter().enumerate() {
        let (d_out, d_in) = (layer.d_out(), layer.d_in());
        let mut base = vec![0.0; d_out];
        tensor::matvec_into(&mut base, layer.w.data(), &h, d_out, d_in);
        let mut pre = vec![0.0; d_out];
        tensor::add_into(&mut pre, &base, layer.b.data());
        if let Some(adapter) = lora {
            if let Some(pi) = adapter.targets.iter().position(|&tgt| tgt == li) {
                let pair = &adapter.pairs[pi];
                let r = adapter.rank;
                let mut av = vec![0.0; r];
                tensor::matvec_into(&mut av, pair.a.data(), &h, r, d_in);
                let mut bav = vec![0.0; d_out];
                tensor::matvec_into(&mut bav, pair.b.data(), &av, d_out, r);
                let mut scaled = vec![0.0; d_out];
                tensor::scale_into(&mut scaled, &bav, adapter.scale);
                let mut summed = vec![0.0; d_out];
                tensor::add_into(&mut summed, &pre, &scaled);
                pre = summed;
            }
        }
        if li < last {
            let mut act = vec![0.0; d_out];
            tensor::tanh_into(&mut act, &pre);
            h = act;
        } else {
            h = pre;
        }
    }
    h
}

/// Taped forward pass over pre-bound parameter nodes. Walks the same op
/// sequence as [`forward_raw`]; see module docs.
///
/// `wb` pairs one (weight, bias) node per layer; `lora` supplies
/// (per-pair (A, B) nodes, scale, target layer indices).
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &DenoiserParams,
    wb: &[(NodeId, NodeId)],
    lora: Option<(&[(NodeId, NodeId)], f64, &[usize])>,
    x: NodeId,
    t: usize,
    cond: NodeId,
) -> NodeId {
    let cfg = &params.config;
    assert_eq!(wb.len(), params.layers.len());
    assert_eq!(tape.value(x).numel(), cfg.image_pixels(), "image size mismatch");
    assert_eq!(tape.value(cond).numel(), cfg.cond_dim, "condition width mismatch");

    let tf = tape.leaf(Tensor::vector(params.time_features(t)));
    let mut h = tape.concat(&[x, tf, cond]);

    let last = params.layers.len() - 1;
    for (li, &(w, b)) in wb.iter().enumerate() {
        let base = tape.matvec(w, h);
        let mut pre = tape.add(base, b);
        if let Some((pairs, scale, targets)) = lora {
            if let Some(pi) = targets.iter().position(|&tgt| tgt == li) {
                let (a_node, b_node) = pairs[pi];
                let av = tape.matvec(a_node, h);
                let bav = tape.matvec(b_node, av);
                let scaled = tape.scale(bav, scale);
                pre = tape.add(pre, scaled);
            }
        }
        h = if li < last { tape.tanh(pre) } else { pre };
    }
    h
}

/// The denoiser's parameters bound onto a tape for one training step.
/// Binding decides which tensors are trainable; [`BoundDenoiser::trainable_set`]
/// reports exactly those, in a fixed documented order.
pub struct BoundDenoiser {
    pub wb: Vec<(NodeId, NodeId)>,
    /// (A, B) node per adapter pair, with the adapter's scale and targets.
    pub lora: Option<(Vec<(NodeId, NodeId)>, f64, Vec<usize>)>,
    pub table: NodeId,
    mode: Mode,
}

pub fn bind(
    tape: &mut Tape,
    params: &DenoiserParams,
    lora: Option<&LoraAdapter>,
    table: &EmbeddingTable,
    mode: Mode,
) -> BoundDenoiser {
    let wb = params
        .layers
        .iter()
        .map(|layer| match mode {
            Mode::Pretrain => (tape.param(layer.w.clone()), tape.param(layer.b.clone())),
            Mode::Personalize => (tape.leaf(layer.w.clone()), tape.leaf(layer.b.clone())),
        })
        .collect();
    let lora_nodes = lora.map(|adapter| {
        assert_eq!(mode, Mode::Personalize, "adapters only train during personalization");
        let pairs = adapter
            .pairs
            .iter()
            .map(|p| (tape.param(p.a.clone()), tape.param(p.b.clone())))
            .collect();
        (pairs, adapter.scale, adapter.targets.clone())
    });
    // The table is a single tensor; in personalize mode the per-row trainable
    // mask is enforced by the optimizer, which zeroes frozen-row gradients.
    let table_node = tape.param(table.rows().clone());
    BoundDenoiser { wb, lora: lora_nodes, table: table_node, mode }
}

impl BoundDenoiser {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Forward through the bound nodes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &DenoiserParams,
        x: NodeId,
        t: usize,
        cond: NodeId,
    ) -> NodeId {
        let lora = self
            .lora
            .as_ref()
            .map(|(pairs, scale, targets)| (pairs.as_slice(), *scale, targets.as_slice()));
        forward_on_tape(tape, params, &self.wb, lora, x, t, cond)
    }

    /// The leaves a step of this mode is allowed to move, in update order:
    /// layers (w, b interleaved), then adapter pairs (A, B), then the table.
    pub fn trainable_set(&self) -> Vec<TrainableLeaf> {
        let mut out = Vec::new();
        if self.mode == Mode::Pretrain {
            for (li, &(w, b)) in self.wb.iter().enumerate() {
                out.push(TrainableLeaf { id: w, target: LeafTarget::LayerW(li) });
                out.push(TrainableLeaf { id: b, target: LeafTarget::LayerB(li) });
            }
        }
        if let Some((pairs, _, _)) = &self.lora {
            for (pi, &(a, b)) in pairs.iter().enumerate() {
                out.push(TrainableLeaf { id: a, target: LeafTarget::LoraA(pi) });
                out.push(TrainableLeaf { id: b, target: LeafTarget::LoraB(pi) });
            }
        }
        out.push(TrainableLeaf { id: self.table, target: LeafTarget::Table });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::embed::{Prompt, PromptRole};
    use crate::denoiser::lora::init_lora;
    use crate::denoiser::params::ModelConfig;
    use crate::diffcore::gradcheck::{check_grad, FD_STEP, FD_TOLERANCE};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_side: 4,
            hidden_width: 12,
            hidden_layers: 2,
            time_pairs: 2,
            cond_dim: 6,
            timesteps: 10,
        }
    }

    fn randn(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn fresh_adapter_changes_nothing() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let params = DenoiserParams::init(tiny_config(), &mut rng);
        let lora = init_lora(&params, 3, 1.0, &mut rng);
        for _ in 0..1000 {
            let x = randn(&mut rng, 16);
            let cond = randn(&mut rng, 6);
            let t = rng.random_range(0..10);
            let base = forward_raw(&params, None, &x, t, &cond);
            let adapted = forward_raw(&params, Some(&lora), &x, t, &cond);
            assert_eq!(base, adapted, "B=0 must leave the forward untouched");
        }
    }

    #[test]
    fn taped_forward_matches_raw_bitwise() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let params = DenoiserParams::init(tiny_config(), &mut rng);
        let mut lora = init_lora(&params, 3, 0.7, &mut rng);
        // Move B off zero so the adapter path actually contributes.
        for pair in &mut lora.pairs {
            let n = pair.b.numel();
            pair.b = Tensor::new(pair.b.shape().to_vec(), randn(&mut rng, n));
        }
        let table = EmbeddingTable::with_attributes(&["photo", "square"], 6, &mut rng);
        let prompt = Prompt::parse("photo square", PromptRole::Clean).unwrap();
        let cond = table.encode(&prompt).unwrap();

        for t in [0, 3, 9] {
            let x = randn(&mut rng, 16);
            let raw = forward_raw(&params, Some(&lora), &x, t, &cond);

            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params, Some(&lora), &table, Mode::Personalize);
            let cond_node = table.encode_on_tape(&mut tape, bound.table, &prompt).unwrap();
            let x_node = tape.leaf(Tensor::vector(x.clone()));
            let out = bound.forward(&mut tape, &params, x_node, t, cond_node);
            assert_eq!(tape.value(out).data(), raw.as_slice());
        }
    }

    #[test]
    fn hand_evaluated_tiny_network() {
        // One hidden layer wired as a pixel selector, output layer 2·I + 0.5:
        // G(x)[i] = 2·tanh(x[i]) + 0.5, independent of t and cond.
        let cfg = ModelConfig {
            image_side: 2,
            hidden_width: 4,
            hidden_layers: 1,
            time_pairs: 1,
            cond_dim: 2,
            timesteps: 4,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut params = DenoiserParams::init(cfg, &mut rng);
        // Hidden: 4×8, rows pick pixels 0..3.
        let mut w0 = vec![0.0; 4 * 8];
        for i in 0..4 {
            w0[i * 8 + i] = 1.0;
        }
        params.layers[0].w = Tensor::matrix(4, 8, w0);
        params.layers[0].b = Tensor::zeros(vec![4]);
        let mut w1 = vec![0.0; 4 * 4];
        for i in 0..4 {
            w1[i * 4 + i] = 2.0;
        }
        params.layers[1].w = Tensor::matrix(4, 4, w1);
        params.layers[1].b = Tensor::full(vec![4], 0.5);

        let x = [0.25, -0.5, 1.0, 0.0];
        let out = forward_raw(&params, None, &x, 2, &[9.0, -9.0]);
        for (o, xi) in out.iter().zip(&x) {
            assert!((o - (2.0 * xi.tanh() + 0.5)).abs() < 1e-15);
        }
    }

    #[test]
    fn adapter_and_placeholder_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let params = DenoiserParams::init(tiny_config(), &mut rng);
        let mut table = EmbeddingTable::with_attributes(&["photo", "square"], 6, &mut rng);
        table.freeze_all();
        table.add_placeholder("[V]", "square").unwrap();
        let prompt = Prompt::parse("photo [V]", PromptRole::Personalization).unwrap();
        let row_ids = table.rows_of(&prompt).unwrap();
        let lora = init_lora(&params, 2, 0.9, &mut rng);
        let x = Tensor::vector(randn(&mut rng, 16));
        let target = Tensor::vector(randn(&mut rng, 16));

        // Probe tensors: both adapter pairs plus the table; base θ is a
        // frozen constant captured by the closure.
        let probes = vec![
            lora.pairs[0].a.clone(),
            lora.pairs[0].b.clone(),
            lora.pairs[1].a.clone(),
            lora.pairs[1].b.clone(),
            table.rows().clone(),
        ];
        let report = check_grad(
            |tape, ids| {
                let wb: Vec<(NodeId, NodeId)> = params
                    .layers
                    .iter()
                    .map(|l| (tape.leaf(l.w.clone()), tape.leaf(l.b.clone())))
                    .collect();
                let pairs = [(ids[0], ids[1]), (ids[2], ids[3])];
                let cond = tape.rows_mean(ids[4], &row_ids);
                let x_node = tape.leaf(x.clone());
                let out = forward_on_tape(
                    tape,
                    &params,
                    &wb,
                    Some((&pairs, lora.scale, &lora.targets)),
                    x_node,
                    5,
                    cond,
                );
                let tgt = tape.leaf(target.clone());
                tape.mse(out, tgt)
            },
            &probes,
            FD_TOLERANCE,
            FD_STEP,
        )
        .unwrap();
        assert!(report.pass, "max_rel_err = {}", report.max_rel_err);
    }

    #[test]
    fn trainable_set_respects_mode() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let params = DenoiserParams::init(tiny_config(), &mut rng);
        let table = EmbeddingTable::with_attributes(&["photo"], 6, &mut rng);
        let lora = init_lora(&params, 2, 1.0, &mut rng);

        let mut tape = Tape::new();
        let pre = bind(&mut tape, &params, None, &table, Mode::Pretrain);
        let set = pre.trainable_set();
        // 3 layers × (w, b) + table.
        assert_eq!(set.len(), 7);
        assert!(set.iter().any(|l| l.target == LeafTarget::LayerW(2)));
        assert!(!set.iter().any(|l| matches!(l.target, LeafTarget::LoraA(_))));

        let mut tape = Tape::new();
        let per = bind(&mut tape, &params, Some(&lora), &table, Mode::Personalize);
        let set = per.trainable_set();
        // 2 pairs × (A, B) + table; no base layers.
        assert_eq!(set.len(), 5);
        assert!(!set.iter().any(|l| matches!(l.target, LeafTarget::LayerW(_))));
        assert!(set.iter().any(|l| l.target == LeafTarget::LoraB(1)));
        assert!(set.iter().any(|l| l.target == LeafTarget::Table));
    }

    #[test]
    fn frozen_base_rejects_gradient_requests_in_personalize_mode() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let params = DenoiserParams::init(tiny_config(), &mut rng);
        let table = EmbeddingTable::with_attributes(&["photo"], 6, &mut rng);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, None, &table, Mode::Personalize);
        let cond = tape.leaf(Tensor::vector(vec![0.0; 6]));
        let x = tape.leaf(Tensor::zeros(vec![16]));
        let out = bound.forward(&mut tape, &params, x, 0, cond);
        let root = tape.sum(out);
        // Asking for base-layer gradients must fail loudly, not silently zero.
        assert!(tape.grad(root, &[bound.wb[0].0]).is_err());
    }
}
