//! Adam optimizer over a fixed-order list of parameter tensors.
//!
//! Frozen embedding rows are handled by masking: the trainer zeroes the
//! gradient rows before calling [`Adam::step`], the moments for those
//! elements then stay exactly 0.0, and `0 / (√0 + ε)` makes the update
//! exactly zero — frozen rows never move, bit for bit.

use crate::diffcore::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Moments start at zero, shaped like the given parameter list.
    pub fn new(lr: f64, params: &[&Tensor]) -> Adam {
        assert!(lr > 0.0, "learning rate must be positive");
        Adam {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step_count: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// One update. `params` and `grads` must match the construction order.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed shape");
        assert_eq!(grads.len(), self.m.len(), "gradient list changed shape");
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_roughly_lr_in_grad_direction() {
        // With bias correction, the very first Adam step is ≈ lr·sign(g).
        let mut p = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]);
        let g = Tensor::new(vec![3], vec![0.5, -0.25, 4.0]);
        let mut opt = Adam::new(0.01, &[&p]);
        opt.step(&mut [&mut p], &[g]);
        for (i, sign) in [1.0, -1.0, 1.0].into_iter().enumerate() {
            let moved = [1.0, 2.0, 3.0][i] - p.data()[i];
            assert!((moved - sign * 0.01).abs() < 1e-6, "component {i} moved {moved}");
        }
    }

    #[test]
    fn zero_gradient_elements_never_move() {
        let mut p = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]);
        let before = p.clone();
        let mut opt = Adam::new(2e-3, &[&p]);
        for k in 0..25 {
            let g = Tensor::new(vec![4], vec![0.0, 0.1 * (k as f64 + 1.0), 0.0, -0.3]);
            opt.step(&mut [&mut p], &[g]);
        }
        assert_eq!(p.data()[0], before.data()[0]);
        assert_eq!(p.data()[2], before.data()[2]);
        assert_ne!(p.data()[1], before.data()[1]);
        assert_ne!(p.data()[3], before.data()[3]);
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize f(x) = Σ (x − c)² — Adam should converge near c.
        let c = [3.0, -1.5];
        let mut x = Tensor::new(vec![2], vec![0.0, 0.0]);
        let mut opt = Adam::new(0.05, &[&x]);
        for _ in 0..2000 {
            let g = Tensor::new(
                vec![2],
                x.data().iter().zip(&c).map(|(xi, ci)| 2.0 * (xi - ci)).collect(),
            );
            opt.step(&mut [&mut x], &[g]);
        }
        for (xi, ci) in x.data().iter().zip(&c) {
            assert!((xi - ci).abs() < 1e-2, "x = {:?}", x.data());
        }
    }
}
