//! Bias-corrected adaptive-moment optimizer.

use crate::error::{Error, Result};
use crate::nn::mlp::{GradBuf, Mlp};

#[derive(Clone, Debug)]
pub struct AdamState {
    m: GradBuf,
    v: GradBuf,
    step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

fn update_slice(
    p: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    g: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    for k in 0..p.len() {
        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
        let m_hat = m[k] / bc1;
        let v_hat = v[k] / bc2;
        p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

impl AdamState {
    pub fn new(params: &Mlp, lr: f64) -> Self {
        AdamState {
            m: params.grad_buf(),
            v: params.grad_buf(),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &GradBuf {
        &self.m
    }

    /// One update in place; increments the step counter.
    pub fn step(&mut self, params: &mut Mlp, grads: &GradBuf) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::numeric("non-finite gradient entries in adam step"));
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for layer in 0..params.n_layers() {
            update_slice(
                params.weight_mut(layer).data_mut(),
                self.m.weights[layer].data_mut(),
                self.v.weights[layer].data_mut(),
                grads.weights[layer].data(),
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                bc1,
                bc2,
            );
            update_slice(
                params.bias_mut(layer).data_mut(),
                self.m.biases[layer].data_mut(),
                self.v.biases[layer].data_mut(),
                grads.biases[layer].data(),
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                bc1,
                bc2,
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;
    use crate::nn::mlp::Activation;
    use crate::rng::rng_from;

    fn scalar_net(w: f64) -> Mlp {
        let mut rng = rng_from(0);
        let mut net = Mlp::new(&[1, 1], &[Activation::Identity], &mut rng).unwrap();
        net.weight_mut(0).data_mut()[0] = w;
        net
    }

    fn scalar_grads(net: &Mlp, gw: f64) -> GradBuf {
        let mut g = net.grad_buf();
        g.weights[0].data_mut()[0] = gw;
        g
    }

    #[test]
    fn first_step_is_roughly_signed_lr() {
        for &g in &[3.0, -0.4, 1e-3] {
            let mut net = scalar_net(1.0);
            let mut state = AdamState::new(&net, 0.01);
            let grads = scalar_grads(&net, g);
            state.step(&mut net, &grads).unwrap();
            let moved = net.weight(0).data()[0] - 1.0;
            let expected = -0.01 * g.signum();
            assert!((moved - expected).abs() < 1e-5, "g={g} moved={moved}");
        }
        // bias untouched when its gradient is zero
        let mut net = scalar_net(1.0);
        let mut state = AdamState::new(&net, 0.01);
        let grads = scalar_grads(&net, 1.0);
        state.step(&mut net, &grads).unwrap();
        assert_eq!(net.bias(0).data()[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut net = scalar_net(2.5);
        let mut state = AdamState::new(&net, 0.1);
        let grads = net.grad_buf();
        state.step(&mut net, &grads).unwrap();
        assert_eq!(net.weight(0).data()[0], 2.5);
        assert_eq!(state.step_count(), 1);
        assert_eq!(state.first_moment().weights[0].data()[0], 0.0);
    }

    #[test]
    fn zero_gradient_decays_existing_moments() {
        let mut net = scalar_net(1.0);
        let mut state = AdamState::new(&net, 0.0);
        let g1 = scalar_grads(&net, 1.0);
        let zero = net.grad_buf();
        state.step(&mut net, &g1).unwrap();
        let m1 = state.first_moment().weights[0].data()[0];
        state.step(&mut net, &zero).unwrap();
        let m2 = state.first_moment().weights[0].data()[0];
        assert!((m2 - 0.9 * m1).abs() < 1e-15);
    }

    #[test]
    fn lr_zero_is_identity_on_params() {
        let mut rng = rng_from(11);
        let mut net = Mlp::relu_net(&[3, 5, 2], &mut rng).unwrap();
        let before = net.clone();
        let mut state = AdamState::new(&net, 0.0);
        let mut grads = net.grad_buf();
        for w in &mut grads.weights {
            *w = Mat::from_fn(w.rows(), w.cols(), |i, j| (i + j) as f64 - 1.0);
        }
        state.step(&mut net, &grads).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(w) = (w - 3)^2, grad = 2 (w - 3), lr = 0.1, 100 steps
        let mut net = scalar_net(0.0);
        let mut state = AdamState::new(&net, 0.1);
        for _ in 0..100 {
            let w = net.weight(0).data()[0];
            let grads = scalar_grads(&net, 2.0 * (w - 3.0));
            state.step(&mut net, &grads).unwrap();
        }
        let w = net.weight(0).data()[0];
        assert!((w - 3.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn non_finite_gradients_error() {
        let mut net = scalar_net(1.0);
        let mut state = AdamState::new(&net, 0.1);
        let grads = scalar_grads(&net, f64::NAN);
        assert!(state.step(&mut net, &grads).is_err());
    }
}
