//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::nn::mlp::{GradBuf, Mlp};

/// Compare `analytic` against central finite differences of `loss_fn` over
/// every parameter of `params`, returning
/// `max_k |analytic_k − fd_k| / max(1, |fd_k|)`.
///
/// `loss_fn` must be deterministic; `h` must lie in `[1e-7, 1e-3]`.
pub fn grad_check<F>(loss_fn: F, params: &Mlp, analytic: &GradBuf, h: f64) -> Result<f64>
where
    F: Fn(&Mlp) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::contract(format!("step size {h} outside [1e-7, 1e-3]")));
    }
    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    for k in 0..params.param_count() {
        let orig = params.get_param(k);
        work.set_param(k, orig + h);
        let plus = loss_fn(&work)?;
        work.set_param(k, orig - h);
        let minus = loss_fn(&work)?;
        work.set_param(k, orig);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!("non-finite loss at parameter {k}")));
        }
        let fd = (plus - minus) / (2.0 * h);
        let a = Mlp::grad_param(analytic, k);
        let rel = (a - fd).abs() / fd.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;
    use crate::rng::rng_from;

    fn quadratic_loss(net: &Mlp) -> Result<f64> {
        let mut s = 0.0;
        for k in 0..net.param_count() {
            let p = net.get_param(k);
            s += 0.5 * p * p;
        }
        Ok(s)
    }

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        let mut rng = rng_from(2);
        let net = Mlp::relu_net(&[3, 4, 2], &mut rng).unwrap();
        // analytic gradient of 0.5‖θ‖² is θ itself
        let mut analytic = net.grad_buf();
        for layer in 0..net.n_layers() {
            analytic.weights[layer] = net.weight(layer).clone();
            analytic.biases[layer] = net.bias(layer).clone();
        }
        let err = grad_check(quadratic_loss, &net, &analytic, 1e-5).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn constant_loss_gives_zero_error() {
        let mut rng = rng_from(3);
        let net = Mlp::relu_net(&[2, 2], &mut rng).unwrap();
        let analytic = net.grad_buf();
        let err = grad_check(|_| Ok(1.25), &net, &analytic, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn random_net_backward_matches_finite_differences() {
        // sum-of-outputs loss through a 3-layer tanh net
        let mut rng = rng_from(7);
        let net = Mlp::tanh_net(&[3, 5, 4, 2], &mut rng).unwrap();
        let x = Mat::from_fn(4, 3, |i, j| ((i * 3 + j) as f64).sin());
        let loss = |p: &Mlp| -> Result<f64> { Ok(p.forward(&x)?.data().iter().sum()) };
        let (y, cache) = net.forward_cached(&x).unwrap();
        let mut analytic = net.grad_buf();
        let gy = Mat::from_fn(y.rows(), y.cols(), |_, _| 1.0);
        net.backward(&cache, &gy, &mut analytic).unwrap();
        let err = grad_check(loss, &net, &analytic, 1e-5).unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn rejects_out_of_range_step() {
        let mut rng = rng_from(4);
        let net = Mlp::relu_net(&[2, 2], &mut rng).unwrap();
        let analytic = net.grad_buf();
        assert!(grad_check(quadratic_loss, &net, &analytic, 1e-2).is_err());
    }
}
