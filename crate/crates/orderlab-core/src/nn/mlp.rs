//! Small dense multilayer perceptrons with hand-written backward passes.
//!
//! Forward keeps an explicit activation record; backward consumes it and
//! accumulates parameter gradients into a [`GradBuf`]. There is no tape:
//! every composite loss in this crate derives its own input gradients and
//! feeds them through [`Mlp::backward`].

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed in terms of the pre-activation `z`.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Parameters of a feed-forward network: `weights[i]` has shape
/// `(dims[i], dims[i+1])`, `biases[i]` has shape `(1, dims[i+1])`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    weights: Vec<Mat>,
    biases: Vec<Mat>,
    activations: Vec<Activation>,
}

/// Activation record of one forward pass; inputs and pre-activations per layer.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Mat>,
    preacts: Vec<Mat>,
}

/// Parameter gradients, shape-congruent with an [`Mlp`].
#[derive(Clone, Debug)]
pub struct GradBuf {
    pub weights: Vec<Mat>,
    pub biases: Vec<Mat>,
}

impl GradBuf {
    pub fn zero(&mut self) {
        for w in &mut self.weights {
            w.fill(0.0);
        }
        for b in &mut self.biases {
            b.fill(0.0);
        }
    }

    pub fn add_scaled(&mut self, other: &GradBuf, factor: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_scaled(b, factor);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.add_scaled(b, factor);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.scale(factor);
        }
        for b in &mut self.biases {
            b.scale(factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(Mat::all_finite) && self.biases.iter().all(Mat::all_finite)
    }
}

impl Mlp {
    /// Seeded uniform(-a, a) init with a = sqrt(6 / (fan_in + fan_out)).
    pub fn new(dims: &[usize], activations: &[Activation], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::contract("mlp needs at least one layer"));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::shape(format!(
                "{} layers but {} activations",
                dims.len() - 1,
                activations.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Mat::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..a)));
            biases.push(Mat::zeros(1, fan_out));
        }
        Ok(Mlp { dims: dims.to_vec(), weights, biases, activations: activations.to_vec() })
    }

    /// Relu hidden layers, identity output.
    pub fn relu_net(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut acts = vec![Activation::Relu; dims.len() - 1];
        *acts.last_mut().unwrap() = Activation::Identity;
        Mlp::new(dims, &acts, rng)
    }

    /// Tanh hidden layers, identity output.
    pub fn tanh_net(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut acts = vec![Activation::Tanh; dims.len() - 1];
        *acts.last_mut().unwrap() = Activation::Identity;
        Mlp::new(dims, &acts, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, layer: usize) -> &Mat {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Mat {
        &self.biases[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Mat {
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Mat {
        &mut self.biases[layer]
    }

    pub fn activation(&self, layer: usize) -> Activation {
        self.activations[layer]
    }

    /// A zeroed gradient buffer congruent with these parameters.
    pub fn grad_buf(&self) -> GradBuf {
        GradBuf {
            weights: self.weights.iter().map(|w| Mat::zeros(w.rows(), w.cols())).collect(),
            biases: self.biases.iter().map(|b| Mat::zeros(b.rows(), b.cols())).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum::<usize>()
            + self.biases.iter().map(|b| b.cols()).sum::<usize>()
    }

    /// Flat parameter view: weights of layer 0 row-major, then its bias, then
    /// layer 1, ... Used by the gradient checker and the optimizer tests.
    pub fn get_param(&self, mut k: usize) -> f64 {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let nw = w.rows() * w.cols();
            if k < nw {
                return w.data()[k];
            }
            k -= nw;
            if k < b.cols() {
                return b.data()[k];
            }
            k -= b.cols();
        }
        panic!("param index out of range");
    }

    pub fn set_param(&mut self, mut k: usize, value: f64) {
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let nw = w.rows() * w.cols();
            if k < nw {
                w.data_mut()[k] = value;
                return;
            }
            k -= nw;
            if k < b.cols() {
                b.data_mut()[k] = value;
                return;
            }
            k -= b.cols();
        }
        panic!("param index out of range");
    }

    /// Same flat ordering over a gradient buffer.
    pub fn grad_param(grads: &GradBuf, mut k: usize) -> f64 {
        for (w, b) in grads.weights.iter().zip(&grads.biases) {
            let nw = w.rows() * w.cols();
            if k < nw {
                return w.data()[k];
            }
            k -= nw;
            if k < b.cols() {
                return b.data()[k];
            }
            k -= b.cols();
        }
        panic!("param index out of range");
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Mat) -> Result<(Mat, ForwardCache)> {
        if x.cols() != self.dims[0] {
            return Err(Error::shape(format!(
                "input has {} cols, network expects {}",
                x.cols(),
                self.dims[0]
            )));
        }
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut preacts = Vec::with_capacity(self.weights.len());
        let mut cur = x.clone();
        for (layer, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = cur.matmul(w);
            z.add_row_broadcast(b.row(0));
            inputs.push(cur);
            let act = self.activations[layer];
            let mut y = z.clone();
            for v in y.data_mut() {
                *v = act.apply(*v);
            }
            preacts.push(z);
            cur = y;
        }
        Ok((cur, ForwardCache { inputs, preacts }))
    }

    /// Backpropagate `grad_y` through the recorded pass, accumulating
    /// parameter gradients into `grads` (+=) and returning `grad_x`.
    pub fn backward(&self, cache: &ForwardCache, grad_y: &Mat, grads: &mut GradBuf) -> Result<Mat> {
        if cache.inputs.len() != self.weights.len() {
            return Err(Error::contract("cache does not match network depth"));
        }
        let batch = cache.inputs[0].rows();
        if grad_y.rows() != batch || grad_y.cols() != self.output_dim() {
            return Err(Error::contract(format!(
                "grad_y is {}x{}, expected {}x{}",
                grad_y.rows(),
                grad_y.cols(),
                batch,
                self.output_dim()
            )));
        }
        let mut grad = grad_y.clone();
        for layer in (0..self.weights.len()).rev() {
            let z = &cache.preacts[layer];
            if z.rows() != batch || z.cols() != self.dims[layer + 1] {
                return Err(Error::contract("stale cache: pre-activation shape mismatch"));
            }
            if cache.inputs[layer].rows() != batch || cache.inputs[layer].cols() != self.dims[layer]
            {
                return Err(Error::contract("stale cache: layer input shape mismatch"));
            }
            let act = self.activations[layer];
            // dZ = dY ⊙ act'(Z)
            let mut dz = grad;
            for (g, &zv) in dz.data_mut().iter_mut().zip(z.data()) {
                *g *= act.derivative(zv);
            }
            // dW += Xᵀ dZ ; db += colsum(dZ) ; dX = dZ Wᵀ
            cache.inputs[layer].matmul_tn_into(&dz, &mut grads.weights[layer]);
            for r in 0..dz.rows() {
                for (bg, &g) in grads.biases[layer].row_mut(0).iter_mut().zip(dz.row(r)) {
                    *bg += g;
                }
            }
            grad = dz.matmul_nt(&self.weights[layer]);
        }
        Ok(grad)
    }
}
