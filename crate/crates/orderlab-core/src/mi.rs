//! Sample-based variational mutual-information bounds.
//!
//! Two estimators over batches of (embedding, nearest-prototype) pairs:
//!
//! - an upper bound using a learned Gaussian conditional `Z_φ(p|e)` with a
//!   fixed unit variance and a trained mean network (the minimized side,
//!   applied to OOD pairs), and
//! - a lower bound using a learned scalar critic `f(e, p)` with normalizer
//!   `a ≡ 1` (the maximized side, applied to ID pairs).
//!
//! Both are normalized by the batch size so the regularization weight is
//! batch-size independent. Gradients flow into the embeddings and prototypes;
//! estimator parameters are trained separately and held fixed on the
//! embedding path.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::mat::{sq_dist, Mat};
use crate::nn::{AdamState, GradBuf, Mlp};
use crate::ood::OodSplit;
use crate::proto::PrototypeSet;
use crate::rng::{mix, rng_from};

/// Matched rows: `proto` row `i` is the nearest prototype of `emb` row `i`;
/// `proto_index[i]` remembers which prototype row it came from so gradients
/// can be scattered back.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub emb: Mat,
    pub proto: Mat,
    pub proto_index: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.emb.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.emb.rows() == 0
    }

    /// Pair pre-matched rows (used by the Gaussian benchmark and tests).
    pub fn from_matched(emb: Mat, proto: Mat) -> Result<Self> {
        if emb.rows() != proto.rows() {
            return Err(Error::shape("emb and proto need equal row counts"));
        }
        let n = emb.rows();
        Ok(PairBatch { emb, proto, proto_index: (0..n).collect() })
    }
}

/// Pair each embedding row with its nearest prototype (ties to the lowest
/// class index). Empty input gives an empty batch.
pub fn pair_nearest(emb: &Mat, protos: &PrototypeSet) -> Result<PairBatch> {
    if protos.n_classes() == 0 {
        return Err(Error::contract("pair_nearest needs at least one prototype"));
    }
    let mut proto_index = Vec::with_capacity(emb.rows());
    for i in 0..emb.rows() {
        let row = emb.row(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..protos.n_classes() {
            let d = sq_dist(row, protos.protos().row(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        proto_index.push(best);
    }
    let proto = protos.protos().select_rows(&proto_index);
    Ok(PairBatch { emb: emb.clone(), proto, proto_index })
}

// ---------------------------------------------------------------------------
// Upper bound
// ---------------------------------------------------------------------------

/// Learned conditional `Z_φ(p|e) = N(p; mean_net(e), I)`; the log-variance is
/// fixed at zero.
#[derive(Clone, Debug)]
pub struct VariationalDecoder {
    pub mean_net: Mlp,
}

impl VariationalDecoder {
    pub fn new(emb_dim: usize, hidden: usize, rng: &mut crate::rng::Rng) -> Result<Self> {
        Ok(VariationalDecoder { mean_net: Mlp::relu_net(&[emb_dim, hidden, emb_dim], rng)? })
    }
}

pub struct ClubEval {
    pub estimate: f64,
    pub grad_emb: Mat,
    pub grad_proto: Mat,
    pub grad_decoder: GradBuf,
}

/// Contrastive log-ratio upper bound over `L` pairs:
/// `(1/L) Σ_i log Z(pⁱ|eⁱ) − (1/L²) Σ_i Σ_j log Z(pⁱ|eʲ)`.
///
/// With the Gaussian `Z` the double sum is separable, so the evaluation is
/// `O(L·dim)` and exactly equals the full log-density matrix expression.
pub fn club_upper(pairs: &PairBatch, dec: &VariationalDecoder) -> Result<ClubEval> {
    let l = pairs.len();
    if l == 0 {
        return Err(Error::contract("club_upper needs at least one pair"));
    }
    let dim = pairs.emb.cols();
    let (means, cache) = dec.mean_net.forward_cached(&pairs.emb)?;
    if !means.all_finite() {
        return Err(Error::numeric("decoder produced non-finite means"));
    }
    if l == 1 {
        // positive term equals the single negative term: identically zero,
        // with zero gradients everywhere
        return Ok(ClubEval {
            estimate: 0.0,
            grad_emb: Mat::zeros(1, pairs.emb.cols()),
            grad_proto: Mat::zeros(1, dim),
            grad_decoder: dec.mean_net.grad_buf(),
        });
    }
    let lf = l as f64;

    // estimate = −(1/2L) Σ_i ‖p_i − m_i‖² + (1/2L²) Σ_ij ‖p_i − m_j‖²;
    // the Gaussian normalizing constants cancel between the two terms.
    let mut diag = 0.0;
    let mut sum_p2 = 0.0;
    let mut sum_m2 = 0.0;
    let mut sum_p = vec![0.0; dim];
    let mut sum_m = vec![0.0; dim];
    for i in 0..l {
        diag += sq_dist(pairs.proto.row(i), means.row(i));
        for k in 0..dim {
            let p = pairs.proto.at(i, k);
            let m = means.at(i, k);
            sum_p2 += p * p;
            sum_m2 += m * m;
            sum_p[k] += p;
            sum_m[k] += m;
        }
    }
    let cross_dot: f64 = sum_p.iter().zip(&sum_m).map(|(a, b)| a * b).sum();
    let all = lf * sum_p2 + lf * sum_m2 - 2.0 * cross_dot;
    let estimate = -diag / (2.0 * lf) + all / (2.0 * lf * lf);

    // ∂est/∂m_j = (1/L)(p_j − m_j) − (1/L²)(Σ_i p_i − L m_j)
    // ∂est/∂p_i = −(1/L)(p_i − m_i) + (1/L²)(L p_i − Σ_j m_j)
    let mut grad_means = Mat::zeros(l, dim);
    let mut grad_proto = Mat::zeros(l, dim);
    for i in 0..l {
        for k in 0..dim {
            let p = pairs.proto.at(i, k);
            let m = means.at(i, k);
            *grad_means.at_mut(i, k) =
                (p - m) / lf - (sum_p[k] - lf * m) / (lf * lf);
            *grad_proto.at_mut(i, k) =
                -(p - m) / lf + (lf * p - sum_m[k]) / (lf * lf);
        }
    }
    let mut grad_decoder = dec.mean_net.grad_buf();
    let grad_emb = dec.mean_net.backward(&cache, &grad_means, &mut grad_decoder)?;
    Ok(ClubEval { estimate, grad_emb, grad_proto, grad_decoder })
}

/// The same estimator stated directly on a precomputed log-density matrix
/// (entry `(i, j) = log Z(pⁱ|eʲ)`): mean of the diagonal minus the mean of
/// all entries. Reference form for tests and documentation.
pub fn club_estimate_from_logdens(logdens: &Mat) -> f64 {
    let l = logdens.rows();
    let lf = l as f64;
    let diag: f64 = (0..l).map(|i| logdens.at(i, i)).sum();
    let all: f64 = logdens.data().iter().sum();
    diag / lf - all / (lf * lf)
}

/// Ascend the mean conditional log-likelihood `(1/L) Σ_i log Z_φ(pⁱ|eⁱ)` for
/// `steps` optimizer steps.
pub fn train_decoder(
    dec: &mut VariationalDecoder,
    pairs: &PairBatch,
    steps: usize,
    opt: &mut AdamState,
) -> Result<()> {
    if pairs.is_empty() {
        return Ok(());
    }
    let lf = pairs.len() as f64;
    for _ in 0..steps {
        let (means, cache) = dec.mean_net.forward_cached(&pairs.emb)?;
        // ∂/∂m of −(1/2L)Σ‖p−m‖² is (p−m)/L; negate to descend.
        let mut grad_means = Mat::zeros(means.rows(), means.cols());
        for i in 0..means.rows() {
            for k in 0..means.cols() {
                *grad_means.at_mut(i, k) = -(pairs.proto.at(i, k) - means.at(i, k)) / lf;
            }
        }
        let mut grads = dec.mean_net.grad_buf();
        dec.mean_net.backward(&cache, &grad_means, &mut grads)?;
        opt.step(&mut dec.mean_net, &grads)?;
    }
    Ok(())
}

/// Mean conditional log-likelihood of the decoder on `pairs` (diagnostic).
pub fn decoder_loglik(dec: &VariationalDecoder, pairs: &PairBatch) -> Result<f64> {
    let l = pairs.len();
    let dim = pairs.emb.cols() as f64;
    let means = dec.mean_net.forward(&pairs.emb)?;
    let c0 = -0.5 * dim * (2.0 * std::f64::consts::PI).ln();
    let mut s = 0.0;
    for i in 0..l {
        s += c0 - 0.5 * sq_dist(pairs.proto.row(i), means.row(i));
    }
    Ok(s / l as f64)
}

// ---------------------------------------------------------------------------
// Lower bound
// ---------------------------------------------------------------------------

/// Scalar critic over concatenated (embedding, prototype) rows.
#[derive(Clone, Debug)]
pub struct Critic {
    pub net: Mlp,
}

impl Critic {
    /// One hidden layer of `hidden` units (10 in the default configuration).
    pub fn new(emb_dim: usize, hidden: usize, rng: &mut crate::rng::Rng) -> Result<Self> {
        Ok(Critic { net: Mlp::relu_net(&[2 * emb_dim, hidden, 1], rng)? })
    }

    fn concat_input(emb: &Mat, proto: &Mat, pairs: &[(usize, usize)]) -> Mat {
        let dim = emb.cols();
        let mut x = Mat::zeros(pairs.len(), 2 * dim);
        for (r, &(i, j)) in pairs.iter().enumerate() {
            x.row_mut(r)[..dim].copy_from_slice(emb.row(i));
            x.row_mut(r)[dim..].copy_from_slice(proto.row(j));
        }
        x
    }
}

pub struct CriticEval {
    pub estimate: f64,
    pub grad_emb: Mat,
    pub grad_proto: Mat,
    pub grad_critic: GradBuf,
}

/// Variational lower bound with `a ≡ 1` over `L` pairs:
/// `(1/L) Σ_i f(eⁱ,pⁱ) − (1/L) Σ_j [ (1/L) Σ_i e^{f(eⁱ,pʲ)} + log 1 − 1 ]`,
/// i.e. `mean(diag f) − mean(e^f over the full grid) + 1`.
///
/// Builds the `L²` grid explicitly to carry gradients; use
/// [`critic_lower_value`] for large evaluation-only batches.
pub fn critic_lower(pairs: &PairBatch, critic: &Critic) -> Result<CriticEval> {
    let l = pairs.len();
    if l == 0 {
        return Err(Error::contract("critic_lower needs at least one pair"));
    }
    let lf = l as f64;
    let grid: Vec<(usize, usize)> =
        (0..l).flat_map(|i| (0..l).map(move |j| (i, j))).collect();
    let x = Critic::concat_input(&pairs.emb, &pairs.proto, &grid);
    let (f, cache) = critic.net.forward_cached(&x)?;

    let max_f = f.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max_f.is_finite() {
        return Err(Error::numeric("critic produced non-finite scores"));
    }
    let sum_exp_shifted: f64 = f.data().iter().map(|&v| (v - max_f).exp()).sum();
    let grid_term = (max_f + sum_exp_shifted.ln() - 2.0 * lf.ln()).exp();
    if !grid_term.is_finite() {
        return Err(Error::numeric("exp overflow in critic lower bound"));
    }
    let diag: f64 = (0..l).map(|i| f.at(i * l + i, 0)).sum();
    let estimate = diag / lf - grid_term + 1.0;

    // ∂est/∂F_ij = δ_ij/L − e^{F_ij}/L²
    let mut grad_f = Mat::zeros(l * l, 1);
    let scale = (max_f - 2.0 * lf.ln()).exp();
    for (r, &(i, j)) in grid.iter().enumerate() {
        let mut g = -((f.at(r, 0) - max_f).exp()) * scale;
        if i == j {
            g += 1.0 / lf;
        }
        *grad_f.at_mut(r, 0) = g;
    }
    let mut grad_critic = critic.net.grad_buf();
    let grad_x = critic.net.backward(&cache, &grad_f, &mut grad_critic)?;

    let dim = pairs.emb.cols();
    let mut grad_emb = Mat::zeros(l, dim);
    let mut grad_proto = Mat::zeros(l, dim);
    for (r, &(i, j)) in grid.iter().enumerate() {
        for k in 0..dim {
            *grad_emb.at_mut(i, k) += grad_x.at(r, k);
            *grad_proto.at_mut(j, k) += grad_x.at(r, k + dim);
        }
    }
    Ok(CriticEval { estimate, grad_emb, grad_proto, grad_critic })
}

/// Evaluation-only lower bound that streams the `L²` grid without
/// materializing it. For the standard one-hidden-layer critic the first
/// layer splits into an embedding part and a prototype part, so each grid
/// entry costs `O(hidden)`.
pub fn critic_lower_value(pairs: &PairBatch, critic: &Critic) -> Result<f64> {
    let l = pairs.len();
    if l == 0 {
        return Err(Error::contract("critic_lower needs at least one pair"));
    }
    let lf = l as f64;
    let net = &critic.net;
    if net.n_layers() != 2 {
        // generic fallback: chunked grid forward
        return critic_lower_value_generic(pairs, critic);
    }
    let dim = pairs.emb.cols();
    let hidden = net.weight(0).cols();
    let act = net.activation(0);
    // First layer is linear in concat(e, p): split W1 into the rows that
    // multiply e and the rows that multiply p, then H_ij = A_i + B_j.
    let mut a = Mat::zeros(l, hidden);
    let mut b = Mat::zeros(l, hidden);
    for i in 0..l {
        for h in 0..hidden {
            let mut s = net.bias(0).at(0, h);
            for k in 0..dim {
                s += pairs.emb.at(i, k) * net.weight(0).at(k, h);
            }
            *a.at_mut(i, h) = s;
            let mut t = 0.0;
            for k in 0..dim {
                t += pairs.proto.at(i, k) * net.weight(0).at(dim + k, h);
            }
            *b.at_mut(i, h) = t;
        }
    }
    let w2: Vec<f64> = (0..hidden).map(|h| net.weight(1).at(h, 0)).collect();
    let b2 = net.bias(1).at(0, 0);
    let eval = |i: usize, j: usize| -> f64 {
        let mut s = b2;
        for h in 0..hidden {
            s += w2[h] * act_apply(act, a.at(i, h) + b.at(j, h));
        }
        s
    };
    let mut diag = 0.0;
    // online log-sum-exp over the grid
    let mut running_max = f64::NEG_INFINITY;
    let mut running_sum = 0.0f64;
    for i in 0..l {
        for j in 0..l {
            let f = eval(i, j);
            if !f.is_finite() {
                return Err(Error::numeric("critic produced non-finite scores"));
            }
            if i == j {
                diag += f;
            }
            if f <= running_max {
                running_sum += (f - running_max).exp();
            } else {
                running_sum = running_sum * (running_max - f).exp() + 1.0;
                running_max = f;
            }
        }
    }
    let grid_term = (running_max + running_sum.ln() - 2.0 * lf.ln()).exp();
    if !grid_term.is_finite() {
        return Err(Error::numeric("exp overflow in critic lower bound"));
    }
    Ok(diag / lf - grid_term + 1.0)
}

fn act_apply(act: crate::nn::Activation, z: f64) -> f64 {
    use crate::nn::Activation::*;
    match act {
        Relu => {
            if z > 0.0 {
                z
            } else {
                0.0
            }
        }
        Tanh => z.tanh(),
        Identity => z,
    }
}

fn critic_lower_value_generic(pairs: &PairBatch, critic: &Critic) -> Result<f64> {
    let l = pairs.len();
    let lf = l as f64;
    let chunk = 4096usize;
    let mut diag = 0.0;
    let mut running_max = f64::NEG_INFINITY;
    let mut running_sum = 0.0f64;
    let mut buf: Vec<(usize, usize)> = Vec::with_capacity(chunk);
    let flush = |buf: &mut Vec<(usize, usize)>,
                     diag: &mut f64,
                     running_max: &mut f64,
                     running_sum: &mut f64|
     -> Result<()> {
        if buf.is_empty() {
            return Ok(());
        }
        let x = Critic::concat_input(&pairs.emb, &pairs.proto, buf);
        let f = critic.net.forward(&x)?;
        for (r, &(i, j)) in buf.iter().enumerate() {
            let v = f.at(r, 0);
            if !v.is_finite() {
                return Err(Error::numeric("critic produced non-finite scores"));
            }
            if i == j {
                *diag += v;
            }
            if v <= *running_max {
                *running_sum += (v - *running_max).exp();
            } else {
                *running_sum = *running_sum * (*running_max - v).exp() + 1.0;
                *running_max = v;
            }
        }
        buf.clear();
        Ok(())
    };
    for i in 0..l {
        for j in 0..l {
            buf.push((i, j));
            if buf.len() == chunk {
                flush(&mut buf, &mut diag, &mut running_max, &mut running_sum)?;
            }
        }
    }
    flush(&mut buf, &mut diag, &mut running_max, &mut running_sum)?;
    let grid_term = (running_max + running_sum.ln() - 2.0 * lf.ln()).exp();
    Ok(diag / lf - grid_term + 1.0)
}

/// Gradient-ascend the lower bound in the critic parameters only.
pub fn train_critic(
    critic: &mut Critic,
    pairs: &PairBatch,
    steps: usize,
    opt: &mut AdamState,
) -> Result<()> {
    if pairs.is_empty() {
        return Ok(());
    }
    for _ in 0..steps {
        let eval = critic_lower(pairs, critic)?;
        let mut grads = eval.grad_critic;
        grads.scale(-1.0); // maximize
        opt.step(&mut critic.net, &grads)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Combined regularizer
// ---------------------------------------------------------------------------

pub struct MiRegularizer {
    /// `λ (I_ood − I_id)`
    pub value: f64,
    pub i_ood: f64,
    pub i_id: f64,
    /// Gradient of `value` on the full unlabeled embedding matrix.
    pub grad_unlabeled: Mat,
    /// Gradient of `value` on the (refined) prototype matrix.
    pub grad_protos: Mat,
}

/// Combine the two bounds on their respective splits of the unlabeled
/// embeddings: the upper bound on OOD rows against their nearest refined
/// prototypes, the lower bound on ID rows likewise. Empty splits contribute
/// zero; `λ = 0` short-circuits to an all-zero result.
pub fn mi_regularizer(
    unlabeled_emb: &Mat,
    protos: &PrototypeSet,
    split: &OodSplit,
    dec: &VariationalDecoder,
    critic: &Critic,
    lambda: f64,
) -> Result<MiRegularizer> {
    let mut out = MiRegularizer {
        value: 0.0,
        i_ood: 0.0,
        i_id: 0.0,
        grad_unlabeled: Mat::zeros(unlabeled_emb.rows(), unlabeled_emb.cols()),
        grad_protos: Mat::zeros(protos.n_classes(), protos.dims()),
    };
    if lambda == 0.0 {
        return Ok(out);
    }
    if split.n_unlabeled() != unlabeled_emb.rows() {
        return Err(Error::contract("split does not cover the unlabeled embeddings"));
    }
    if !split.ood_indices.is_empty() {
        let ood_emb = unlabeled_emb.select_rows(&split.ood_indices);
        let pairs = pair_nearest(&ood_emb, protos)?;
        let eval = club_upper(&pairs, dec)?;
        out.i_ood = eval.estimate;
        for (r, &u) in split.ood_indices.iter().enumerate() {
            for k in 0..unlabeled_emb.cols() {
                *out.grad_unlabeled.at_mut(u, k) += lambda * eval.grad_emb.at(r, k);
            }
        }
        for (r, &c) in pairs.proto_index.iter().enumerate() {
            for k in 0..protos.dims() {
                *out.grad_protos.at_mut(c, k) += lambda * eval.grad_proto.at(r, k);
            }
        }
    }
    if !split.id_indices.is_empty() {
        let id_emb = unlabeled_emb.select_rows(&split.id_indices);
        let pairs = pair_nearest(&id_emb, protos)?;
        let eval = critic_lower(&pairs, critic)?;
        out.i_id = eval.estimate;
        for (r, &u) in split.id_indices.iter().enumerate() {
            for k in 0..unlabeled_emb.cols() {
                *out.grad_unlabeled.at_mut(u, k) -= lambda * eval.grad_emb.at(r, k);
            }
        }
        for (r, &c) in pairs.proto_index.iter().enumerate() {
            for k in 0..protos.dims() {
                *out.grad_protos.at_mut(c, k) -= lambda * eval.grad_proto.at(r, k);
            }
        }
    }
    out.value = lambda * (out.i_ood - out.i_id);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Gaussian ground-truth benchmark
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct GaussianBenchConfig {
    pub n_samples: usize,
    pub decoder_steps: usize,
    pub critic_steps: usize,
    pub critic_batch: usize,
    pub lr: f64,
}

impl Default for GaussianBenchConfig {
    fn default() -> Self {
        GaussianBenchConfig {
            n_samples: 10_000,
            decoder_steps: 1500,
            critic_steps: 1500,
            critic_batch: 128,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GaussianBenchRow {
    pub rho: f64,
    pub true_mi: f64,
    pub lower: f64,
    pub upper: f64,
}

/// True mutual information of a bivariate Gaussian with correlation `rho`.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

fn sample_gaussian_pairs(rho: f64, n: usize, rng: &mut crate::rng::Rng) -> PairBatch {
    use rand_distr::StandardNormal;
    let mut e = Mat::zeros(n, 1);
    let mut p = Mat::zeros(n, 1);
    let noise = (1.0 - rho * rho).sqrt();
    for i in 0..n {
        let x: f64 = rng.sample(StandardNormal);
        let eps: f64 = rng.sample(StandardNormal);
        *e.at_mut(i, 0) = x;
        *p.at_mut(i, 0) = rho * x + noise * eps;
    }
    PairBatch::from_matched(e, p).expect("equal rows by construction")
}

/// Train both estimators on correlated 1-D Gaussian pairs and evaluate them
/// on a fresh sample of the same size against the closed-form ground truth.
pub fn gaussian_bench(
    rho: f64,
    cfg: &GaussianBenchConfig,
    seed: u64,
) -> Result<GaussianBenchRow> {
    let mut train_rng = rng_from(mix(seed, 0xbe9c));
    let mut eval_rng = rng_from(mix(seed, 0xe7a1));
    let mut init_rng = rng_from(mix(seed, 0x1219));

    let train = sample_gaussian_pairs(rho, cfg.n_samples, &mut train_rng);
    let eval = sample_gaussian_pairs(rho, cfg.n_samples, &mut eval_rng);

    // decoder: full-batch ascent of the conditional log-likelihood
    let mut dec = VariationalDecoder::new(1, 32, &mut init_rng)?;
    let mut dec_opt = AdamState::new(&dec.mean_net, cfg.lr);
    train_decoder(&mut dec, &train, cfg.decoder_steps, &mut dec_opt)?;
    let upper = club_upper(&eval, &dec)?.estimate;

    // critic: minibatch ascent of the lower bound
    let mut critic = Critic::new(1, 10, &mut init_rng)?;
    let mut critic_opt = AdamState::new(&critic.net, cfg.lr);
    let mut batch_rng = rng_from(mix(seed, 0xba7c));
    for _ in 0..cfg.critic_steps {
        let idx: Vec<usize> = (0..cfg.critic_batch.min(train.len()))
            .map(|_| batch_rng.random_range(0..train.len()))
            .collect();
        let batch = PairBatch {
            emb: train.emb.select_rows(&idx),
            proto: train.proto.select_rows(&idx),
            proto_index: (0..idx.len()).collect(),
        };
        train_critic(&mut critic, &batch, 1, &mut critic_opt)?;
    }
    let lower = critic_lower_value(&eval, &critic)?;

    Ok(GaussianBenchRow { rho, true_mi: gaussian_mi(rho), lower, upper })
}
