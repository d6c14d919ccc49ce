//! Semi-supervised prototypical core: class prototypes, one-round soft
//! refinement with unlabeled data, and the query classification loss.
//!
//! Prototypes live in class-sorted row order. Soft assignments are softmaxes
//! of negative squared Euclidean distances to the *unrefined* prototypes;
//! refinement is a single weighted-mean update. Each forward op has a
//! matching `*_backward` that accumulates input gradients.

use crate::error::{Error, Result};
use crate::mat::{sq_dist, Mat};

/// Per-class prototypes, one row per episode class in ascending class order.
#[derive(Clone, Debug)]
pub struct PrototypeSet {
    protos: Mat,
    class_ids: Vec<usize>,
    counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn protos(&self) -> &Mat {
        &self.protos
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn dims(&self) -> usize {
        self.protos.cols()
    }

    fn position(&self, class_id: usize) -> Result<usize> {
        self.class_ids
            .binary_search(&class_id)
            .map_err(|_| Error::contract(format!("label {class_id} not in episode classes")))
    }
}

fn sorted_classes(labels: &[usize]) -> Vec<usize> {
    let mut ids = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Class-wise mean of support embeddings.
pub fn prototypes(support_emb: &Mat, labels: &[usize]) -> Result<PrototypeSet> {
    if support_emb.rows() != labels.len() {
        return Err(Error::shape("one label per support row required"));
    }
    let class_ids = sorted_classes(labels);
    if class_ids.is_empty() {
        return Err(Error::contract("prototypes need at least one support point"));
    }
    let mut protos = Mat::zeros(class_ids.len(), support_emb.cols());
    let mut counts = vec![0usize; class_ids.len()];
    for (i, &y) in labels.iter().enumerate() {
        let c = class_ids.binary_search(&y).expect("label drawn from class_ids");
        counts[c] += 1;
        for (p, &v) in protos.row_mut(c).iter_mut().zip(support_emb.row(i)) {
            *p += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        // every id in class_ids came from labels, so n >= 1
        let inv = 1.0 / n as f64;
        for p in protos.row_mut(c) {
            *p *= inv;
        }
    }
    Ok(PrototypeSet { protos, class_ids, counts })
}

/// Scatter prototype gradients back onto the support rows (+=).
pub fn prototypes_backward(
    set: &PrototypeSet,
    grad_protos: &Mat,
    labels: &[usize],
    grad_support: &mut Mat,
) {
    for (i, &y) in labels.iter().enumerate() {
        let c = set.class_ids.binary_search(&y).expect("labels match prototype set");
        let inv = 1.0 / set.counts[c] as f64;
        for (g, &gp) in grad_support.row_mut(i).iter_mut().zip(grad_protos.row(c)) {
            *g += inv * gp;
        }
    }
}

/// Row-stochastic soft class assignments of unlabeled points.
#[derive(Clone, Debug)]
pub struct SoftAssignment {
    mu: Mat,
}

impl SoftAssignment {
    pub fn mu(&self) -> &Mat {
        &self.mu
    }

    pub fn empty(n_classes: usize) -> Self {
        SoftAssignment { mu: Mat::zeros(0, n_classes) }
    }
}

/// `μ_c(x̃) = softmax_c(−‖x̃ − p_c‖²)`, computed with max subtraction.
pub fn soft_assign(unlabeled_emb: &Mat, protos: &PrototypeSet) -> SoftAssignment {
    let n = protos.n_classes();
    let mut mu = Mat::zeros(unlabeled_emb.rows(), n);
    for j in 0..unlabeled_emb.rows() {
        let row = unlabeled_emb.row(j);
        let logits: Vec<f64> =
            (0..n).map(|c| -sq_dist(row, protos.protos.row(c))).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (c, &l) in logits.iter().enumerate() {
            let e = (l - m).exp();
            *mu.at_mut(j, c) = e;
            z += e;
        }
        for c in 0..n {
            *mu.at_mut(j, c) /= z;
        }
    }
    SoftAssignment { mu }
}

/// Backward of [`soft_assign`]: given `∂L/∂μ`, accumulate gradients on the
/// unlabeled embeddings and the (unrefined) prototypes.
pub fn soft_assign_backward(
    grad_mu: &Mat,
    unlabeled_emb: &Mat,
    protos: &PrototypeSet,
    mu: &SoftAssignment,
    grad_unlabeled: &mut Mat,
    grad_protos: &mut Mat,
) {
    let n = protos.n_classes();
    for j in 0..unlabeled_emb.rows() {
        let mut dot = 0.0;
        for c in 0..n {
            dot += grad_mu.at(j, c) * mu.mu.at(j, c);
        }
        for c in 0..n {
            // softmax backward on logits −d; flip sign for d itself
            let dlogit = mu.mu.at(j, c) * (grad_mu.at(j, c) - dot);
            let dd = -dlogit;
            let urow = unlabeled_emb.row(j);
            let prow = protos.protos.row(c);
            for k in 0..urow.len() {
                let diff = 2.0 * (urow[k] - prow[k]);
                *grad_unlabeled.at_mut(j, k) += dd * diff;
                *grad_protos.at_mut(c, k) -= dd * diff;
            }
        }
    }
}

/// One refinement round:
/// `p′_c = (Σ_{S_c} h(x) + Σ_U h(x̃) μ_c(x̃)) / (|S_c| + Σ_U μ_c(x̃))`.
pub fn refine_prototypes(
    support_emb: &Mat,
    labels: &[usize],
    unlabeled_emb: &Mat,
    mu: &SoftAssignment,
) -> Result<PrototypeSet> {
    if mu.mu.rows() != unlabeled_emb.rows() {
        return Err(Error::shape("mu rows must match unlabeled rows"));
    }
    let base = prototypes(support_emb, labels)?;
    if unlabeled_emb.rows() > 0 && mu.mu.cols() != base.n_classes() {
        return Err(Error::shape("mu columns must match episode classes"));
    }
    let n = base.n_classes();
    let dims = support_emb.cols();
    let mut refined = Mat::zeros(n, dims);
    for c in 0..n {
        let mut denom = base.counts[c] as f64;
        let mut num = vec![0.0; dims];
        for (k, v) in num.iter_mut().enumerate() {
            *v = base.protos.at(c, k) * base.counts[c] as f64;
        }
        for j in 0..unlabeled_emb.rows() {
            let w = mu.mu.at(j, c);
            denom += w;
            for (k, v) in num.iter_mut().enumerate() {
                *v += w * unlabeled_emb.at(j, k);
            }
        }
        for (k, v) in num.iter().enumerate() {
            *refined.at_mut(c, k) = v / denom;
        }
    }
    Ok(PrototypeSet { protos: refined, class_ids: base.class_ids, counts: base.counts })
}

/// Backward of [`refine_prototypes`]: scatter `∂L/∂p′` onto the support
/// embeddings, unlabeled embeddings and soft assignments (+=).
pub fn refine_backward(
    refined: &PrototypeSet,
    grad_refined: &Mat,
    labels: &[usize],
    unlabeled_emb: &Mat,
    mu: &SoftAssignment,
    grad_support: &mut Mat,
    grad_unlabeled: &mut Mat,
    grad_mu: &mut Mat,
) {
    let n = refined.n_classes();
    let dims = refined.dims();
    // Rebuild the denominators B_c = |S_c| + Σ_j μ_jc.
    let mut denom = vec![0.0; n];
    for (c, d) in denom.iter_mut().enumerate() {
        *d = refined.counts[c] as f64;
        for j in 0..unlabeled_emb.rows() {
            *d += mu.mu.at(j, c);
        }
    }
    // ∂L/∂A_c and the scalar ∂L/∂B_c = −(∂L/∂p′_c · p′_c)/B_c.
    let mut grad_num = Mat::zeros(n, dims);
    let mut grad_den = vec![0.0; n];
    for c in 0..n {
        let mut dot = 0.0;
        for k in 0..dims {
            let ga = grad_refined.at(c, k) / denom[c];
            *grad_num.at_mut(c, k) = ga;
            dot += grad_refined.at(c, k) * refined.protos.at(c, k);
        }
        grad_den[c] = -dot / denom[c];
    }
    // Support rows enter A_{c(i)} with unit weight.
    for (i, &y) in labels.iter().enumerate() {
        let c = refined.class_ids.binary_search(&y).expect("labels match prototype set");
        for (g, &ga) in grad_support.row_mut(i).iter_mut().zip(grad_num.row(c)) {
            *g += ga;
        }
    }
    // Unlabeled rows enter every A_c with weight μ_jc; μ itself gets
    // u_j·∂A_c + ∂B_c.
    for j in 0..unlabeled_emb.rows() {
        for c in 0..n {
            let w = mu.mu.at(j, c);
            let mut dot = 0.0;
            for k in 0..dims {
                let ga = grad_num.at(c, k);
                *grad_unlabeled.at_mut(j, k) += w * ga;
                dot += unlabeled_emb.at(j, k) * ga;
            }
            *grad_mu.at_mut(j, c) += dot + grad_den[c];
        }
    }
}

/// Mean negative log-probability of the true class under
/// `softmax(−‖q − p_c‖²)`, with analytic gradients on the query embeddings
/// and the prototypes.
pub struct QueryLoss {
    pub loss: f64,
    pub grad_query: Mat,
    pub grad_protos: Mat,
}

pub fn query_nll(
    query_emb: &Mat,
    query_labels: &[usize],
    protos: &PrototypeSet,
) -> Result<QueryLoss> {
    if query_emb.rows() != query_labels.len() {
        return Err(Error::shape("one label per query row required"));
    }
    if query_emb.rows() == 0 {
        return Err(Error::contract("query set is empty"));
    }
    let n = protos.n_classes();
    let nq = query_emb.rows();
    let mut loss = 0.0;
    let mut grad_query = Mat::zeros(nq, query_emb.cols());
    let mut grad_protos = Mat::zeros(n, protos.dims());
    let inv = 1.0 / nq as f64;
    for i in 0..nq {
        let y = protos.position(query_labels[i])?;
        let row = query_emb.row(i);
        let logits: Vec<f64> =
            (0..n).map(|c| -sq_dist(row, protos.protos.row(c))).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
        let log_z = m + z.ln();
        loss += (log_z - logits[y]) * inv;
        for c in 0..n {
            let p = (logits[c] - m).exp() / z;
            // ∂loss/∂logit = (p − 1[c=y])/nq; logit = −d² flips the sign
            let dd = -((p - if c == y { 1.0 } else { 0.0 }) * inv);
            let prow = protos.protos.row(c);
            for k in 0..row.len() {
                let diff = 2.0 * (row[k] - prow[k]);
                *grad_query.at_mut(i, k) += dd * diff;
                *grad_protos.at_mut(c, k) -= dd * diff;
            }
        }
    }
    Ok(QueryLoss { loss, grad_query, grad_protos })
}

/// Nearest-prototype class per query row; ties go to the lowest class index.
pub fn predict(query_emb: &Mat, protos: &PrototypeSet) -> Vec<usize> {
    (0..query_emb.rows())
        .map(|i| {
            let row = query_emb.row(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..protos.n_classes() {
                let d = sq_dist(row, protos.protos.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            protos.class_ids[best]
        })
        .collect()
}

/// Fraction of query rows whose nearest prototype carries the true label.
pub fn accuracy(query_emb: &Mat, query_labels: &[usize], protos: &PrototypeSet) -> f64 {
    if query_labels.is_empty() {
        return 0.0;
    }
    let pred = predict(query_emb, protos);
    let hits = pred.iter().zip(query_labels).filter(|(a, b)| a == b).count();
    hits as f64 / query_labels.len() as f64
}
