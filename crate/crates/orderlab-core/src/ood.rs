//! Distance-threshold OOD gating of unlabeled data.
//!
//! All embeddings are L2-normalized first, prototypes are class means of the
//! normalized support rows, and the query set acts as the in-distribution
//! calibration set: a point is OOD when its distance to the nearest
//! prototype exceeds `mean + multiplier * std` of the query distances.
//! The split is a discrete decision; no gradients flow through it.

use crate::error::{Error, Result};
use crate::mat::{norm, sq_dist, Mat};
use crate::proto::prototypes;

/// Result of gating one episode's unlabeled set.
#[derive(Clone, Debug)]
pub struct OodSplit {
    pub id_indices: Vec<usize>,
    pub ood_indices: Vec<usize>,
    pub threshold: f64,
    pub calib_mean: f64,
    pub calib_std: f64,
}

impl OodSplit {
    pub fn n_unlabeled(&self) -> usize {
        self.id_indices.len() + self.ood_indices.len()
    }
}

fn normalize_rows(emb: &Mat, what: &str) -> Result<Mat> {
    let mut out = emb.clone();
    for i in 0..out.rows() {
        let n = norm(out.row(i));
        if n <= 0.0 || !n.is_finite() {
            return Err(Error::numeric(format!("{what} row {i} has zero or non-finite norm")));
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
    }
    Ok(out)
}

fn min_proto_distance(row: &[f64], protos: &Mat) -> f64 {
    (0..protos.rows())
        .map(|c| sq_dist(row, protos.row(c)).sqrt())
        .fold(f64::INFINITY, f64::min)
}

/// Split `unlabeled_emb` into ID and OOD indices using a query-calibrated
/// threshold over unrefined prototypes. `multiplier` scales the standard
/// deviation in the threshold; 1.0 matches the plain `μ + σ` rule.
pub fn detect(
    support_emb: &Mat,
    labels: &[usize],
    unlabeled_emb: &Mat,
    query_emb: &Mat,
    multiplier: f64,
) -> Result<OodSplit> {
    if query_emb.rows() < 2 {
        return Err(Error::contract("need at least 2 query points to calibrate"));
    }
    let support_n = normalize_rows(support_emb, "support")?;
    let query_n = normalize_rows(query_emb, "query")?;
    let protos = prototypes(&support_n, labels)?;

    let dists: Vec<f64> =
        (0..query_n.rows()).map(|i| min_proto_distance(query_n.row(i), protos.protos())).collect();
    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
    // population standard deviation (divide by count)
    let var = dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / dists.len() as f64;
    let std = var.sqrt();
    let threshold = mean + multiplier * std;

    let mut id_indices = Vec::new();
    let mut ood_indices = Vec::new();
    if unlabeled_emb.rows() > 0 {
        let unlabeled_n = normalize_rows(unlabeled_emb, "unlabeled")?;
        for i in 0..unlabeled_n.rows() {
            let d = min_proto_distance(unlabeled_n.row(i), protos.protos());
            if d > threshold {
                ood_indices.push(i);
            } else {
                id_indices.push(i);
            }
        }
    }
    Ok(OodSplit { id_indices, ood_indices, threshold, calib_mean: mean, calib_std: std })
}
