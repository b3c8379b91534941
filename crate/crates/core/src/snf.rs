//! Similarity network fusion by cross-diffusion of per-view kernels.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Error, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::view::{View, ViewSimilarity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnfConfig {
    /// `None` picks `max(3, ⌊N/10⌋)`.
    pub k_neighbors: Option<usize>,
    pub iterations: usize,
    pub mu: f64,
    pub views: Vec<View>,
    /// Convert cosine similarities to scaled-exponential affinities before fusing.
    pub kernelize: bool,
    /// Re-apply the full-kernel normalisation to each view after every round.
    pub renormalize: bool,
}

impl Default for SnfConfig {
    fn default() -> Self {
        Self { k_neighbors: None, iterations: 20, mu: 0.5, views: vec![View::Structure, View::Text], kernelize: true, renormalize: true }
    }
}

impl SnfConfig {
    pub fn neighbors_for(&self, n: usize) -> usize {
        self.k_neighbors.unwrap_or_else(|| (n / 10).max(3))
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let k = self.neighbors_for(n);
        if k < 1 || k >= n {
            return Err(config(format!("SNF needs 1 <= k_neighbors < N, got k = {k}, N = {n}")));
        }
        if self.iterations < 1 {
            return Err(config("SNF needs at least one iteration"));
        }
        if !(0.3..=0.8).contains(&self.mu) {
            return Err(config(format!("SNF mu must lie in [0.3, 0.8], got {}", self.mu)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedSimilarity {
    pub values: Matrix,
    pub config: SnfConfig,
    pub views: Vec<View>,
    pub subject_ids: Vec<String>,
}

/// Distances `d = sqrt(2(1 − sim))` between unit-normalised subjects.
pub fn similarity_to_distance(sim: &Matrix) -> Matrix {
    Matrix::from_fn(sim.rows(), sim.cols(), |i, j| {
        if i == j {
            0.0
        } else {
            math::sqrt((2.0 * (1.0 - sim[(i, j)])).max(0.0))
        }
    })
}

/// Indices of the `k` largest off-diagonal entries of row `i` (ties: lower index first).
pub(crate) fn top_k_row(m: &Matrix, i: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m.cols()).filter(|&j| j != i).collect();
    idx.sort_by(|&a, &b| m[(i, b)].total_cmp(&m[(i, a)]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Scaled exponential kernel `W = exp(−d² / (μ ε))` with
/// `ε_ij = (mean kNN distance of i + mean kNN distance of j + d_ij) / 3`.
pub fn affinity_from_similarity(sim: &ViewSimilarity, cfg: &SnfConfig) -> Result<Matrix> {
    affinity_matrix(&sim.values, cfg)
}

pub fn affinity_matrix(sim: &Matrix, cfg: &SnfConfig) -> Result<Matrix> {
    let n = sim.rows();
    if !sim.is_square() {
        return Err(shape("similarity must be square"));
    }
    cfg.validate(n)?;
    if sim.asymmetry() > 1e-9 {
        return Err(shape("similarity matrix is not symmetric"));
    }
    if !cfg.kernelize {
        return Ok(sim.map(|x| x.max(0.0)));
    }
    let k = cfg.neighbors_for(n);
    let d = similarity_to_distance(sim);
    let mut knn_mean = vec![0.0; n];
    for (i, km) in knn_mean.iter_mut().enumerate() {
        let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[(i, j)]).collect();
        row.sort_by(f64::total_cmp);
        *km = row[..k].iter().sum::<f64>() / k as f64;
    }
    Ok(Matrix::from_fn(n, n, |i, j| {
        let dij = d[(i, j)];
        if dij == 0.0 {
            return 1.0;
        }
        let eps = (knn_mean[i] + knn_mean[j] + dij) / 3.0;
        math::exp(-dij * dij / (cfg.mu * eps))
    }))
}

/// Full kernel: `P(i,j) = W(i,j) / (2 Σ_{k≠i} W(i,k))` off the diagonal, `P(i,i) = 1/2`.
pub fn full_kernel(w: &Matrix) -> Result<Matrix> {
    let n = w.rows();
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        let s: f64 = (0..n).filter(|&k| k != i).map(|k| w[(i, k)]).sum();
        if !(s > 0.0) {
            return Err(Error::Numerical(format!("subject {i} has no affinity to any other subject")));
        }
        for j in 0..n {
            p[(i, j)] = if i == j { 0.5 } else { w[(i, j)] / (2.0 * s) };
        }
    }
    Ok(p)
}

/// Local kernel: each row keeps its `k` strongest neighbours, normalised to sum 1.
pub fn local_kernel(w: &Matrix, k: usize) -> Result<Matrix> {
    let n = w.rows();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        let nb = top_k_row(w, i, k);
        let total: f64 = nb.iter().map(|&j| w[(i, j)]).sum();
        if !(total > 0.0) {
            return Err(Error::Numerical(format!("subject {i} has zero affinity to its neighbours")));
        }
        for j in nb {
            s[(i, j)] = w[(i, j)] / total;
        }
    }
    Ok(s)
}

pub fn snf_fuse(affinities: &[Matrix], cfg: &SnfConfig, subject_ids: &[String]) -> Result<FusedSimilarity> {
    if affinities.len() < 2 {
        return Err(config("SNF needs at least two views"));
    }
    let n = affinities[0].rows();
    cfg.validate(n)?;
    for (v, w) in affinities.iter().enumerate() {
        if w.rows() != n || !w.is_square() {
            return Err(shape(format!("view {v} is {}x{}, expected {n}x{n}", w.rows(), w.cols())));
        }
        if w.asymmetry() > 1e-9 {
            return Err(shape(format!("view {v} affinity is not symmetric")));
        }
        if w.as_slice().iter().any(|&x| !(x >= 0.0)) {
            return Err(shape(format!("view {v} affinity has negative or NaN entries")));
        }
    }
    if subject_ids.len() != n {
        return Err(shape("one subject id per row required"));
    }
    let k = cfg.neighbors_for(n);
    let locals: Vec<Matrix> = affinities.iter().map(|w| local_kernel(w, k)).collect::<Result<_>>()?;
    let mut p: Vec<Matrix> = affinities.iter().map(full_kernel).collect::<Result<_>>()?;
    let nv = p.len();
    for it in 0..cfg.iterations {
        let mut next = Vec::with_capacity(nv);
        for v in 0..nv {
            let mut others = Matrix::zeros(n, n);
            for (u, pu) in p.iter().enumerate() {
                if u != v {
                    others = others.add(pu)?;
                }
            }
            let others = others.scale(1.0 / (nv - 1) as f64);
            let s = &locals[v];
            let mut upd = s.matmul(&others)?.matmul(&s.transpose())?;
            upd.symmetrize();
            if cfg.renormalize {
                upd = full_kernel(&upd)?;
                upd.symmetrize();
            }
            if !upd.is_finite() {
                return Err(Error::NonFinite { step: it, message: format!("SNF view {v} produced NaN") });
            }
            next.push(upd);
        }
        p = next;
    }
    let mut fused = Matrix::zeros(n, n);
    for pv in &p {
        fused = fused.add(pv)?;
    }
    let values = fused.scale(1.0 / nv as f64);
    Ok(FusedSimilarity { values, config: cfg.clone(), views: cfg.views.clone(), subject_ids: subject_ids.to_vec() })
}

/// Wraps a single view's affinity as a "fused" matrix, for single-view ablations.
pub fn single_view(affinity: Matrix, view: View, cfg: &SnfConfig, subject_ids: &[String]) -> FusedSimilarity {
    FusedSimilarity { values: affinity, config: cfg.clone(), views: vec![view], subject_ids: subject_ids.to_vec() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_similarity_gives_all_ones_affinity() {
        let sim = Matrix::filled(5, 5, 1.0);
        let w = affinity_matrix(&sim, &SnfConfig { k_neighbors: Some(2), ..Default::default() }).unwrap();
        assert_eq!(w, Matrix::filled(5, 5, 1.0));
    }

    #[test]
    fn cross_block_affinity_is_lower() {
        let sim = Matrix::from_fn(6, 6, |i, j| if i == j { 1.0 } else if i / 3 == j / 3 { 0.8 } else { 0.0 });
        let w = affinity_matrix(&sim, &SnfConfig { k_neighbors: Some(2), ..Default::default() }).unwrap();
        assert!(w[(0, 4)] < w[(0, 1)]);
    }

    #[test]
    fn config_errors() {
        let sim = Matrix::identity(3);
        assert!(affinity_matrix(&sim, &SnfConfig { k_neighbors: Some(3), ..Default::default() }).is_err());
        let cfg = SnfConfig { k_neighbors: Some(1), iterations: 0, ..Default::default() };
        assert!(cfg.validate(3).is_err());
        let cfg = SnfConfig { k_neighbors: Some(1), mu: 0.9, ..Default::default() };
        assert!(cfg.validate(3).is_err());
    }

    #[test]
    fn asymmetric_input_rejected() {
        let mut a = Matrix::filled(4, 4, 0.5);
        a[(0, 1)] = 0.9;
        let ids: Vec<String> = (0..4).map(|i| alloc::format!("{i}")).collect();
        let cfg = SnfConfig { k_neighbors: Some(2), ..Default::default() };
        assert!(snf_fuse(&[a.clone(), a], &cfg, &ids).is_err());
    }
}
