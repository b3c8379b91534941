//! kNN graphs, normalised spectral clustering and per-class subtype discovery.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::Label;
use crate::error::{config, shape, Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::math;
use crate::rng::{derive_seed, stage_rng};
use crate::snf::{top_k_row, FusedSimilarity};

pub const KMEANS_RESTARTS: usize = 50;
const KMEANS_MAX_ITER: usize = 300;
const EIGENGAP_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControlSubtypes {
    /// One undifferentiated control subtype.
    Single,
    /// Controls are clustered with the same K as patients.
    #[default]
    Clustered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubtypeConfig {
    pub k: usize,
    /// `None` picks `⌈log₂ N⌉` per class.
    pub knn_k: Option<usize>,
    pub control_subtypes: ControlSubtypes,
}

impl Default for SubtypeConfig {
    fn default() -> Self {
        Self { k: 3, knn_k: None, control_subtypes: ControlSubtypes::Clustered }
    }
}

pub fn default_knn_k(n: usize) -> usize {
    let mut k = 0;
    while (1usize << k) < n {
        k += 1;
    }
    k.max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtypeAssignment {
    pub class_label: Label,
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
    pub sizes: Vec<usize>,
    /// Consecutive differences of the smallest Laplacian eigenvalues.
    pub eigengap_trace: Vec<f64>,
    pub seed: u64,
}

impl SubtypeAssignment {
    pub fn members(&self, subtype: usize) -> Vec<String> {
        self.assignment.iter().filter(|(_, &s)| s == subtype).map(|(id, _)| id.clone()).collect()
    }
}

/// Keeps each row's top-`k` off-diagonal entries and symmetrises by `max`.
pub fn knn_graph(fused: &Matrix, k: usize) -> Result<Matrix> {
    let n = fused.rows();
    if !fused.is_square() {
        return Err(shape("kNN graph needs a square matrix"));
    }
    if k < 1 || k >= n {
        return Err(config(format!("kNN graph needs 1 <= k < N, got k = {k}, N = {n}")));
    }
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in top_k_row(fused, i, k) {
            g[(i, j)] = fused[(i, j)].max(0.0);
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let v = g[(i, j)].max(g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralResult {
    pub labels: Vec<usize>,
    /// Smallest eigenvalues of the normalised Laplacian, ascending.
    pub eigenvalues: Vec<f64>,
    pub inertia: f64,
}

/// Spectral clustering on `L_sym = I − D^{-1/2} W D^{-1/2}`.
pub fn spectral_cluster(affinity: &Matrix, k: usize, seed: u64) -> Result<SpectralResult> {
    let n = affinity.rows();
    if !affinity.is_square() {
        return Err(shape("affinity must be square"));
    }
    if k < 2 || k > n {
        return Err(config(format!("spectral clustering needs 2 <= k <= N, got k = {k}, N = {n}")));
    }
    if affinity.asymmetry() > 1e-9 {
        return Err(shape("affinity is not symmetric"));
    }
    if affinity.as_slice().iter().any(|&x| !(x >= 0.0)) {
        return Err(shape("affinity has negative or NaN entries"));
    }
    let deg: Vec<f64> = (0..n).map(|i| (0..n).filter(|&j| j != i).map(|j| affinity[(i, j)]).sum()).collect();
    if let Some(i) = deg.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::Numerical(format!("node {i} is isolated (zero degree)")));
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / math::sqrt(*d)).collect();
    let lap = Matrix::from_fn(n, n, |i, j| {
        let w = if i == j { 0.0 } else { affinity[(i, j)] * inv_sqrt[i] * inv_sqrt[j] };
        if i == j {
            1.0 - w
        } else {
            -w
        }
    });
    let eig = symmetric_eigen(&lap).map_err(|e| {
        let (dmin, dmax) = deg.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &d| (a.min(d), b.max(d)));
        Error::Numerical(format!("{e}; degree range [{dmin:e}, {dmax:e}]"))
    })?;
    let mut points: Vec<Vec<f64>> = (0..n).map(|i| (0..k).map(|c| eig.vectors[(i, c)]).collect()).collect();
    for p in &mut points {
        let nrm = math::norm(p);
        if nrm > 0.0 {
            p.iter_mut().for_each(|x| *x /= nrm);
        }
    }
    let km = kmeans(&points, k, seed, KMEANS_RESTARTS)?;
    let labels = canonicalize(&km.labels, k, |i| i);
    let eigenvalues = eig.values.iter().take(EIGENGAP_LEN.max(k + 1).min(n)).copied().collect();
    Ok(SpectralResult { labels, eigenvalues, inertia: km.inertia })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cmp_centers(a: &[Vec<f64>], b: &[Vec<f64>]) -> Ordering {
    let mut sa: Vec<&Vec<f64>> = a.iter().collect();
    let mut sb: Vec<&Vec<f64>> = b.iter().collect();
    let lex = |x: &&Vec<f64>, y: &&Vec<f64>| {
        x.iter().zip(y.iter()).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
    };
    sa.sort_by(lex);
    sb.sort_by(lex);
    sa.iter().zip(&sb).map(|(x, y)| lex(x, y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// k-means with k-means++ seeding; best of `restarts` runs by inertia, exact
/// inertia ties broken by the lexicographically smallest sorted centre set.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(config(format!("k-means needs 1 <= k <= N, got k = {k}, N = {n}")));
    }
    let mut best: Option<KMeansResult> = None;
    for run in 0..restarts.max(1) {
        let mut rng = stage_rng(derive_seed(seed, "kmeans"), &format!("restart-{run}"));
        let r = lloyd(points, k, &mut rng);
        let better = match &best {
            None => true,
            Some(b) => match r.inertia.total_cmp(&b.inertia) {
                Ordering::Less => true,
                Ordering::Equal => cmp_centers(&r.centers, &b.centers) == Ordering::Less,
                Ordering::Greater => false,
            },
        };
        if better {
            best = Some(r);
        }
    }
    best.ok_or_else(|| Error::Numerical("k-means produced no result".into()))
}

fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> KMeansResult {
    let n = points.len();
    let dim = points[0].len();
    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut bi = 0;
            let mut bd = f64::INFINITY;
            for (c, ctr) in centers.iter().enumerate() {
                let d = sq_dist(p, ctr);
                if d < bd {
                    bd = d;
                    bi = c;
                }
            }
            if labels[i] != bi {
                labels[i] = bi;
                changed = true;
            }
        }
        // Refill empty clusters with the point farthest from its centre.
        for c in 0..k {
            if labels.iter().any(|&l| l == c) {
                continue;
            }
            let mut counts = vec![0usize; k];
            labels.iter().for_each(|&l| counts[l] += 1);
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| {
                    sq_dist(&points[a], &centers[labels[a]])
                        .total_cmp(&sq_dist(&points[b], &centers[labels[b]]))
                        .then(b.cmp(&a))
                });
            if let Some(i) = far {
                labels[i] = c;
                centers[c] = points[i].clone();
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
    KMeansResult { labels, centers, inertia }
}

/// Relabels clusters by descending size, ties by the smallest member key.
pub fn canonicalize<K: Ord>(labels: &[usize], k: usize, key: impl Fn(usize) -> K) -> Vec<usize> {
    let mut groups: Vec<(usize, Option<K>, usize)> = (0..k).map(|c| (0, None, c)).collect();
    for (i, &l) in labels.iter().enumerate() {
        let g = &mut groups[l];
        g.0 += 1;
        let kk = key(i);
        if g.1.as_ref().is_none_or(|cur| kk < *cur) {
            g.1 = Some(kk);
        }
    }
    groups.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let mut map = vec![0; k];
    for (new, g) in groups.iter().enumerate() {
        map[g.2] = new;
    }
    labels.iter().map(|&l| map[l]).collect()
}

/// Clusters one class's fused similarity into `k` canonicalised subtypes.
pub fn cluster_class(
    label: Label,
    fused: &FusedSimilarity,
    k: usize,
    knn_k: Option<usize>,
    seed: u64,
) -> Result<SubtypeAssignment> {
    let n = fused.subject_ids.len();
    if n < k {
        return Err(Error::Cohort {
            message: format!("class {} has {n} training subjects, fewer than k = {k}", label.as_u8()),
            ids: Vec::new(),
        });
    }
    let ids = &fused.subject_ids;
    let (raw, eigenvalues) = if k == 1 {
        (vec![0; n], Vec::new())
    } else {
        let knn = knn_k.unwrap_or_else(|| default_knn_k(n)).min(n - 1);
        let graph = knn_graph(&fused.values, knn)?;
        let r = spectral_cluster(&graph, k, seed)?;
        (r.labels, r.eigenvalues)
    };
    let labels = canonicalize(&raw, k, |i| ids[i].clone());
    let mut sizes = vec![0; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    let assignment = ids.iter().cloned().zip(labels).collect();
    let eigengap_trace = eigenvalues.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(SubtypeAssignment { class_label: label, k, assignment, sizes, eigengap_trace, seed })
}

/// Runs subtype discovery independently for every class present.
pub fn discover_subtypes(
    fused_per_class: &BTreeMap<Label, FusedSimilarity>,
    cfg: &SubtypeConfig,
    seed: u64,
) -> Result<BTreeMap<Label, SubtypeAssignment>> {
    let mut out = BTreeMap::new();
    for (&label, fused) in fused_per_class {
        let k = match (label, cfg.control_subtypes) {
            (Label::Control, ControlSubtypes::Single) => 1,
            _ => cfg.k,
        };
        let class_seed = derive_seed(seed, if label == Label::Control { "subtype-control" } else { "subtype-patient" });
        out.insert(label, cluster_class(label, fused, k, cfg.knn_k, class_seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_components() -> Matrix {
        Matrix::from_fn(6, 6, |i, j| if i != j && i / 3 == j / 3 { 1.0 + 0.1 * ((i + j) % 3) as f64 } else { 0.0 })
    }

    #[test]
    fn disconnected_components_are_recovered() {
        let r = spectral_cluster(&two_components(), 2, 1).unwrap();
        assert_eq!(r.labels, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn isolated_node_errors() {
        let mut w = two_components();
        for j in 0..6 {
            w[(5, j)] = 0.0;
            w[(j, 5)] = 0.0;
        }
        assert!(matches!(spectral_cluster(&w, 2, 1), Err(Error::Numerical(m)) if m.contains("node 5")));
    }

    #[test]
    fn knn_keeps_everything_at_n_minus_one() {
        let f = Matrix::from_fn(4, 4, |i, j| if i == j { 9.0 } else { 1.0 + (i * j) as f64 });
        let g = knn_graph(&f, 3).unwrap();
        for i in 0..4 {
            assert_eq!(g[(i, i)], 0.0);
            for j in 0..4 {
                if i != j {
                    assert_eq!(g[(i, j)], f[(i, j)]);
                }
            }
        }
        assert!(knn_graph(&f, 4).is_err());
        assert!(knn_graph(&f, 0).is_err());
    }

    #[test]
    fn canonical_order_by_size_then_member() {
        assert_eq!(canonicalize(&[2, 2, 0, 1, 1, 1], 3, |i| i), vec![1, 1, 2, 0, 0, 0]);
        assert_eq!(canonicalize(&[1, 0], 2, |i| i), vec![0, 1]);
    }

    #[test]
    fn default_knn_is_ceil_log2() {
        assert_eq!(default_knn_k(8), 3);
        assert_eq!(default_knn_k(9), 4);
        assert_eq!(default_knn_k(60), 6);
    }
}
