//! Cross-validation splits, classification metrics, ablation variants and
//! 2-D exports of subject similarity.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Label};
use crate::error::{config, shape, Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::math;
use crate::rng::{shuffle, stage_rng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Stratified k-fold split. Within each class the ids are shuffled and dealt
/// round-robin; the dealing position carries over between classes so fold
/// sizes stay balanced.
pub fn kfold_split(cohort: &Cohort, folds: usize, seed: u64) -> Result<Vec<Fold>> {
    let ids: Vec<String> = cohort.subjects().iter().map(|s| s.id.clone()).collect();
    kfold_split_ids(&ids, &cohort.labels(), folds, seed)
}

pub fn kfold_split_ids(ids: &[String], labels: &[Label], folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(config(format!("need at least 2 folds, got {folds}")));
    }
    if ids.len() != labels.len() {
        return Err(shape("one label per subject id required"));
    }
    let mut rng = stage_rng(seed, "kfold");
    let mut bins: Vec<Vec<String>> = vec![Vec::new(); folds];
    let mut pos = 0;
    for label in Label::BOTH {
        let mut members: Vec<String> =
            ids.iter().zip(labels).filter(|(_, &l)| l == label).map(|(id, _)| id.clone()).collect();
        if members.len() < folds {
            return Err(Error::Cohort {
                message: format!("class {} has {} subjects, fewer than {folds} folds", label.as_u8(), members.len()),
                ids: members,
            });
        }
        shuffle(&mut rng, &mut members);
        for id in members {
            bins[pos % folds].push(id);
            pos += 1;
        }
    }
    let order: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let sort = |v: &mut Vec<String>| v.sort_by_key(|id| order[id.as_str()]);
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let mut test = bins[f].clone();
        sort(&mut test);
        let mut train: Vec<String> = bins.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, b)| b.clone()).collect();
        sort(&mut train);
        out.push(Fold { train, test });
    }
    Ok(out)
}

/// Metrics of one evaluation. Undefined rates (a class absent from `y_true`)
/// are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub acc: f64,
    pub auc: Option<f64>,
    pub sen: Option<f64>,
    pub spec: Option<f64>,
}

/// Mann-Whitney AUC with midranks for ties.
pub fn mann_whitney_auc(y_true: &[Label], y_score: &[f64]) -> Result<f64> {
    if y_true.len() != y_score.len() {
        return Err(shape("labels and scores differ in length"));
    }
    let n_pos = y_true.iter().filter(|&&l| l == Label::Patient).count();
    let n_neg = y_true.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC is undefined when only one class is present".into()));
    }
    let mut idx: Vec<usize> = (0..y_score.len()).collect();
    idx.sort_by(|&a, &b| y_score[a].total_cmp(&y_score[b]));
    let mut ranks = vec![0.0; idx.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && y_score[idx[j + 1]] == y_score[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = y_true.iter().zip(&ranks).filter(|(&l, _)| l == Label::Patient).map(|(_, r)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

pub fn compute_metrics(y_true: &[Label], y_score: &[f64], threshold: f64) -> Result<MetricEntry> {
    if y_true.len() != y_score.len() {
        return Err(shape("labels and scores differ in length"));
    }
    if y_true.is_empty() {
        return Err(config("no samples to score"));
    }
    if let Some(s) = y_score.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(config(format!("scores must lie in [0, 1], got {s}")));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&y, &s) in y_true.iter().zip(y_score) {
        match (y, s >= threshold) {
            (Label::Patient, true) => tp += 1,
            (Label::Patient, false) => fn_ += 1,
            (Label::Control, true) => fp += 1,
            (Label::Control, false) => tn += 1,
        }
    }
    let rate = |a: usize, b: usize| if a + b == 0 { None } else { Some(a as f64 / (a + b) as f64) };
    Ok(MetricEntry {
        acc: (tp + tn) as f64 / y_true.len() as f64,
        auc: mann_whitney_auc(y_true, y_score).ok(),
        sen: rate(tp, fn_),
        spec: rate(tn, fp),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Full,
    S,
    Cl,
    M,
    T,
    G,
}

impl VariantName {
    pub const ALL: [VariantName; 6] =
        [VariantName::Full, VariantName::S, VariantName::Cl, VariantName::M, VariantName::T, VariantName::G];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantName::Full => "full",
            VariantName::S => "s",
            VariantName::Cl => "cl",
            VariantName::M => "m",
            VariantName::T => "t",
            VariantName::G => "g",
        }
    }

    /// Whether the variant runs subtype discovery and prototypes.
    pub fn uses_subtypes(self) -> bool {
        !matches!(self, VariantName::S | VariantName::Cl)
    }
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantName::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| config(format!("unknown variant {s:?}; expected one of full, s, cl, m, t, g")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: VariantName,
    pub k: Option<usize>,
}

impl VariantSpec {
    pub fn new(name: VariantName, k: Option<usize>) -> Result<Self> {
        let s = Self { name, k };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.name.uses_subtypes(), self.k) {
            (false, Some(k)) => {
                Err(config(format!("variant {} has no subtype machinery, but k = {k} was given", self.name.as_str())))
            }
            (true, None) => Err(config(format!("variant {} needs a subtype count k", self.name.as_str()))),
            (true, Some(k)) if k < 2 => Err(config(format!("variant {} needs k >= 2, got {k}", self.name.as_str()))),
            _ => Ok(()),
        }
    }

    pub fn tag(&self) -> String {
        match self.k {
            Some(k) => format!("{}_k{k}", self.name.as_str()),
            None => String::from(self.name.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub acc: f64,
    pub auc: f64,
    pub sen: f64,
    pub spec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub seed: u64,
    pub fold: usize,
    pub metrics: MetricEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: VariantName,
    pub k: Option<usize>,
    pub per_fold: Vec<FoldMetrics>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

impl MetricReport {
    /// Aggregates per-fold values; undefined entries are left out of that
    /// metric's mean and standard deviation.
    pub fn aggregate(spec: VariantSpec, per_fold: Vec<FoldMetrics>) -> Self {
        let col = |f: &dyn Fn(&MetricEntry) -> Option<f64>| -> (f64, f64) {
            let xs: Vec<f64> = per_fold.iter().filter_map(|m| f(&m.metrics)).collect();
            if xs.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                (math::mean(&xs), math::std_dev(&xs))
            }
        };
        let acc = col(&|m| Some(m.acc));
        let auc = col(&|m| m.auc);
        let sen = col(&|m| m.sen);
        let spec_ = col(&|m| m.spec);
        Self {
            variant: spec.name,
            k: spec.k,
            mean: MetricSummary { acc: acc.0, auc: auc.0, sen: sen.0, spec: spec_.0 },
            std: MetricSummary { acc: acc.1, auc: auc.1, sen: sen.1, spec: spec_.1 },
            per_fold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2d {
    pub subject_ids: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    pub subtype: Vec<Option<usize>>,
}

fn check_n(n: usize) -> Result<()> {
    if n < 3 {
        return Err(config(format!("2-D export needs at least 3 subjects, got {n}")));
    }
    Ok(())
}

/// Top two eigenvectors of `b`, scaled by `√λ` and sign-fixed so each axis's
/// largest-magnitude entry is positive.
fn top2_coords(b: &Matrix) -> Result<Vec<[f64; 2]>> {
    let n = b.rows();
    let eig = symmetric_eigen(b)?;
    let mut coords = vec![[0.0; 2]; n];
    for axis in 0..2 {
        let col = n - 1 - axis;
        let lam = eig.values[col].max(0.0);
        let v = eig.vectors.column(col);
        let mut pivot = 0;
        for i in 1..n {
            if v[i].abs() > v[pivot].abs() + 1e-12 {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        let scale = math::sqrt(lam);
        for i in 0..n {
            coords[i][axis] = sign * v[i] * scale;
        }
    }
    Ok(coords)
}

fn label_subtypes(ids: &[String], assignment: Option<&BTreeMap<String, usize>>) -> Vec<Option<usize>> {
    ids.iter().map(|id| assignment.and_then(|a| a.get(id).copied())).collect()
}

/// Classical MDS of a similarity matrix with `d²(i,j) = s_ii + s_jj − 2 s_ij`.
pub fn export_similarity_2d(
    sim: &Matrix,
    subject_ids: &[String],
    assignment: Option<&BTreeMap<String, usize>>,
) -> Result<Embedding2d> {
    let n = sim.rows();
    check_n(n)?;
    if !sim.is_square() || subject_ids.len() != n {
        return Err(shape("similarity must be square with one id per row"));
    }
    let d2 = Matrix::from_fn(n, n, |i, j| (sim[(i, i)] + sim[(j, j)] - 2.0 * sim[(i, j)]).max(0.0));
    let row_mean: Vec<f64> = (0..n).map(|i| math::mean(d2.row(i))).collect();
    let grand = math::mean(&row_mean);
    let mut b = Matrix::from_fn(n, n, |i, j| -0.5 * (d2[(i, j)] - row_mean[i] - row_mean[j] + grand));
    b.symmetrize();
    Ok(Embedding2d {
        subject_ids: subject_ids.to_vec(),
        coords: top2_coords(&b)?,
        subtype: label_subtypes(subject_ids, assignment),
    })
}

/// PCA of row vectors to two dimensions.
pub fn export_embeddings_2d(
    vectors: &[Vec<f64>],
    subject_ids: &[String],
    assignment: Option<&BTreeMap<String, usize>>,
) -> Result<Embedding2d> {
    let n = vectors.len();
    check_n(n)?;
    if subject_ids.len() != n {
        return Err(shape("one subject id per vector required"));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(shape("embedding vectors differ in length"));
    }
    let mu: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let centred: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().zip(&mu).map(|(a, b)| a - b).collect()).collect();
    // The Gram matrix shares its nonzero spectrum with the covariance and
    // yields the projected coordinates directly.
    let mut gram = Matrix::from_fn(n, n, |i, j| math::dot(&centred[i], &centred[j]));
    gram.symmetrize();
    Ok(Embedding2d {
        subject_ids: subject_ids.to_vec(),
        coords: top2_coords(&gram)?,
        subtype: label_subtypes(subject_ids, assignment),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lab(v: &[u8]) -> Vec<Label> {
        v.iter().map(|&x| Label::from_u8(x).unwrap()).collect()
    }

    #[test]
    fn perfect_and_inverted_scores() {
        let y = lab(&[0, 1, 1, 0, 1]);
        let s: Vec<f64> = y.iter().map(|l| l.as_f64()).collect();
        let m = compute_metrics(&y, &s, 0.5).unwrap();
        assert_eq!((m.acc, m.auc, m.sen, m.spec), (1.0, Some(1.0), Some(1.0), Some(1.0)));
        let inv: Vec<f64> = s.iter().map(|x| 1.0 - x).collect();
        let m = compute_metrics(&y, &inv, 0.5).unwrap();
        assert_eq!((m.acc, m.auc), (0.0, Some(0.0)));
    }

    #[test]
    fn single_class_auc_is_undefined() {
        let y = lab(&[1, 1, 1]);
        assert!(matches!(mann_whitney_auc(&y, &[0.2, 0.4, 0.9]), Err(Error::Undefined(_))));
        let m = compute_metrics(&y, &[0.2, 0.4, 0.9], 0.5).unwrap();
        assert_eq!(m.auc, None);
        assert_eq!(m.spec, None);
        assert!((m.acc - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn balanced_folds() {
        let ids: Vec<String> = (0..20).map(|i| format!("s{i:02}")).collect();
        let labels: Vec<Label> = (0..20).map(|i| if i < 10 { Label::Control } else { Label::Patient }).collect();
        let folds = kfold_split_ids(&ids, &labels, 5, 7).unwrap();
        for f in &folds {
            let pat = f.test.iter().filter(|id| labels[ids.iter().position(|x| x == *id).unwrap()] == Label::Patient).count();
            assert_eq!(f.test.len(), 4);
            assert_eq!(pat, 2);
        }
        assert!(kfold_split_ids(&ids[..10], &labels[..10], 5, 0).is_err());
    }

    #[test]
    fn variant_spec_rules() {
        assert!(VariantSpec::new(VariantName::S, Some(3)).is_err());
        assert!(VariantSpec::new(VariantName::Full, None).is_err());
        assert!(VariantSpec::new(VariantName::M, Some(1)).is_err());
        assert_eq!(VariantSpec::new(VariantName::Full, Some(3)).unwrap().tag(), "full_k3");
        assert_eq!("cl".parse::<VariantName>().unwrap(), VariantName::Cl);
    }

    #[test]
    fn identical_subjects_collapse() {
        let v = vec![vec![1.0, 2.0, 3.0]; 4];
        let ids: Vec<String> = (0..4).map(|i| format!("{i}")).collect();
        let e = export_embeddings_2d(&v, &ids, None).unwrap();
        for c in &e.coords {
            assert!(c[0].abs() < 1e-9 && c[1].abs() < 1e-9);
        }
        assert!(export_embeddings_2d(&v[..2], &ids[..2], None).is_err());
    }
}
