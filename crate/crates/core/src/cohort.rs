//! Subjects, cohorts and Pearson connectivity.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math;

/// Diagnostic class of a subject. Every run is one disorder against controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Control = 0,
    Patient = 1,
}

impl Label {
    pub const BOTH: [Label; 2] = [Label::Control, Label::Patient];

    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Control),
            1 => Some(Label::Patient),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_u8())
    }

    pub fn opposite(self) -> Label {
        match self {
            Label::Control => Label::Patient,
            Label::Patient => Label::Control,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.as_u8()
    }
}

impl TryFrom<u8> for Label {
    type Error = String;
    fn try_from(v: u8) -> core::result::Result<Self, String> {
        Label::from_u8(v).ok_or_else(|| format!("label must be 0 or 1, got {v}"))
    }
}

/// One participant. `series` is `T_len x M`: rows are time points, columns ROIs.
///
/// The label is kept as the raw integer read from the manifest so that
/// validation can report an out-of-range value instead of failing to parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub label: u8,
    pub series: Matrix,
    pub text: Option<String>,
    pub text_embedding: Option<Vec<f64>>,
}

impl Subject {
    pub fn new(id: impl Into<String>, label: Label, series: Matrix) -> Self {
        Self { id: id.into(), label: label.as_u8(), series, text: None, text_embedding: None }
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    pub fn with_embedding(mut self, v: Vec<f64>) -> Self {
        self.text_embedding = Some(v);
        self
    }

    pub fn class(&self) -> Result<Label> {
        Label::from_u8(self.label).ok_or_else(|| Error::Subject {
            subject: self.id.clone(),
            message: format!("invalid label {}", self.label),
        })
    }

    pub fn t_len(&self) -> usize {
        self.series.rows()
    }

    pub fn m_rois(&self) -> usize {
        self.series.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectivityKind {
    Pcc,
    LearnedStructure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityMatrix {
    pub values: Matrix,
    pub kind: ConnectivityKind,
    pub subject_id: String,
}

/// Machine-readable validation finding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    EmptyId,
    TooFewTimepoints,
    TooFewRois,
    NonFiniteSeries,
    InvalidLabel,
    MissingText,
    NonFiniteEmbedding,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::EmptyId => "empty_id",
            ViolationCode::TooFewTimepoints => "too_few_timepoints",
            ViolationCode::TooFewRois => "too_few_rois",
            ViolationCode::NonFiniteSeries => "non_finite_series",
            ViolationCode::InvalidLabel => "invalid_label",
            ViolationCode::MissingText => "missing_text",
            ViolationCode::NonFiniteEmbedding => "non_finite_embedding",
        }
    }
}

/// Checks every subject invariant. Never fails; an empty list means valid.
pub fn validate_subject(subject: &Subject, require_text: bool) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |code: ViolationCode, message: String| out.push(Violation { code, message });
    if subject.id.trim().is_empty() {
        push(ViolationCode::EmptyId, "subject id is empty".into());
    }
    if subject.t_len() < 2 {
        push(ViolationCode::TooFewTimepoints, format!("{} time points, need at least 2", subject.t_len()));
    }
    if subject.m_rois() < 2 {
        push(ViolationCode::TooFewRois, format!("{} ROIs, need at least 2", subject.m_rois()));
    }
    if let Some(pos) = subject.series.as_slice().iter().position(|x| !x.is_finite()) {
        let cols = subject.m_rois().max(1);
        push(
            ViolationCode::NonFiniteSeries,
            format!("non-finite value at time {} ROI {}", pos / cols, pos % cols),
        );
    }
    if Label::from_u8(subject.label).is_none() {
        push(ViolationCode::InvalidLabel, format!("label {} is not 0 or 1", subject.label));
    }
    if require_text && subject.text.is_none() && subject.text_embedding.is_none() {
        push(ViolationCode::MissingText, "neither text nor text embedding present".into());
    }
    if let Some(v) = &subject.text_embedding {
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            push(ViolationCode::NonFiniteEmbedding, "text embedding empty or non-finite".into());
        }
    }
    out
}

/// Immutable, validated collection of subjects sharing one parcellation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    name: String,
    m_rois: usize,
    subjects: Vec<Subject>,
}

impl Cohort {
    pub fn new(name: impl Into<String>, subjects: Vec<Subject>) -> Result<Self> {
        Self::build(name.into(), subjects, false)
    }

    /// Like [`Cohort::new`] but also requires text or a text embedding on every subject.
    pub fn with_text_view(name: impl Into<String>, subjects: Vec<Subject>) -> Result<Self> {
        Self::build(name.into(), subjects, true)
    }

    fn build(name: String, subjects: Vec<Subject>, require_text: bool) -> Result<Self> {
        let Some(first) = subjects.first() else {
            return Err(Error::Cohort { message: "cohort has no subjects".into(), ids: Vec::new() });
        };
        let m_rois = first.m_rois();
        let mismatched: Vec<String> =
            subjects.iter().filter(|s| s.m_rois() != m_rois).map(|s| s.id.clone()).collect();
        if !mismatched.is_empty() {
            return Err(Error::Cohort {
                message: format!("ROI count differs from {m_rois} ({})", first.id),
                ids: mismatched,
            });
        }
        let mut seen = BTreeSet::new();
        let dups: Vec<String> =
            subjects.iter().filter(|s| !seen.insert(s.id.as_str())).map(|s| s.id.clone()).collect();
        if !dups.is_empty() {
            return Err(Error::Cohort { message: "duplicate subject ids".into(), ids: dups });
        }
        for s in &subjects {
            let v = validate_subject(s, require_text);
            if let Some(first) = v.first() {
                return Err(Error::Subject {
                    subject: s.id.clone(),
                    message: format!("{}: {}", first.code.as_str(), first.message),
                });
            }
        }
        Ok(Self { name, m_rois, subjects })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn m_rois(&self) -> usize {
        self.m_rois
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.id == id)
    }

    pub fn labels(&self) -> Vec<Label> {
        // Labels were validated in `build`.
        self.subjects.iter().map(|s| Label::from_u8(s.label).unwrap_or(Label::Control)).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.subjects.iter().filter(|s| s.label == label.as_u8()).count()
    }

    /// Supervised stages need both classes.
    pub fn require_both_labels(&self) -> Result<()> {
        for l in Label::BOTH {
            if self.count(l) == 0 {
                return Err(Error::Cohort {
                    message: format!("no subject with label {}", l.as_u8()),
                    ids: Vec::new(),
                });
            }
        }
        Ok(())
    }

    /// Sub-cohort with the given ids, in the given order.
    pub fn subset(&self, ids: &[String]) -> Result<Cohort> {
        let mut subjects = Vec::with_capacity(ids.len());
        for id in ids {
            let s = self.get(id).ok_or_else(|| Error::Cohort {
                message: "unknown subject id".into(),
                ids: alloc::vec![id.clone()],
            })?;
            subjects.push(s.clone());
        }
        Cohort::new(self.name.clone(), subjects)
    }
}

/// Sum of `f(t)` for `t < n`, pairing `t` with `n-1-t` so the result is
/// bitwise invariant under reversing the time axis.
fn mirrored_sum(n: usize, f: impl Fn(usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for t in 0..n / 2 {
        acc += f(t) + f(n - 1 - t);
    }
    if n % 2 == 1 {
        acc += f(n / 2);
    }
    acc
}

/// Pearson correlation between all ROI pairs of `series` (`T_len x M`).
pub fn pcc_matrix(series: &Matrix, subject_id: &str) -> Result<Matrix> {
    let t = series.rows();
    let m = series.cols();
    if t < 2 {
        return Err(Error::Subject { subject: subject_id.to_string(), message: "need at least 2 time points".into() });
    }
    let mut centered = Matrix::zeros(m, t);
    let mut norms = alloc::vec![0.0; m];
    for r in 0..m {
        let mean = mirrored_sum(t, |i| series[(i, r)]) / t as f64;
        for i in 0..t {
            centered[(r, i)] = series[(i, r)] - mean;
        }
        let row = centered.row(r);
        let ss = mirrored_sum(t, |i| row[i] * row[i]);
        if !(ss > 0.0) {
            return Err(Error::ZeroVariance { subject: subject_id.to_string(), roi: r });
        }
        norms[r] = math::sqrt(ss);
    }
    let mut out = Matrix::identity(m);
    for r in 0..m {
        for s in (r + 1)..m {
            let (a, b) = (centered.row(r), centered.row(s));
            let c = (mirrored_sum(t, |i| a[i] * b[i]) / (norms[r] * norms[s])).clamp(-1.0, 1.0);
            out[(r, s)] = c;
            out[(s, r)] = c;
        }
    }
    Ok(out)
}

pub fn compute_pcc(subject: &Subject) -> Result<ConnectivityMatrix> {
    if let Some(pos) = subject.series.as_slice().iter().position(|x| !x.is_finite()) {
        return Err(Error::Subject {
            subject: subject.id.clone(),
            message: format!("non-finite series value at flat index {pos}"),
        });
    }
    Ok(ConnectivityMatrix {
        values: pcc_matrix(&subject.series, &subject.id)?,
        kind: ConnectivityKind::Pcc,
        subject_id: subject.id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn series(cols: &[Vec<f64>]) -> Matrix {
        Matrix::from_fn(cols[0].len(), cols.len(), |t, r| cols[r][t])
    }

    #[test]
    fn identical_and_negated_columns() {
        let a: Vec<f64> = (0..20).map(|t| ((t * 7) % 5) as f64 + 0.1 * t as f64).collect();
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        let s = Subject::new("s1", Label::Patient, series(&[a.clone(), a.clone(), neg]));
        let c = compute_pcc(&s).unwrap();
        assert_eq!(c.kind, ConnectivityKind::Pcc);
        assert!((c.values[(0, 1)] - 1.0).abs() < 1e-15);
        assert!((c.values[(0, 2)] + 1.0).abs() < 1e-15);
        assert_eq!(c.values[(1, 1)], 1.0);
    }

    #[test]
    fn zero_variance_names_roi() {
        let s = Subject::new("s1", Label::Control, series(&[vec![1.0, 2.0, 3.0], vec![4.0; 3]]));
        assert_eq!(compute_pcc(&s), Err(Error::ZeroVariance { subject: "s1".into(), roi: 1 }));
    }

    #[test]
    fn validation_codes() {
        let good = Subject::new("a", Label::Control, Matrix::from_fn(5, 3, |t, r| (t * r) as f64 + t as f64));
        assert!(validate_subject(&good, false).is_empty());
        let mut nan = good.clone();
        nan.series[(2, 1)] = f64::NAN;
        let v = validate_subject(&nan, false);
        assert_eq!(v.iter().map(|v| v.code).collect::<Vec<_>>(), vec![ViolationCode::NonFiniteSeries]);
        let mut bad_label = good.clone();
        bad_label.label = 2;
        let v = validate_subject(&bad_label, false);
        assert_eq!(v.iter().map(|v| v.code).collect::<Vec<_>>(), vec![ViolationCode::InvalidLabel]);
        let v = validate_subject(&good, true);
        assert_eq!(v[0].code, ViolationCode::MissingText);
    }

    #[test]
    fn cohort_rejects_roi_mismatch_and_duplicates() {
        let a = Subject::new("a", Label::Control, Matrix::from_fn(50, 8, |t, r| (t + r) as f64));
        let b = Subject::new("b", Label::Patient, Matrix::from_fn(50, 9, |t, r| (t * r) as f64));
        match Cohort::new("c", vec![a.clone(), b]) {
            Err(Error::Cohort { ids, .. }) => assert_eq!(ids, vec![String::from("b")]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(Cohort::new("c", vec![a.clone(), a]), Err(Error::Cohort { .. })));
    }
}
