//! Synthetic cohorts with planted subtypes, and the adjusted Rand index.
//!
//! Each (class, subtype) pair owns a partition of the ROIs into communities.
//! A subject's series follows a factor model: every ROI loads on the latent
//! factor of its community with weight `block_strength`, plus per-subject
//! loading noise of scale `noise_sigma` and unit observation noise. Text is a
//! bag of 20 tokens drawn from the subtype's token distribution.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Label, Subject};
use crate::error::{config, shape, Error, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::rng::{derive_seed, normal, shuffle, stage_rng};

pub const DOC_TOKENS: usize = 20;
const MAX_ATTEMPTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub k_true: usize,
    pub m_rois: usize,
    pub t_len: usize,
    pub block_strength: f64,
    pub noise_sigma: f64,
    pub text_vocab: usize,
    /// Number of communities each template partitions the ROIs into.
    pub communities: usize,
    /// Fraction of ROIs whose community moves between the class templates.
    pub class_shuffle: f64,
    /// Fraction of ROIs whose community moves from the class template to a subtype.
    pub subtype_shuffle: f64,
    /// Probability that a text token comes from the subtype's own tokens.
    pub text_signal: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_per_class: 60,
            k_true: 3,
            m_rois: 16,
            t_len: 100,
            block_strength: 1.0,
            noise_sigma: 0.3,
            text_vocab: 60,
            communities: 4,
            class_shuffle: 0.5,
            subtype_shuffle: 0.5,
            text_signal: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_true < 1 || self.n_per_class < self.k_true {
            return Err(config(format!("need 1 <= k_true <= n_per_class, got k_true = {}", self.k_true)));
        }
        if self.m_rois < 2 || self.t_len < 2 || self.text_vocab == 0 {
            return Err(config("m_rois and t_len must be at least 2, text_vocab at least 1"));
        }
        if self.communities < 1 || self.communities > self.m_rois {
            return Err(config("communities must lie in [1, m_rois]"));
        }
        if !(self.block_strength > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(config("block_strength must be positive and noise_sigma non-negative"));
        }
        let fractions = [self.class_shuffle, self.subtype_shuffle, self.text_signal];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(config("class_shuffle, subtype_shuffle and text_signal must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn n_total(&self) -> usize {
        2 * self.n_per_class
    }
}

/// Hidden truth behind a generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Subject id → planted subtype within its class.
    pub subtype: BTreeMap<String, usize>,
    /// Community of each ROI per (class, subtype), indexed `[class][subtype]`.
    pub templates: Vec<Vec<Vec<usize>>>,
}

impl GroundTruth {
    pub fn labels_for(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| self.subtype.get(id).copied().ok_or_else(|| config(format!("{id} is not in the ground truth"))))
            .collect()
    }
}

/// Swaps the communities of a random `fraction` of ROIs cyclically.
fn perturb(part: &[usize], fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    let m = part.len();
    let mut out = part.to_vec();
    let n_move = (math::ceil(fraction * m as f64) as usize).min(m);
    let mut rois: Vec<usize> = (0..m).collect();
    shuffle(rng, &mut rois);
    let moved = &rois[..n_move];
    let mut comms: Vec<usize> = moved.iter().map(|&r| part[r]).collect();
    if comms.len() > 1 {
        comms.rotate_left(1);
    }
    for (&r, g) in moved.iter().zip(comms) {
        out[r] = g;
    }
    out
}

fn template_partitions(spec: &SynthSpec) -> Vec<Vec<Vec<usize>>> {
    let m = spec.m_rois;
    let c = spec.communities;
    let mut rng = stage_rng(spec.seed, "synth/templates");
    let mut control: Vec<usize> = (0..m).map(|r| r * c / m).collect();
    shuffle(&mut rng, &mut control);
    let patient = perturb(&control, spec.class_shuffle, &mut rng);
    [control, patient]
        .iter()
        .map(|base| (0..spec.k_true).map(|_| perturb(base, spec.subtype_shuffle, &mut rng)).collect())
        .collect()
}

fn token_name(i: usize) -> String {
    format!("tok{i:03}")
}

fn sample_text(spec: &SynthSpec, label: Label, subtype: usize, rng: &mut impl Rng) -> String {
    let groups = 2 * spec.k_true;
    let group = label.index() * spec.k_true + subtype;
    let per = (spec.text_vocab / groups).max(1);
    let own: Vec<usize> = (0..per).map(|j| (group * per + j) % spec.text_vocab).collect();
    let mut words = Vec::with_capacity(DOC_TOKENS);
    for _ in 0..DOC_TOKENS {
        let idx = if rng.random::<f64>() < spec.text_signal {
            own[rng.random_range(0..own.len())]
        } else {
            rng.random_range(0..spec.text_vocab)
        };
        words.push(token_name(idx));
    }
    words.join(" ")
}

fn sample_series(spec: &SynthSpec, partition: &[usize], jitter: f64, rng: &mut impl Rng) -> Matrix {
    let m = spec.m_rois;
    let c = spec.communities;
    let loadings: Vec<Vec<f64>> = (0..m)
        .map(|r| {
            (0..c)
                .map(|f| {
                    let base = if partition[r] == f { spec.block_strength } else { 0.0 };
                    base + spec.noise_sigma * normal(rng)
                })
                .collect()
        })
        .collect();
    let mut x = Matrix::zeros(spec.t_len, m);
    for t in 0..spec.t_len {
        let factors: Vec<f64> = (0..c).map(|_| normal(rng)).collect();
        for r in 0..m {
            x[(t, r)] = math::dot(&loadings[r], &factors) + (1.0 + jitter) * normal(rng);
        }
    }
    x
}

fn has_flat_column(x: &Matrix) -> bool {
    (0..x.cols()).any(|r| math::std_dev(&x.column(r)) < 1e-12)
}

/// Generates a cohort with `n_per_class` controls followed by as many patients.
/// Subtypes are dealt round-robin so each is nonempty and sizes differ by at
/// most one.
pub fn generate(spec: &SynthSpec) -> Result<(Cohort, GroundTruth)> {
    spec.validate()?;
    let templates = template_partitions(spec);
    let mut subjects = Vec::with_capacity(spec.n_total());
    let mut truth = BTreeMap::new();
    for label in Label::BOTH {
        for i in 0..spec.n_per_class {
            let idx = label.index() * spec.n_per_class + i;
            let id = format!("sub{idx:04}");
            let k = i % spec.k_true;
            let mut rng = stage_rng(derive_seed(spec.seed, "synth/subject"), &id);
            let mut series = None;
            for attempt in 0..MAX_ATTEMPTS {
                let x = sample_series(spec, &templates[label.index()][k], 0.1 * attempt as f64, &mut rng);
                if !has_flat_column(&x) {
                    series = Some(x);
                    break;
                }
            }
            let series = series.ok_or_else(|| Error::Numerical(format!("degenerate covariance for {id} after {MAX_ATTEMPTS} attempts")))?;
            let text = sample_text(spec, label, k, &mut rng);
            subjects.push(Subject::new(id.clone(), label, series).with_text(text));
            truth.insert(id, k);
        }
    }
    let cohort = Cohort::with_text_view(format!("synthetic-seed{}", spec.seed), subjects)?;
    Ok((cohort, GroundTruth { subtype: truth, templates }))
}

fn comb2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index. Identical partitions score 1; when both partitions
/// leave no room above chance (the adjusted denominator is 0) the score is 0
/// unless they are identical.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape(format!("partitions have lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ra: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| comb2(c)).sum();
    let sa: f64 = ra.values().map(|&c| comb2(c)).sum();
    let sb: f64 = rb.values().map(|&c| comb2(c)).sum();
    let total = comb2(n);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = (sa + sb) / 2.0;
    let denom = max - expected;
    if denom.abs() < 1e-12 {
        let same = table.len() == ra.len() && table.len() == rb.len();
        return Ok(if same { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ari_basics() {
        assert_eq!(ari(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let single: Vec<usize> = (0..6).collect();
        assert!(ari(&single, &[0; 6]).unwrap() <= 0.0);
        assert!(ari(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let spec = SynthSpec { n_per_class: 9, t_len: 40, ..SynthSpec::default() };
        let (a, ta) = generate(&spec).unwrap();
        let (b, tb) = generate(&spec).unwrap();
        assert_eq!(a.subjects(), b.subjects());
        assert_eq!(ta, tb);
        assert_eq!(a.len(), 18);
        assert_eq!(a.count(Label::Patient), 9);
        let mut sizes = [0; 3];
        for id in a.subjects().iter().filter(|s| s.label == 1).map(|s| &s.id) {
            sizes[ta.subtype[id]] += 1;
        }
        assert_eq!(sizes, [3, 3, 3]);
    }
}
