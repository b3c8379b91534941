//! Text view: clinical text to subject embeddings, and their cosine similarity.
//!
//! The language model is abstracted behind [`TextEmbeddingProvider`]. This
//! crate ships the precomputed-vector passthrough and a deterministic
//! hashed bag-of-tokens featuriser; the HTTP provider lives in the std crate.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cohort::Subject;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::mix64;
use crate::view::{cosine_matrix, View, ViewSimilarity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Precomputed,
    DeterministicStub,
    External,
}

pub trait TextEmbeddingProvider: Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn kind(&self) -> ProviderKind;
    fn embed(&self, subject: &Subject) -> Result<Vec<f64>>;
}

/// Returns the subject's stored embedding unchanged.
#[derive(Debug, Clone)]
pub struct PrecomputedProvider {
    pub dim: usize,
}

impl TextEmbeddingProvider for PrecomputedProvider {
    fn name(&self) -> &str {
        "precomputed"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn kind(&self) -> ProviderKind {
        ProviderKind::Precomputed
    }
    fn embed(&self, subject: &Subject) -> Result<Vec<f64>> {
        subject.text_embedding.clone().ok_or_else(|| Error::Subject {
            subject: subject.id.clone(),
            message: "no precomputed text embedding".into(),
        })
    }
}

/// Hashed bag-of-tokens featuriser: lower-cased alphanumeric tokens are hashed
/// (FNV-1a mixed with the seed) into `dim` buckets, counted, and ℓ₂-normalised.
#[derive(Debug, Clone)]
pub struct StubProvider {
    pub dim: usize,
    pub seed: u64,
}

impl StubProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn bucket(&self, token: &str) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in token.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (mix64(h ^ mix64(self.seed)) % self.dim as u64) as usize
    }

    pub fn featurize(&self, text: &str) -> Option<Vec<f64>> {
        let mut counts = vec![0u64; self.dim];
        for tok in tokens(text) {
            counts[self.bucket(&tok)] += 1;
        }
        let sq: u64 = counts.iter().map(|c| c * c).sum();
        if sq == 0 {
            return None;
        }
        let n = math::sqrt(sq as f64);
        Some(counts.iter().map(|&c| c as f64 / n).collect())
    }
}

/// Lower-cased runs of ASCII alphanumerics and underscores.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_ascii_lowercase())
}

impl TextEmbeddingProvider for StubProvider {
    fn name(&self) -> &str {
        "deterministic_stub"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn kind(&self) -> ProviderKind {
        ProviderKind::DeterministicStub
    }
    fn embed(&self, subject: &Subject) -> Result<Vec<f64>> {
        let text = subject.text.as_deref().ok_or_else(|| Error::Subject {
            subject: subject.id.clone(),
            message: "no clinical text".into(),
        })?;
        self.featurize(text).ok_or_else(|| Error::Subject {
            subject: subject.id.clone(),
            message: "clinical text has no tokens".into(),
        })
    }
}

/// Provider call plus the output contract (length `dim`, finite).
pub fn embed_text(subject: &Subject, provider: &dyn TextEmbeddingProvider) -> Result<Vec<f64>> {
    if subject.text.is_none() && subject.text_embedding.is_none() {
        return Err(Error::Subject { subject: subject.id.clone(), message: "neither text nor text embedding".into() });
    }
    let v = provider.embed(subject)?;
    if v.len() != provider.dim() {
        return Err(Error::Provider(format!(
            "{} returned {} values for {}, expected {}",
            provider.name(),
            v.len(),
            subject.id,
            provider.dim()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Provider(format!("{} returned non-finite values for {}", provider.name(), subject.id)));
    }
    Ok(v)
}

pub fn text_similarity(embeddings: &[Vec<f64>], subject_ids: &[String]) -> Result<ViewSimilarity> {
    let values = cosine_matrix(embeddings, subject_ids).map_err(|e| match e {
        Error::ZeroNorm { what, .. } => Error::Subject { subject: what, message: "zero text embedding".into() },
        other => other,
    })?;
    Ok(ViewSimilarity { view: View::Text, values, subject_ids: subject_ids.to_vec() })
}
