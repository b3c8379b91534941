//! Subject-by-subject similarity matrices tagged with the view they came from.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Structure,
    Text,
    Fused,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::Structure => "structure",
            View::Text => "text",
            View::Fused => "fused",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSimilarity {
    pub view: View,
    pub values: Matrix,
    pub subject_ids: Vec<String>,
}

impl ViewSimilarity {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }
}

/// Cosine similarity between every pair of vectors, with an exact unit diagonal.
///
/// `names` is used only to label a zero-norm error.
pub fn cosine_matrix(vectors: &[Vec<f64>], names: &[String]) -> Result<Matrix> {
    let n = vectors.len();
    let mut unit = Vec::with_capacity(n);
    for (i, v) in vectors.iter().enumerate() {
        let nv = math::norm(v);
        if !(nv > 0.0) {
            return Err(Error::ZeroNorm {
                what: names.get(i).cloned().unwrap_or_else(|| i.to_string()),
                index: i,
            });
        }
        unit.push(v.iter().map(|x| x / nv).collect::<Vec<_>>());
    }
    let mut out = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let c = math::dot(&unit[i], &unit[j]).clamp(-1.0, 1.0);
            out[(i, j)] = c;
            out[(j, i)] = c;
        }
    }
    Ok(out)
}
