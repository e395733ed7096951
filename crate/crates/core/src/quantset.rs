//! Class anchors and quantization-set selection.
//!
//! A class's base feature is the renormalized mean of either its prompt-text
//! embeddings or its few-shot image embeddings. Each class then claims the
//! `per_class` pool images most cosine-similar to its base feature. Classes
//! may claim the same pool image.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embkit::{self, EmbError, EmbeddingMatrix};

/// Mean vectors shorter than this cannot be normalized meaningfully.
pub const DEGENERATE_NORM: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum QuantSetError {
    #[error("class {0} has no embeddings")]
    MissingClass(usize),
    #[error("class {0}: mean embedding norm below {DEGENERATE_NORM}")]
    DegenerateBase(usize),
    #[error("embeddings carry no class labels")]
    MissingLabels,
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: u32, n_classes: usize },
    #[error("unlabeled pool is empty")]
    EmptyPool,
    #[error("per_class must be at least 1")]
    InvalidPerClass,
    #[error(transparent)]
    Embedding(#[from] EmbError),
}

pub type Result<T, E = QuantSetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseSource {
    Text,
    Images,
}

impl FromStr for BaseSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(Self::Text),
            "images" => Ok(Self::Images),
            _ => Err(format!("unknown base source {s:?} (expected text|images)")),
        }
    }
}

impl fmt::Display for BaseSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Text => "text",
            Self::Images => "images",
        })
    }
}

/// One unit vector per class, row `k` belonging to class `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseFeatures {
    vectors: EmbeddingMatrix,
    source: BaseSource,
}

impl BaseFeatures {
    pub fn vectors(&self) -> &EmbeddingMatrix {
        &self.vectors
    }

    pub fn source(&self) -> BaseSource {
        self.source
    }

    pub fn n_classes(&self) -> usize {
        self.vectors.rows()
    }

    pub fn class(&self, k: usize) -> &[f32] {
        self.vectors.row(k)
    }
}

fn class_means(m: &EmbeddingMatrix, n_classes: usize, source: BaseSource) -> Result<BaseFeatures> {
    let labels = m.labels().ok_or(QuantSetError::MissingLabels)?;
    let dim = m.dim();
    let mut sums = vec![0.0f64; n_classes * dim];
    let mut counts = vec![0usize; n_classes];
    for (row, &label) in m.iter_rows().zip(labels) {
        let k = label as usize;
        if k >= n_classes {
            return Err(QuantSetError::LabelOutOfRange { label, n_classes });
        }
        counts[k] += 1;
        for (s, &x) in sums[k * dim..(k + 1) * dim].iter_mut().zip(row) {
            *s += f64::from(x);
        }
    }
    let mut data = Vec::with_capacity(n_classes * dim);
    for k in 0..n_classes {
        if counts[k] == 0 {
            return Err(QuantSetError::MissingClass(k));
        }
        let mean: Vec<f64> = sums[k * dim..(k + 1) * dim]
            .iter()
            .map(|s| s / counts[k] as f64)
            .collect();
        let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < DEGENERATE_NORM {
            return Err(QuantSetError::DegenerateBase(k));
        }
        data.extend(embkit::normalized(&mean).expect("norm checked"));
    }
    let ids = (0..n_classes).map(|k| format!("class{k}")).collect();
    Ok(BaseFeatures {
        vectors: EmbeddingMatrix::new(dim, data, ids)?,
        source,
    })
}

/// Base features from prompt-template text embeddings labeled by class.
pub fn base_from_text(prompts: &EmbeddingMatrix, n_classes: usize) -> Result<BaseFeatures> {
    class_means(prompts, n_classes, BaseSource::Text)
}

/// Base features from labeled few-shot image embeddings.
pub fn base_from_images(fewshot: &EmbeddingMatrix, n_classes: usize) -> Result<BaseFeatures> {
    class_means(fewshot, n_classes, BaseSource::Images)
}

/// Per-class pool row indices, each list in descending similarity order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSet {
    pub per_class: usize,
    pub classes: Vec<Vec<usize>>,
}

impl QuantSet {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Exact per-class top-`per_class` selection by cosine similarity.
pub fn select_quantset(
    base: &BaseFeatures,
    pool: &EmbeddingMatrix,
    per_class: usize,
) -> Result<QuantSet> {
    if pool.is_empty() {
        return Err(QuantSetError::EmptyPool);
    }
    if per_class == 0 {
        return Err(QuantSetError::InvalidPerClass);
    }
    let classes = (0..base.n_classes())
        .into_par_iter()
        .map(|k| embkit::cosine_topk(base.class(k), pool, per_class).map(|r| r.indices))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(QuantSet { per_class, classes })
}
