//! Embedding matrices and the numeric kernels shared by every pipeline stage.
//!
//! An [`EmbeddingMatrix`] is a dense, row-major block of `f32` feature vectors
//! with one string id per row and optional class labels and augmentation
//! groups. Rows that share a group id are views of the same source image.
//!
//! All dot products accumulate in `f64`. Top-K searches are exact and break
//! ties by the lower row index, so results are reproducible across platforms.

mod format;
mod search;

use std::collections::HashSet;

use thiserror::Error;

pub use format::{load_v2ce, read_v2ce, save_v2ce, write_v2ce, MAGIC, VERSION};
pub use search::{
    batch_similarity, cosine_topk, dot, dot_topk, euclidean_topk, norm, SimilarityMatrix,
    TopKResult,
};

/// Rows whose L2 norm deviates from 1 by more than this are "not normalized".
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum EmbError {
    #[error("bad magic: expected \"V2CE\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported V2CE version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported V2CE dtype {0} (only 0 = float32)")]
    UnsupportedDtype(u32),
    #[error("truncated file: needed {needed} bytes for {section}, {available} available")]
    TruncatedFile {
        section: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("row {0} is the zero vector")]
    ZeroVector(usize),
    #[error("matrix has no rows")]
    EmptyMatrix,
    #[error("row {row} is not unit-normalized (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("duplicate row id {0:?}")]
    DuplicateId(String),
    #[error("invalid metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EmbError> = std::result::Result<T, E>;

/// Row-major set of feature vectors with per-row metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
    labels: Option<Vec<u32>>,
    groups: Option<Vec<u64>>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from a flat row-major buffer. `data.len()` must be a
    /// multiple of `dim` matching the number of ids.
    pub fn new(dim: usize, data: Vec<f32>, ids: Vec<String>) -> Result<Self> {
        let rows = ids.len();
        if data.len() != rows * dim {
            return Err(EmbError::DimMismatch {
                context: "data length vs rows x dim",
                expected: rows * dim,
                found: data.len(),
            });
        }
        let mut seen = HashSet::with_capacity(rows);
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(EmbError::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            rows,
            dim,
            data,
            ids,
            labels: None,
            groups: None,
        })
    }

    /// Builds a matrix from individual rows, ids defaulting to the row index.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(EmbError::DimMismatch {
                    context: "row length",
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::new(dim, data, ids)
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.rows {
            return Err(EmbError::DimMismatch {
                context: "labels length vs rows",
                expected: self.rows,
                found: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_groups(mut self, groups: Vec<u64>) -> Result<Self> {
        if groups.len() != self.rows {
            return Err(EmbError::DimMismatch {
                context: "groups length vs rows",
                expected: self.rows,
                found: groups.len(),
            });
        }
        self.groups = Some(groups);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn groups(&self) -> Option<&[u64]> {
        self.groups.as_deref()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact(0) panics, and a zero-dim matrix still has `rows` rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Group id of row `i`; rows without explicit groups form singleton groups
    /// keyed by their row index.
    pub fn group_of(&self, i: usize) -> u64 {
        match &self.groups {
            Some(g) => g[i],
            None => i as u64,
        }
    }

    /// New matrix containing the given rows (in the given order) with their
    /// metadata. Indices must be distinct and in range.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            ids.push(self.ids[i].clone());
        }
        let mut out = Self::new(self.dim, data, ids)?;
        out.labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        out.groups = self
            .groups
            .as_ref()
            .map(|g| indices.iter().map(|&i| g[i]).collect());
        Ok(out)
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(mut self) -> Result<Self> {
        for i in 0..self.rows {
            let row = &mut self.data[i * self.dim..(i + 1) * self.dim];
            let n = norm(row);
            if n == 0.0 || !n.is_finite() {
                return Err(EmbError::ZeroVector(i));
            }
            for x in row.iter_mut() {
                *x = (f64::from(*x) / n) as f32;
            }
            tighten_unit_norm(row);
        }
        Ok(self)
    }

    /// Fails with `NotNormalized` on the first row whose norm deviates from 1
    /// by more than `tol`.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for (i, r) in self.iter_rows().enumerate() {
            let n = norm(r);
            if (n - 1.0).abs() > tol {
                return Err(EmbError::NotNormalized { row: i, norm: n });
            }
        }
        Ok(())
    }
}

/// Normalizes a single vector into a fresh `f32` buffer.
pub fn normalized(v: &[f64]) -> Option<Vec<f32>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    let mut out: Vec<f32> = v.iter().map(|x| (x / n) as f32).collect();
    tighten_unit_norm(&mut out);
    Some(out)
}

/// Moves coordinates of an already-rounded unit vector by single ulps,
/// largest magnitudes first, whenever that brings the squared norm closer
/// to 1.
///
/// Plain rounding leaves norms off by up to ~1e-8, enough to reorder
/// near-tied neighbors between cosine and Euclidean rankings; afterwards
/// the residual is typically around 1e-11.
fn tighten_unit_norm(v: &mut [f32]) {
    let mut err = 1.0 - v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>();
    let mut order: Vec<usize> = (0..v.len()).filter(|&i| v[i] != 0.0).collect();
    order.sort_by(|&i, &j| v[j].abs().total_cmp(&v[i].abs()).then(i.cmp(&j)));
    for &i in &order {
        let x = v[i];
        let grow = err > 0.0;
        let candidate = if grow == (x > 0.0) {
            x.next_up()
        } else {
            x.next_down()
        };
        let new_err = err - (f64::from(candidate).powi(2) - f64::from(x).powi(2));
        if new_err.abs() < err.abs() {
            v[i] = candidate;
            err = new_err;
        }
    }
}
