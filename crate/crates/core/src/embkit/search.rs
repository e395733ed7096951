use std::cmp::Ordering;

use rayon::prelude::*;

use super::{EmbError, EmbeddingMatrix, Result, NORM_TOLERANCE};

/// Ranked hits from an exact top-K search.
///
/// For similarity searches scores are non-increasing; for distance searches
/// they are non-decreasing. Equal scores are ordered by lower row index.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKResult {
    pub indices: Vec<usize>,
    pub scores: Vec<f32>,
}

impl TopKResult {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

fn check_query(query: &[f32], m: &EmbeddingMatrix, k: usize) -> Result<()> {
    if k == 0 {
        return Err(EmbError::InvalidK);
    }
    if m.is_empty() {
        return Err(EmbError::EmptyMatrix);
    }
    if query.len() != m.dim() {
        return Err(EmbError::DimMismatch {
            context: "query vs matrix dim",
            expected: m.dim(),
            found: query.len(),
        });
    }
    Ok(())
}

/// Keeps the `k` best `(score, index)` pairs, highest scores first when
/// `descending`, lowest first otherwise. Ties fall back to the lower index.
fn select_top(mut scored: Vec<(f64, usize)>, k: usize, descending: bool) -> TopKResult {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
        let by_score = if descending {
            b.0.total_cmp(&a.0)
        } else {
            a.0.total_cmp(&b.0)
        };
        by_score.then(a.1.cmp(&b.1))
    };
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    TopKResult {
        indices: scored.iter().map(|s| s.1).collect(),
        scores: scored.iter().map(|s| s.0 as f32).collect(),
    }
}

/// Exact top-K by cosine similarity, highest first. Zero-norm rows score 0.
pub fn cosine_topk(query: &[f32], m: &EmbeddingMatrix, k: usize) -> Result<TopKResult> {
    check_query(query, m, k)?;
    let qn = norm(query);
    let scored = m
        .iter_rows()
        .enumerate()
        .map(|(i, r)| {
            let denom = qn * norm(r);
            let s = if denom == 0.0 {
                0.0
            } else {
                dot(query, r) / denom
            };
            (s, i)
        })
        .collect();
    Ok(select_top(scored, k, true))
}

/// Exact top-K by raw inner product. Equivalent to [`cosine_topk`] when the
/// query and rows are unit-normalized, without recomputing row norms.
pub fn dot_topk(query: &[f32], m: &EmbeddingMatrix, k: usize) -> Result<TopKResult> {
    check_query(query, m, k)?;
    let scored = m
        .iter_rows()
        .enumerate()
        .map(|(i, r)| (dot(query, r), i))
        .collect();
    Ok(select_top(scored, k, true))
}

/// Exact top-K by squared Euclidean distance, nearest first.
pub fn euclidean_topk(query: &[f32], m: &EmbeddingMatrix, k: usize) -> Result<TopKResult> {
    check_query(query, m, k)?;
    let scored = m
        .iter_rows()
        .enumerate()
        .map(|(i, r)| (squared_distance(query, r), i))
        .collect();
    Ok(select_top(scored, k, false))
}

/// Dense `rows(x) x rows(c)` block of cosine scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl SimilarityMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "similarity buffer shape");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.get(i, j);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// `result[i][j] = dot(x_i, c_j)` for unit-normalized inputs. Parallel across
/// rows of `x`; each entry is a single sequential reduction, so the output
/// does not depend on the thread count.
pub fn batch_similarity(x: &EmbeddingMatrix, c: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    if x.dim() != c.dim() {
        return Err(EmbError::DimMismatch {
            context: "batch_similarity dims",
            expected: c.dim(),
            found: x.dim(),
        });
    }
    x.check_normalized(NORM_TOLERANCE)?;
    c.check_normalized(NORM_TOLERANCE)?;
    let cols = c.rows();
    let mut data = vec![0.0f32; x.rows() * cols];
    if cols > 0 {
        data.par_chunks_mut(cols).enumerate().for_each(|(i, out)| {
            let xi = x.row(i);
            for (j, o) in out.iter_mut().enumerate() {
                *o = dot(xi, c.row(j)).clamp(-1.0, 1.0) as f32;
            }
        });
    }
    Ok(SimilarityMatrix {
        rows: x.rows(),
        cols,
        data,
    })
}
