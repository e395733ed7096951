//! Frequency-based concept filtering.
//!
//! Every augmentation view of every image in a class's quantization set
//! votes for its `k` most cosine-similar concepts. Concepts that are rarely
//! among the nearest (non-visual or unrelated) collect no votes; each class
//! keeps its `m` most-voted concepts, and the union of those lists is the
//! tokenizer codebook.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embkit::{self, EmbError, EmbeddingMatrix, NORM_TOLERANCE};
use crate::quantset::QuantSet;
use crate::vocab::{ConceptCatalog, VocabError};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("concept catalog has no embeddings")]
    MissingEmbeddings,
    #[error("pool row {pool_index} (group {group}) has no view rows")]
    GroupResolution { pool_index: usize, group: u64 },
    #[error("pool index {0} out of range")]
    PoolIndex(usize),
    #[error("frequency table has no counts")]
    EmptyFrequencies,
    #[error("{0} must be at least 1")]
    InvalidParameter(&'static str),
    #[error(transparent)]
    Embedding(#[from] EmbError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub type Result<T, E = FilterError> = std::result::Result<T, E>;

/// Per-class concept vote counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    /// Concepts credited per view.
    pub k: usize,
    pub counts: Vec<BTreeMap<usize, u64>>,
    pub views_seen: Vec<u64>,
}

impl FrequencyTable {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self, class: usize) -> u64 {
        self.counts[class].values().sum()
    }
}

/// Concept ids ordered by count descending then id ascending, dropping
/// counts below `min_count` and keeping at most `limit`.
pub(crate) fn rank_by_count(
    counts: &BTreeMap<usize, u64>,
    limit: usize,
    min_count: u64,
) -> Vec<usize> {
    let mut ranked: Vec<(u64, usize)> = counts
        .iter()
        .filter(|(_, &c)| c >= min_count && c > 0)
        .map(|(&id, &c)| (c, id))
        .collect();
    ranked.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.truncate(limit);
    ranked.into_iter().map(|(_, id)| id).collect()
}

/// Counts, for each class, how often every concept lands in the top-`k` of a
/// view belonging to one of the class's selected pool images.
///
/// `pool` resolves selected indices to augmentation groups; `views` holds all
/// view rows (including the un-augmented one) tagged with the same groups.
/// Both views and concept embeddings must be unit-normalized.
pub fn count_topk_concepts(
    qset: &QuantSet,
    pool: &EmbeddingMatrix,
    views: &EmbeddingMatrix,
    concepts: &ConceptCatalog,
    k: usize,
) -> Result<FrequencyTable> {
    if k == 0 {
        return Err(FilterError::InvalidParameter("k"));
    }
    let emb = concepts
        .embeddings()
        .ok_or(FilterError::MissingEmbeddings)?;
    emb.check_normalized(NORM_TOLERANCE)?;
    views.check_normalized(NORM_TOLERANCE)?;
    if emb.dim() != views.dim() {
        return Err(EmbError::DimMismatch {
            context: "views vs concept embeddings",
            expected: emb.dim(),
            found: views.dim(),
        }
        .into());
    }

    let mut by_group: HashMap<u64, Vec<usize>> = HashMap::new();
    for r in 0..views.rows() {
        by_group.entry(views.group_of(r)).or_default().push(r);
    }

    let mut class_views: Vec<Vec<usize>> = Vec::with_capacity(qset.classes.len());
    let mut needed = BTreeSet::new();
    for members in &qset.classes {
        let mut rows = Vec::new();
        for &idx in members {
            if idx >= pool.rows() {
                return Err(FilterError::PoolIndex(idx));
            }
            let group = pool.group_of(idx);
            let vr = by_group.get(&group).ok_or(FilterError::GroupResolution {
                pool_index: idx,
                group,
            })?;
            rows.extend_from_slice(vr);
        }
        needed.extend(rows.iter().copied());
        class_views.push(rows);
    }

    // Views shared by several classes are searched once.
    let needed: Vec<usize> = needed.into_iter().collect();
    let hits = needed
        .par_iter()
        .map(|&r| embkit::dot_topk(views.row(r), emb, k).map(|t| t.indices))
        .collect::<Result<Vec<_>, _>>()?;
    let slot: HashMap<usize, usize> = needed.iter().enumerate().map(|(s, &r)| (r, s)).collect();

    let mut counts = Vec::with_capacity(class_views.len());
    let mut views_seen = Vec::with_capacity(class_views.len());
    for rows in &class_views {
        let mut c: BTreeMap<usize, u64> = BTreeMap::new();
        for r in rows {
            for &id in &hits[slot[r]] {
                *c.entry(id).or_insert(0) += 1;
            }
        }
        counts.push(c);
        views_seen.push(rows.len() as u64);
    }
    Ok(FrequencyTable {
        k: k.min(emb.rows()),
        counts,
        views_seen,
    })
}

/// Filtered codebook: per-class concept lists plus the deduplicated union.
///
/// Union concepts keep the order of their source catalog ids; `origin[u]` is
/// the source id of union concept `u`. Per-class lists hold union indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub per_class: Vec<Vec<usize>>,
    pub origin: Vec<usize>,
    pub concepts: ConceptCatalog,
}

/// JSON form of a [`Codebook`]; the union catalog and its embeddings are
/// stored alongside as JSON lines and V2CE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookManifest {
    pub per_class: Vec<Vec<usize>>,
    pub origin: Vec<usize>,
}

impl Codebook {
    pub fn n_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    /// Source-catalog ids of class `k`'s list, in rank order.
    pub fn class_source_ids(&self, k: usize) -> Vec<usize> {
        self.per_class[k].iter().map(|&u| self.origin[u]).collect()
    }

    pub fn manifest(&self) -> CodebookManifest {
        CodebookManifest {
            per_class: self.per_class.clone(),
            origin: self.origin.clone(),
        }
    }

    pub fn from_manifest(manifest: CodebookManifest, concepts: ConceptCatalog) -> Result<Self> {
        let n = concepts.len();
        if manifest.origin.len() != n || manifest.per_class.iter().flatten().any(|&u| u >= n) {
            return Err(EmbError::DimMismatch {
                context: "codebook manifest vs union catalog",
                expected: n,
                found: manifest.origin.len(),
            }
            .into());
        }
        Ok(Self {
            per_class: manifest.per_class,
            origin: manifest.origin,
            concepts,
        })
    }
}

/// Keeps each class's top-`m` concepts (count desc, id asc, at least
/// `min_count` votes) and gathers the union with its embeddings.
pub fn build_codebook(
    freq: &FrequencyTable,
    concepts: &ConceptCatalog,
    m: usize,
    min_count: u64,
) -> Result<Codebook> {
    if m == 0 {
        return Err(FilterError::InvalidParameter("m"));
    }
    let lists: Vec<Vec<usize>> = freq
        .counts
        .iter()
        .map(|c| rank_by_count(c, m, min_count))
        .collect();
    if lists.iter().all(Vec::is_empty) {
        return Err(FilterError::EmptyFrequencies);
    }
    let origin: Vec<usize> = lists
        .iter()
        .flatten()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let to_union: HashMap<usize, usize> =
        origin.iter().enumerate().map(|(u, &id)| (id, u)).collect();
    let per_class = lists
        .iter()
        .map(|l| l.iter().map(|id| to_union[id]).collect())
        .collect();
    Ok(Codebook {
        per_class,
        concepts: concepts.select(&origin)?,
        origin,
    })
}
