//! Vision-to-concept tokenizer and class bottleneck construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conceptfilter::{rank_by_count, Codebook};
use crate::embkit::{self, EmbError, EmbeddingMatrix, TopKResult, NORM_TOLERANCE};
use crate::vocab::{Concept, ConceptCatalog, VocabError};

/// Concepts emitted per image.
pub const DEFAULT_TOKENS_PER_IMAGE: usize = 5;
/// Bottleneck concepts kept per class.
pub const DEFAULT_CONCEPTS_PER_CLASS: usize = 50;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error("codebook concepts have no embeddings")]
    MissingEmbeddings,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("class {0} has no labeled embeddings")]
    MissingClass(usize),
    #[error("labeled embeddings carry no labels")]
    MissingLabels,
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: u32, n_classes: usize },
    #[error("invalid bottleneck: {0}")]
    InvalidBottleneck(String),
    #[error(transparent)]
    Embedding(#[from] EmbError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub type Result<T, E = TokenizerError> = std::result::Result<T, E>;

/// Maps an image embedding to its `k` nearest codebook concepts under
/// squared Euclidean distance.
#[derive(Debug, Clone)]
pub struct V2CTokenizer {
    codebook: Codebook,
    k: usize,
}

impl V2CTokenizer {
    pub fn new(codebook: Codebook, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(TokenizerError::InvalidK);
        }
        let emb = codebook
            .concepts
            .embeddings()
            .ok_or(TokenizerError::MissingEmbeddings)?;
        if emb.is_empty() {
            return Err(TokenizerError::EmptyCodebook);
        }
        emb.check_normalized(NORM_TOLERANCE)?;
        Ok(Self { codebook, k })
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn embeddings(&self) -> &EmbeddingMatrix {
        self.codebook.concepts.embeddings().expect("checked in new")
    }

    /// Codebook concept ids (union indices) nearest first, with squared
    /// distances. Ties go to the lower id.
    pub fn tokenize(&self, image: &[f32]) -> Result<TopKResult> {
        Ok(embkit::euclidean_topk(image, self.embeddings(), self.k)?)
    }

    /// Tokenizes every image of each class, ranks concepts by how often they
    /// were emitted (count desc, id asc) and keeps `concepts_per_class`.
    pub fn build_bottleneck(
        &self,
        labeled: &EmbeddingMatrix,
        n_classes: usize,
        concepts_per_class: usize,
    ) -> Result<Bottleneck> {
        let labels = labeled.labels().ok_or(TokenizerError::MissingLabels)?;
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(TokenizerError::LabelOutOfRange { label, n_classes });
        }
        let tokens = (0..labeled.rows())
            .into_par_iter()
            .map(|i| self.tokenize(labeled.row(i)).map(|t| t.indices))
            .collect::<Result<Vec<_>>>()?;

        let mut counts: Vec<BTreeMap<usize, u64>> = vec![BTreeMap::new(); n_classes];
        let mut seen = vec![false; n_classes];
        for (toks, &label) in tokens.iter().zip(labels) {
            seen[label as usize] = true;
            for &c in toks {
                *counts[label as usize].entry(c).or_insert(0) += 1;
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(TokenizerError::MissingClass(k));
        }
        let lists: Vec<Vec<usize>> = counts
            .iter()
            .map(|c| rank_by_count(c, concepts_per_class, 1))
            .collect();
        Bottleneck::from_codebook_lists(&self.codebook, lists)
    }
}

/// Class-specific concept lists plus the deduplicated union used as the
/// classifier's concept layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    /// Union indices per class, most frequent first.
    per_class: Vec<Vec<usize>>,
    /// Codebook id of each union concept, ascending.
    codebook_ids: Vec<usize>,
    /// Union concepts with embeddings, aligned with `codebook_ids`.
    concepts: ConceptCatalog,
}

/// JSON form of a [`Bottleneck`]; embeddings live in a companion V2CE file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckManifest {
    pub n_classes: usize,
    pub per_class: Vec<Vec<usize>>,
    pub codebook_ids: Vec<usize>,
    pub concepts: Vec<Concept>,
}

impl Bottleneck {
    /// Builds a bottleneck from per-class lists of codebook ids.
    pub fn from_codebook_lists(codebook: &Codebook, lists: Vec<Vec<usize>>) -> Result<Self> {
        let codebook_ids: Vec<usize> = lists
            .iter()
            .flatten()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let to_union: HashMap<usize, usize> = codebook_ids
            .iter()
            .enumerate()
            .map(|(u, &c)| (c, u))
            .collect();
        let per_class = lists
            .iter()
            .map(|l| l.iter().map(|c| to_union[c]).collect())
            .collect();
        Ok(Self {
            per_class,
            concepts: codebook.concepts.select(&codebook_ids)?,
            codebook_ids,
        })
    }

    /// Builds a bottleneck directly from per-class union indices and the
    /// union catalog (with embeddings).
    pub fn new(per_class: Vec<Vec<usize>>, concepts: ConceptCatalog) -> Result<Self> {
        let codebook_ids = (0..concepts.len()).collect();
        Self::from_manifest(
            BottleneckManifest {
                n_classes: per_class.len(),
                per_class,
                codebook_ids,
                concepts: concepts.concepts().to_vec(),
            },
            concepts
                .embeddings()
                .cloned()
                .ok_or(TokenizerError::MissingEmbeddings)?,
        )
    }

    pub fn n_classes(&self) -> usize {
        self.per_class.len()
    }

    /// Number of distinct concepts in the union.
    pub fn n_concepts(&self) -> usize {
        self.codebook_ids.len()
    }

    pub fn per_class(&self) -> &[Vec<usize>] {
        &self.per_class
    }

    pub fn codebook_ids(&self) -> &[usize] {
        &self.codebook_ids
    }

    pub fn concepts(&self) -> &ConceptCatalog {
        &self.concepts
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        self.concepts
            .embeddings()
            .expect("bottleneck always carries embeddings")
    }

    pub fn manifest(&self) -> BottleneckManifest {
        BottleneckManifest {
            n_classes: self.n_classes(),
            per_class: self.per_class.clone(),
            codebook_ids: self.codebook_ids.clone(),
            concepts: self.concepts.concepts().to_vec(),
        }
    }

    pub fn from_manifest(m: BottleneckManifest, embeddings: EmbeddingMatrix) -> Result<Self> {
        let n = m.codebook_ids.len();
        let bad = |msg: String| Err(TokenizerError::InvalidBottleneck(msg));
        if m.per_class.len() != m.n_classes {
            return bad(format!(
                "{} per-class lists for {} classes",
                m.per_class.len(),
                m.n_classes
            ));
        }
        if m.concepts.len() != n || embeddings.rows() != n {
            return bad(format!(
                "{n} union ids, {} concepts, {} embedding rows",
                m.concepts.len(),
                embeddings.rows()
            ));
        }
        if let Some(&u) = m.per_class.iter().flatten().find(|&&u| u >= n) {
            return bad(format!("per-class index {u} outside union of {n}"));
        }
        let concepts =
            ConceptCatalog::from_texts(m.concepts.into_iter().map(|c| (c.text, c.kind)))?
                .with_embeddings(embeddings)?;
        Ok(Self {
            per_class: m.per_class,
            codebook_ids: m.codebook_ids,
            concepts,
        })
    }
}
