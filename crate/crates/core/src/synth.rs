//! Synthetic embedding worlds with known ground truth, plus brute-force
//! reference implementations for checking the fast paths.
//!
//! Every class owns a few planted concept directions. A class image is the
//! normalized mean of its planted directions plus isotropic Gaussian noise;
//! prompts are generated the same way. Distractor concepts are uniform on
//! the sphere. The unlabeled pool mixes class images with background images
//! that belong to no class, and each pool image has augmentation views made
//! by adding fresh noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conceptfilter::Codebook;
use crate::embkit::{self, EmbError, EmbeddingMatrix, TopKResult};
use crate::vocab::{ConceptCatalog, ConceptKind, VocabError};

/// Pairwise cosine bound between planted directions.
pub const PLANTED_MAX_COSINE: f64 = 0.5;
const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cannot place {needed} separated planted directions in {dim} dimensions")]
    InfeasibleGeometry { needed: usize, dim: usize },
    #[error("invalid world parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Embedding(#[from] EmbError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub n_classes: usize,
    pub planted_per_class: usize,
    pub n_distractors: usize,
    /// Labeled training images per class.
    pub images_per_class: usize,
    /// Labeled held-out images per class.
    pub test_per_class: usize,
    pub prompts_per_class: usize,
    pub pool_size: usize,
    /// Fraction of pool images drawn from no class.
    pub background_fraction: f64,
    /// Views per pool image, the un-augmented image included.
    pub views_per_image: usize,
    pub dim: usize,
    /// Expected Euclidean norm of the noise added to a unit-scale signal;
    /// each coordinate gets `noise / sqrt(dim)` standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            n_classes: 10,
            planted_per_class: 3,
            n_distractors: 200,
            images_per_class: 20,
            test_per_class: 20,
            prompts_per_class: 4,
            pool_size: 1000,
            background_fraction: 0.2,
            views_per_image: 3,
            dim: 64,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl WorldParams {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::InvalidParameter(m.into()));
        if self.n_classes == 0 || self.planted_per_class == 0 {
            return bad("n_classes and planted_per_class must be at least 1");
        }
        if self.images_per_class == 0 || self.prompts_per_class == 0 {
            return bad("images_per_class and prompts_per_class must be at least 1");
        }
        if self.views_per_image == 0 || self.pool_size == 0 {
            return bad("views_per_image and pool_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.background_fraction) {
            return bad("background_fraction must be in [0, 1]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a non-negative finite number");
        }
        let needed = self.n_classes * self.planted_per_class;
        if self.dim < needed {
            return Err(SynthError::InfeasibleGeometry {
                needed,
                dim: self.dim,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub params: WorldParams,
    pub class_names: Vec<String>,
    /// Concept ids of each class's planted directions.
    pub planted: Vec<Vec<usize>>,
    /// Planted and distractor concepts, shuffled, with embeddings whose row
    /// ids are the concept texts.
    pub concepts: ConceptCatalog,
    /// Labeled prompt embeddings.
    pub prompts: EmbeddingMatrix,
    pub train: EmbeddingMatrix,
    pub test: EmbeddingMatrix,
    /// Un-augmented pool images; group id = pool index.
    pub pool: EmbeddingMatrix,
    /// All views of every pool image, grouped by pool index; view 0 of each
    /// group equals the pool row.
    pub pool_views: EmbeddingMatrix,
    /// Generating class of each pool image, `None` for background.
    pub pool_truth: Vec<Option<u32>>,
}

/// Ground truth as written next to a generated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldTruth {
    pub params: WorldParams,
    pub class_names: Vec<String>,
    pub planted: Vec<Vec<usize>>,
    pub planted_texts: Vec<Vec<String>>,
    pub pool_truth: Vec<Option<u32>>,
}

impl SynthWorld {
    pub fn truth(&self) -> WorldTruth {
        WorldTruth {
            params: self.params.clone(),
            class_names: self.class_names.clone(),
            planted: self.planted.clone(),
            planted_texts: self
                .planted
                .iter()
                .map(|ids| {
                    ids.iter()
                        .map(|&c| self.concepts.text(c).to_owned())
                        .collect()
                })
                .collect(),
            pool_truth: self.pool_truth.clone(),
        }
    }

    /// Normalized mean of class `k`'s planted directions.
    pub fn class_direction(&self, k: usize) -> Vec<f32> {
        let emb = self
            .concepts
            .embeddings()
            .expect("world concepts are embedded");
        let mut mean = vec![0.0f64; emb.dim()];
        for &c in &self.planted[k] {
            for (m, &x) in mean.iter_mut().zip(emb.row(c)) {
                *m += f64::from(x);
            }
        }
        embkit::normalized(&mean).expect("planted directions do not cancel")
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit_f64(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn cos_f64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `normalize(center + noise)` with per-coordinate std `noise / sqrt(dim)`.
fn noisy(rng: &mut ChaCha8Rng, center: &[f64], noise: f64) -> Vec<f32> {
    let std = noise / (center.len() as f64).sqrt();
    let g = gaussian(rng, center.len(), std);
    let v: Vec<f64> = center.iter().zip(&g).map(|(c, e)| c + e).collect();
    embkit::normalized(&v).unwrap_or_else(|| center.iter().map(|&x| x as f32).collect())
}

fn labeled_matrix(
    dim: usize,
    rows: Vec<Vec<f32>>,
    labels: Vec<u32>,
    prefix: &str,
) -> Result<EmbeddingMatrix> {
    let ids = (0..rows.len()).map(|i| format!("{prefix}{i}")).collect();
    let groups = (0..rows.len() as u64).collect();
    Ok(EmbeddingMatrix::new(dim, rows.concat(), ids)?
        .with_labels(labels)?
        .with_groups(groups)?)
}

/// Generates a deterministic world from `params`.
pub fn gen_world(params: &WorldParams) -> Result<SynthWorld> {
    params.validate()?;
    let WorldParams {
        n_classes,
        planted_per_class,
        dim,
        noise,
        ..
    } = *params;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let needed = n_classes * planted_per_class;
    let mut planted_dirs: Vec<Vec<f64>> = Vec::with_capacity(needed);
    while planted_dirs.len() < needed {
        let mut placed = false;
        for _ in 0..MAX_REJECTIONS {
            let v = unit_f64(&mut rng, dim);
            if planted_dirs
                .iter()
                .all(|p| cos_f64(p, &v) < PLANTED_MAX_COSINE)
            {
                planted_dirs.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::InfeasibleGeometry { needed, dim });
        }
    }

    // concept slots: planted (class-major) then distractors, shuffled into ids
    let n_concepts = needed + params.n_distractors;
    let mut slot_of_id: Vec<usize> = (0..n_concepts).collect();
    slot_of_id.shuffle(&mut rng);
    let mut id_of_slot = vec![0; n_concepts];
    for (id, &slot) in slot_of_id.iter().enumerate() {
        id_of_slot[slot] = id;
    }
    let distractors: Vec<Vec<f64>> = (0..params.n_distractors)
        .map(|_| unit_f64(&mut rng, dim))
        .collect();
    let slot_text = |slot: usize| {
        if slot < needed {
            format!(
                "trait-{}-{}",
                slot / planted_per_class,
                slot % planted_per_class
            )
        } else {
            format!("distractor-{}", slot - needed)
        }
    };
    let texts: Vec<String> = slot_of_id.iter().map(|&s| slot_text(s)).collect();
    let mut concept_data = Vec::with_capacity(n_concepts * dim);
    for &slot in &slot_of_id {
        let v = if slot < needed {
            &planted_dirs[slot]
        } else {
            &distractors[slot - needed]
        };
        concept_data.extend(v.iter().map(|&x| x as f32));
    }
    let concepts =
        ConceptCatalog::from_texts(texts.iter().map(|t| (t.clone(), ConceptKind::Atomic)))?
            .with_embeddings(EmbeddingMatrix::new(dim, concept_data, texts)?)?;
    let planted: Vec<Vec<usize>> = (0..n_classes)
        .map(|k| {
            (0..planted_per_class)
                .map(|j| id_of_slot[k * planted_per_class + j])
                .collect()
        })
        .collect();

    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|k| {
            let mut m = vec![0.0; dim];
            for p in &planted_dirs[k * planted_per_class..(k + 1) * planted_per_class] {
                for (a, b) in m.iter_mut().zip(p) {
                    *a += b / planted_per_class as f64;
                }
            }
            m
        })
        .collect();

    let mut sample_labeled = |per_class: usize, prefix: &str| -> Result<EmbeddingMatrix> {
        let mut rows = Vec::with_capacity(per_class * n_classes);
        let mut labels = Vec::with_capacity(per_class * n_classes);
        for (k, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                rows.push(noisy(&mut rng, center, noise));
                labels.push(k as u32);
            }
        }
        labeled_matrix(dim, rows, labels, prefix)
    };
    let prompts = sample_labeled(params.prompts_per_class, "prompt")?;
    let train = sample_labeled(params.images_per_class, "train")?;
    let test = sample_labeled(params.test_per_class, "test")?;

    let n_background = (params.background_fraction * params.pool_size as f64).round() as usize;
    let mut pool_truth: Vec<Option<u32>> = (0..params.pool_size)
        .map(|i| (i >= n_background).then_some((i % n_classes) as u32))
        .collect();
    pool_truth.shuffle(&mut rng);
    let mut pool_rows = Vec::with_capacity(params.pool_size);
    let mut view_rows = Vec::with_capacity(params.pool_size * params.views_per_image);
    for truth in &pool_truth {
        let image = match truth {
            Some(k) => noisy(&mut rng, &centers[*k as usize], noise),
            None => unit_f64(&mut rng, dim)
                .into_iter()
                .map(|x| x as f32)
                .collect(),
        };
        let center: Vec<f64> = image.iter().map(|&x| f64::from(x)).collect();
        view_rows.push(image.clone());
        for _ in 1..params.views_per_image {
            view_rows.push(noisy(&mut rng, &center, noise));
        }
        pool_rows.push(image);
    }
    let pool = EmbeddingMatrix::new(
        dim,
        pool_rows.concat(),
        (0..params.pool_size).map(|i| format!("pool{i}")).collect(),
    )?
    .with_groups((0..params.pool_size as u64).collect())?;
    let v = params.views_per_image;
    let pool_views = EmbeddingMatrix::new(
        dim,
        view_rows.concat(),
        (0..params.pool_size * v)
            .map(|r| format!("pool{}#v{}", r / v, r % v))
            .collect(),
    )?
    .with_groups(
        (0..(params.pool_size * v) as u64)
            .map(|r| r / v as u64)
            .collect(),
    )?;

    Ok(SynthWorld {
        params: params.clone(),
        class_names: (0..n_classes).map(|k| format!("class{k}")).collect(),
        planted,
        concepts,
        prompts,
        train,
        test,
        pool,
        pool_views,
        pool_truth,
    })
}

/// Per class, the fraction of its planted concepts present in its codebook
/// list. Codebook source ids must refer to the world's concept ids.
pub fn recovery_score(codebook: &Codebook, world: &SynthWorld) -> Vec<f64> {
    world
        .planted
        .iter()
        .enumerate()
        .map(|(k, planted)| {
            let list = if k < codebook.n_classes() {
                codebook.class_source_ids(k)
            } else {
                Vec::new()
            };
            let hit = planted.iter().filter(|c| list.contains(c)).count();
            hit as f64 / planted.len() as f64
        })
        .collect()
}

/// Copy of `m` with its label vector randomly permuted across rows.
pub fn shuffle_labels(m: &EmbeddingMatrix, seed: u64) -> Result<EmbeddingMatrix> {
    let mut labels = m
        .labels()
        .ok_or_else(|| SynthError::InvalidParameter("matrix has no labels".into()))?
        .to_vec();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(m.clone().with_labels(labels)?)
}

/// Copy of `m` with every label `l` replaced by `perm[l]`.
pub fn relabel(m: &EmbeddingMatrix, perm: &[u32]) -> Result<EmbeddingMatrix> {
    let labels = m
        .labels()
        .ok_or_else(|| SynthError::InvalidParameter("matrix has no labels".into()))?
        .iter()
        .map(|&l| perm[l as usize])
        .collect();
    Ok(m.clone().with_labels(labels)?)
}

/// Similarity used by [`oracle_topk`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    Dot,
    /// Squared Euclidean distance, smallest first.
    Euclidean,
}

/// Exhaustive top-`k` by full stable sort over `f64` scores; ties keep the
/// lower row index. Zero-norm rows score 0 under cosine.
pub fn oracle_topk(
    query: &[f32],
    matrix: &EmbeddingMatrix,
    k: usize,
    metric: Metric,
) -> Result<TopKResult> {
    if query.len() != matrix.dim() {
        return Err(EmbError::DimMismatch {
            context: "oracle query vs matrix",
            expected: matrix.dim(),
            found: query.len(),
        }
        .into());
    }
    let q: Vec<f64> = query.iter().map(|&x| f64::from(x)).collect();
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(matrix.rows());
    for i in 0..matrix.rows() {
        let r: Vec<f64> = matrix.row(i).iter().map(|&x| f64::from(x)).collect();
        let mut dot = 0.0;
        let mut rn = 0.0;
        let mut dist = 0.0;
        for (a, b) in q.iter().zip(&r) {
            dot += a * b;
            rn += b * b;
            dist += (a - b) * (a - b);
        }
        let s = match metric {
            Metric::Dot => dot,
            Metric::Euclidean => dist,
            Metric::Cosine => {
                let denom = qn * rn.sqrt();
                if denom == 0.0 {
                    0.0
                } else {
                    dot / denom
                }
            }
        };
        scored.push((i, s));
    }
    match metric {
        Metric::Euclidean => scored.sort_by(|a, b| a.1.total_cmp(&b.1)),
        _ => scored.sort_by(|a, b| b.1.total_cmp(&a.1)),
    }
    scored.truncate(k);
    Ok(TopKResult {
        indices: scored.iter().map(|s| s.0).collect(),
        scores: scored.iter().map(|s| s.1 as f32).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldParams {
        WorldParams {
            n_classes: 4,
            planted_per_class: 2,
            n_distractors: 30,
            images_per_class: 5,
            test_per_class: 3,
            prompts_per_class: 2,
            pool_size: 50,
            views_per_image: 2,
            dim: 16,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = gen_world(&small()).unwrap();
        assert_eq!(a, gen_world(&small()).unwrap());
        let b = gen_world(&WorldParams { seed: 1, ..small() }).unwrap();
        assert_ne!(a.pool, b.pool);
    }

    #[test]
    fn shapes_and_groups() {
        let w = gen_world(&small()).unwrap();
        assert_eq!(w.concepts.len(), 4 * 2 + 30);
        assert_eq!(w.train.rows(), 20);
        assert_eq!(w.test.rows(), 12);
        assert_eq!(w.prompts.rows(), 8);
        assert_eq!(w.pool.rows(), 50);
        assert_eq!(w.pool_views.rows(), 100);
        assert_eq!(w.pool_views.groups().unwrap()[..4], [0, 0, 1, 1]);
        assert_eq!(w.pool_views.row(2), w.pool.row(1));
        assert_eq!(w.pool_truth.iter().filter(|t| t.is_none()).count(), 10);
        for m in [&w.train, &w.test, &w.prompts, &w.pool, &w.pool_views] {
            m.check_normalized(1e-5).unwrap();
        }
        let mut ids: Vec<usize> = w.planted.concat();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 8);
    }

    #[test]
    fn planted_directions_are_separated() {
        let w = gen_world(&WorldParams::default()).unwrap();
        let emb = w.concepts.embeddings().unwrap();
        let all = w.planted.concat();
        for (i, &a) in all.iter().enumerate() {
            for &b in &all[i + 1..] {
                assert!(embkit::dot(emb.row(a), emb.row(b)) < PLANTED_MAX_COSINE);
            }
        }
    }

    #[test]
    fn noiseless_images_nearest_planted() {
        let w = gen_world(&WorldParams {
            noise: 0.0,
            ..small()
        })
        .unwrap();
        let emb = w.concepts.embeddings().unwrap();
        for (row, &label) in w.train.iter_rows().zip(w.train.labels().unwrap()) {
            let top = embkit::cosine_topk(row, emb, 1).unwrap().indices[0];
            assert!(w.planted[label as usize].contains(&top));
        }
    }

    #[test]
    fn too_small_dimension() {
        let p = WorldParams { dim: 7, ..small() };
        assert!(matches!(
            gen_world(&p),
            Err(SynthError::InfeasibleGeometry { needed: 8, dim: 7 })
        ));
    }

    #[test]
    fn truth_texts_follow_ids() {
        let w = gen_world(&small()).unwrap();
        let t = w.truth();
        assert_eq!(t.planted_texts[2][1], "trait-2-1");
        assert_eq!(w.concepts.text(t.planted[2][1]), "trait-2-1");
    }

    #[test]
    fn oracle_full_permutation_and_metrics() {
        let m =
            EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]).unwrap();
        let q = [0.8f32, 0.6];
        let cos = oracle_topk(&q, &m, 3, Metric::Cosine).unwrap();
        assert_eq!(cos.indices, vec![2, 0, 1]);
        assert_eq!(
            oracle_topk(&q, &m, 3, Metric::Euclidean).unwrap().indices,
            cos.indices
        );
        assert_eq!(
            oracle_topk(&q, &m, 3, Metric::Dot).unwrap().indices,
            cos.indices
        );
        assert!(oracle_topk(&[1.0], &m, 1, Metric::Dot).is_err());
    }

    #[test]
    fn oracle_ties_keep_lower_index() {
        let m =
            EmbeddingMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(
            oracle_topk(&[1.0, 0.0], &m, 2, Metric::Cosine)
                .unwrap()
                .indices,
            vec![1, 2]
        );
    }

    #[test]
    fn label_helpers() {
        let w = gen_world(&small()).unwrap();
        let s = shuffle_labels(&w.train, 3).unwrap();
        let mut a = s.labels().unwrap().to_vec();
        a.sort_unstable();
        assert_eq!(a, w.train.labels().unwrap());
        let r = relabel(&w.train, &[1, 2, 3, 0]).unwrap();
        assert_eq!(r.labels().unwrap()[0], 1);
    }
}
