//! Concept-bottleneck classifier.
//!
//! Class scores are `ŷ = A · softmax_rows(W)ᵀ`: each class scores an image by
//! a convex combination of its concept activations, with the mixing weights
//! given by a softmax over the concept axis of that class's row of `W`.
//! Training minimizes cross-entropy of a class-axis softmax over `ŷ` with Adam.
//!
//! All arithmetic here is `f64`; activations arrive as `f32` cosine scores.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embkit::{self, EmbError, EmbeddingMatrix};
use crate::tokenizer::Bottleneck;

/// Standard deviation of random weight initialization.
pub const RANDOM_INIT_STD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum CbmError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("class {class} out of range for {n_classes} classes")]
    BadClass { class: usize, n_classes: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("activation {value} at ({row}, {col}) outside [-1, 1]")]
    InvalidActivation { row: usize, col: usize, value: f64 },
    #[error("weight matrix has a non-finite entry at ({row}, {col})")]
    NonFiniteWeight { row: usize, col: usize },
    #[error(transparent)]
    Embedding(#[from] EmbError),
}

pub type Result<T, E = CbmError> = std::result::Result<T, E>;

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CbmError::ShapeMismatch(msg.into()))
}

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!("buffer of {} for {rows}x{cols}", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Cosine scores between images and bottleneck concepts, `batch x N_C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptActivations(Matrix);

impl ConceptActivations {
    /// Wraps raw scores; every entry must lie in `[-1, 1]`.
    pub fn new(m: Matrix) -> Result<Self> {
        for (idx, &v) in m.data.iter().enumerate() {
            if !(-1.0..=1.0).contains(&v) {
                return Err(CbmError::InvalidActivation {
                    row: idx / m.cols.max(1),
                    col: idx % m.cols.max(1),
                    value: v,
                });
            }
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn batch(&self) -> usize {
        self.0.rows
    }

    pub fn n_concepts(&self) -> usize {
        self.0.cols
    }

    /// Activations of the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.0.cols);
        for &r in rows {
            data.extend_from_slice(self.0.row(r));
        }
        Self(Matrix {
            rows: rows.len(),
            cols: self.0.cols,
            data,
        })
    }
}

/// Class-concept weights, `N x N_C`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(Matrix);

impl WeightMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if let Some(idx) = m.data.iter().position(|v| !v.is_finite()) {
            return Err(CbmError::NonFiniteWeight {
                row: idx / m.cols.max(1),
                col: idx % m.cols.max(1),
            });
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn n_classes(&self) -> usize {
        self.0.rows
    }

    pub fn n_concepts(&self) -> usize {
        self.0.cols
    }

    /// Returns a copy with `shift[k]` added to every entry of row `k`.
    pub fn shifted(&self, shift: &[f64]) -> Self {
        let mut m = self.0.clone();
        for (k, s) in shift.iter().enumerate().take(m.rows) {
            m.row_mut(k).iter_mut().for_each(|w| *w += s);
        }
        Self(m)
    }

    /// Row-wise softmax along the concept axis.
    pub fn concept_distribution(&self) -> Matrix {
        let mut out = self.0.clone();
        for k in 0..out.rows {
            softmax_in_place(out.row_mut(k));
        }
        out
    }

    /// `f32` checkpoint form, one row per class.
    pub fn to_embedding_matrix(&self) -> Result<EmbeddingMatrix> {
        let ids = (0..self.0.rows).map(|k| format!("class{k}")).collect();
        Ok(EmbeddingMatrix::new(
            self.0.cols,
            self.0.data.iter().map(|&x| x as f32).collect(),
            ids,
        )?)
    }

    pub fn from_embedding_matrix(m: &EmbeddingMatrix) -> Result<Self> {
        Self::new(Matrix {
            rows: m.rows(),
            cols: m.dim(),
            data: m.data().iter().map(|&x| f64::from(x)).collect(),
        })
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `log(sum(exp(row)))` computed with max-subtraction.
fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lower index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cosine scores of every image against the bottleneck's union concepts.
pub fn activations(images: &EmbeddingMatrix, b: &Bottleneck) -> Result<ConceptActivations> {
    let sim = embkit::batch_similarity(images, b.embeddings())?;
    Ok(ConceptActivations(Matrix {
        rows: sim.rows(),
        cols: sim.cols(),
        data: sim.data().iter().map(|&x| f64::from(x)).collect(),
    }))
}

/// Binary weights: 1 where a union concept is in the class's bottleneck list.
pub fn init_prior(b: &Bottleneck) -> WeightMatrix {
    let mut m = Matrix::zeros(b.n_classes(), b.n_concepts());
    for (k, list) in b.per_class().iter().enumerate() {
        for &j in list {
            m.set(k, j, 1.0);
        }
    }
    WeightMatrix(m)
}

/// I.i.d. `Normal(0, 0.01)` weights from a seeded ChaCha stream.
pub fn init_random(n_classes: usize, n_concepts: usize, seed: u64) -> WeightMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, RANDOM_INIT_STD).expect("valid std");
    let data = (0..n_classes * n_concepts)
        .map(|_| normal.sample(&mut rng))
        .collect();
    WeightMatrix(Matrix {
        rows: n_classes,
        cols: n_concepts,
        data,
    })
}

fn check_shapes(a: &ConceptActivations, w: &WeightMatrix) -> Result<()> {
    if a.n_concepts() != w.n_concepts() {
        return shape_err(format!(
            "activations have {} concepts, weights {}",
            a.n_concepts(),
            w.n_concepts()
        ));
    }
    Ok(())
}

fn check_labels(a: &ConceptActivations, labels: &[usize], n_classes: usize) -> Result<()> {
    if labels.len() != a.batch() {
        return shape_err(format!(
            "{} labels for {} activation rows",
            labels.len(),
            a.batch()
        ));
    }
    if let Some(&class) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(CbmError::BadClass { class, n_classes });
    }
    Ok(())
}

/// `ŷ[b][k] = Σ_j A[b][j] · σ(W)[k][j]`.
fn scores_with(a: &Matrix, s: &Matrix) -> Matrix {
    let mut y = Matrix::zeros(a.rows, s.rows);
    for b in 0..a.rows {
        let ab = a.row(b);
        for k in 0..s.rows {
            y.data[b * s.rows + k] = ab.iter().zip(s.row(k)).map(|(x, w)| x * w).sum();
        }
    }
    y
}

/// Class scores `A · σ(W)ᵀ`, shape `batch x N`.
pub fn forward(a: &ConceptActivations, w: &WeightMatrix) -> Result<Matrix> {
    check_shapes(a, w)?;
    Ok(scores_with(&a.0, &w.concept_distribution()))
}

struct BatchStats {
    loss_sum: f64,
    correct: usize,
}

/// Loss statistics over `rows` and, when `grad` is given, the gradient of the
/// mean loss over those rows accumulated into it.
fn batch_pass(
    a: &Matrix,
    labels: &[usize],
    rows: &[usize],
    s: &Matrix,
    grad: Option<&mut Matrix>,
) -> BatchStats {
    let n = s.rows;
    let mut stats = BatchStats {
        loss_sum: 0.0,
        correct: 0,
    };
    // dL/dσ(W), accumulated over the batch
    let mut g = grad.as_ref().map(|_| Matrix::zeros(n, s.cols));
    let inv_b = 1.0 / rows.len().max(1) as f64;
    let mut y = vec![0.0; n];
    for &r in rows {
        let ar = a.row(r);
        for (k, yk) in y.iter_mut().enumerate() {
            *yk = ar.iter().zip(s.row(k)).map(|(x, w)| x * w).sum();
        }
        let lse = log_sum_exp(&y);
        stats.loss_sum += lse - y[labels[r]];
        if argmax(&y) == labels[r] {
            stats.correct += 1;
        }
        if let Some(g) = g.as_mut() {
            for (k, &yk) in y.iter().enumerate() {
                let p = (yk - lse).exp();
                let dy = (p - if k == labels[r] { 1.0 } else { 0.0 }) * inv_b;
                if dy != 0.0 {
                    for (gk, &x) in g.row_mut(k).iter_mut().zip(ar) {
                        *gk += dy * x;
                    }
                }
            }
        }
    }
    if let (Some(g), Some(out)) = (g, grad) {
        // chain rule through the row softmax: dW = S ⊙ (G − ⟨S, G⟩_row)
        for k in 0..n {
            let sk = s.row(k);
            let gk = g.row(k);
            let inner: f64 = sk.iter().zip(gk).map(|(a, b)| a * b).sum();
            for ((o, &sj), &gj) in out.row_mut(k).iter_mut().zip(sk).zip(gk) {
                *o = sj * (gj - inner);
            }
        }
    }
    stats
}

/// Mean cross-entropy of the class softmax over `ŷ`.
pub fn loss(a: &ConceptActivations, labels: &[usize], w: &WeightMatrix) -> Result<f64> {
    check_shapes(a, w)?;
    check_labels(a, labels, w.n_classes())?;
    let rows: Vec<usize> = (0..a.batch()).collect();
    let st = batch_pass(&a.0, labels, &rows, &w.concept_distribution(), None);
    Ok(st.loss_sum / a.batch().max(1) as f64)
}

/// Analytic `∂L/∂W` of the mean batch cross-entropy.
pub fn gradient(a: &ConceptActivations, labels: &[usize], w: &WeightMatrix) -> Result<Matrix> {
    check_shapes(a, w)?;
    check_labels(a, labels, w.n_classes())?;
    let rows: Vec<usize> = (0..a.batch()).collect();
    let mut grad = Matrix::zeros(w.n_classes(), w.n_concepts());
    batch_pass(
        &a.0,
        labels,
        &rows,
        &w.concept_distribution(),
        Some(&mut grad),
    );
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Prior,
    Random,
    /// Prior for 1- and 2-shot training, random otherwise.
    #[default]
    Auto,
}

impl InitMode {
    /// Concrete mode for a run with `shots` labeled images per class
    /// (`None` = all available).
    pub fn resolve(self, shots: Option<usize>) -> InitMode {
        match self {
            InitMode::Auto => match shots {
                Some(s) if s <= 2 => InitMode::Prior,
                _ => InitMode::Random,
            },
            m => m,
        }
    }
}

impl FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "prior" => Ok(Self::Prior),
            "random" => Ok(Self::Random),
            "auto" => Ok(Self::Auto),
            _ => Err(format!(
                "unknown init mode {s:?} (expected prior|random|auto)"
            )),
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Prior => "prior",
            Self::Random => "random",
            Self::Auto => "auto",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub init: InitMode,
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    /// CUB full-shot settings.
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 512,
            max_epochs: 5000,
            seed: 0,
            init: InitMode::Auto,
            adam: AdamParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CbmError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a positive finite number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        let AdamParams { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return bad("adam betas must be in [0, 1) and eps positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's mini-batches (pre-update).
    pub loss: f64,
    /// Training accuracy over the epoch's mini-batches (pre-update).
    pub accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub weights: WeightMatrix,
    /// Train-set metrics of the returned weights, plus per-epoch history.
    pub metrics: Metrics,
    /// Epoch (1-based) whose weights were returned.
    pub selected_epoch: usize,
}

/// Held-out split used for checkpoint selection.
pub struct Validation<'a> {
    pub activations: &'a ConceptActivations,
    pub labels: &'a [usize],
}

/// Adam over seeded-shuffled mini-batches. With a validation split the
/// weights of the first epoch reaching the best validation accuracy are
/// returned; otherwise the final weights.
pub fn train(
    a: &ConceptActivations,
    labels: &[usize],
    cfg: &TrainConfig,
    w0: WeightMatrix,
    validation: Option<Validation<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_shapes(a, &w0)?;
    check_labels(a, labels, w0.n_classes())?;
    if let Some(v) = &validation {
        check_shapes(v.activations, &w0)?;
        check_labels(v.activations, v.labels, w0.n_classes())?;
    }
    if a.batch() == 0 {
        return shape_err("no training rows");
    }

    let AdamParams { beta1, beta2, eps } = cfg.adam;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = w0.0;
    let mut m1 = vec![0.0; w.data.len()];
    let mut m2 = vec![0.0; w.data.len()];
    let mut grad = Matrix::zeros(w.rows, w.cols);
    let mut order: Vec<usize> = (0..a.batch()).collect();
    let mut step = 0i32;
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(f64, usize, Matrix)> = None;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut s = w.clone();
            for k in 0..s.rows {
                softmax_in_place(s.row_mut(k));
            }
            let st = batch_pass(&a.0, labels, batch, &s, Some(&mut grad));
            if !st.loss_sum.is_finite() {
                return Err(CbmError::NonFiniteLoss { epoch });
            }
            loss_sum += st.loss_sum;
            correct += st.correct;

            step += 1;
            let bc1 = 1.0 - beta1.powi(step);
            let bc2 = 1.0 - beta2.powi(step);
            for (((wi, &gi), mi), vi) in w
                .data
                .iter_mut()
                .zip(&grad.data)
                .zip(m1.iter_mut())
                .zip(m2.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *wi -= cfg.learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        let mut rec = EpochRecord {
            epoch,
            loss: loss_sum / a.batch() as f64,
            accuracy: correct as f64 / a.batch() as f64,
            val_loss: None,
            val_accuracy: None,
        };
        if let Some(v) = &validation {
            let vm = evaluate(v.activations, v.labels, &WeightMatrix(w.clone()))?;
            rec.val_loss = Some(vm.loss);
            rec.val_accuracy = Some(vm.accuracy);
            if best.as_ref().is_none_or(|(acc, _, _)| vm.accuracy > *acc) {
                best = Some((vm.accuracy, epoch, w.clone()));
            }
        }
        history.push(rec);
    }

    let (weights, selected_epoch) = match best {
        Some((_, epoch, bw)) => (WeightMatrix(bw), epoch),
        None => (WeightMatrix(w), cfg.max_epochs),
    };
    let mut metrics = evaluate(a, labels, &weights)?;
    if !metrics.loss.is_finite() {
        return Err(CbmError::NonFiniteLoss {
            epoch: selected_epoch,
        });
    }
    metrics.history = history;
    Ok(TrainOutcome {
        weights,
        metrics,
        selected_epoch,
    })
}

/// Predicted class per row: argmax of `ŷ`, ties to the lower class index.
pub fn predict(a: &ConceptActivations, w: &WeightMatrix) -> Result<Vec<usize>> {
    let y = forward(a, w)?;
    Ok((0..y.rows).map(|b| argmax(y.row(b))).collect())
}

/// Top-1 accuracy and mean cross-entropy.
pub fn evaluate(a: &ConceptActivations, labels: &[usize], w: &WeightMatrix) -> Result<Metrics> {
    check_shapes(a, w)?;
    check_labels(a, labels, w.n_classes())?;
    let rows: Vec<usize> = (0..a.batch()).collect();
    let st = batch_pass(&a.0, labels, &rows, &w.concept_distribution(), None);
    let n = a.batch().max(1) as f64;
    Ok(Metrics {
        accuracy: st.correct as f64 / n,
        loss: st.loss_sum / n,
        history: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    /// Union concept index in the bottleneck.
    pub concept: usize,
    pub text: String,
    /// Softmax weight of the concept within the class row.
    pub weight: f64,
}

/// The class's `top_n` concepts by softmax weight, ties to the lower index.
///
/// Ranking uses the raw row of `W` (softmax is monotone within a row), so the
/// order is unaffected by adding a constant to the row.
pub fn explain_class(
    w: &WeightMatrix,
    b: &Bottleneck,
    class: usize,
    top_n: usize,
) -> Result<Vec<Explanation>> {
    if class >= w.n_classes() {
        return Err(CbmError::BadClass {
            class,
            n_classes: w.n_classes(),
        });
    }
    if w.n_concepts() != b.n_concepts() {
        return shape_err(format!(
            "weights cover {} concepts, bottleneck {}",
            w.n_concepts(),
            b.n_concepts()
        ));
    }
    let row = w.0.row(class);
    let mut dist = row.to_vec();
    softmax_in_place(&mut dist);
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
    Ok(order
        .into_iter()
        .take(top_n)
        .map(|j| Explanation {
            concept: j,
            text: b.concepts().text(j).to_owned(),
            weight: dist[j],
        })
        .collect())
}
