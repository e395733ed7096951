//! File-to-file pipeline stages.
//!
//! Each stage reads its inputs from configured paths or from artifacts of
//! earlier stages in the output directory, writes its artifacts atomically,
//! and records a manifest with the resolved parameters, a hash of those
//! parameters, and SHA-256 digests of every input and output. Wall-clock
//! timings go to a separate `<stage>.timing.json` so that manifests are
//! byte-identical across reruns.

mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;
use thiserror::Error;

use crate::cbm::{self, CbmError, InitMode, Validation, WeightMatrix};
use crate::conceptfilter::{self, Codebook, CodebookManifest, FilterError};
use crate::embkit::{self, EmbError, EmbeddingMatrix};
use crate::quantset::{self, BaseSource, QuantSet, QuantSetError};
use crate::synth::{self, SynthError};
use crate::tokenizer::{Bottleneck, BottleneckManifest, TokenizerError, V2CTokenizer};
use crate::vocab::{self, ConceptCatalog, Lexicon, RelationSet, VocabError};

pub use config::{synth_config_text, RawConfig, RunConfig, PATH_KEYS};

/// Artifact file names inside the output directory.
pub mod artifacts {
    pub const CONCEPTS: &str = "concepts.jsonl";
    pub const QUANTSET: &str = "quantset.json";
    pub const FREQUENCIES: &str = "frequencies.json";
    pub const CODEBOOK: &str = "codebook.json";
    pub const CODEBOOK_CONCEPTS: &str = "codebook_concepts.jsonl";
    pub const CODEBOOK_EMBEDDINGS: &str = "codebook.v2ce";
    pub const BOTTLENECK: &str = "bottleneck.json";
    pub const BOTTLENECK_EMBEDDINGS: &str = "bottleneck.v2ce";
    pub const WEIGHTS: &str = "weights.v2ce";
    pub const TRAIN_METRICS: &str = "train_metrics.json";
    pub const EVAL: &str = "eval.json";
    pub const EXPLANATIONS_TXT: &str = "explanations.txt";
    pub const EXPLANATIONS_JSON: &str = "explanations.json";
    pub const CONFIG: &str = "v2c.conf";
    pub const TRUTH: &str = "truth.json";
    pub const LOCK: &str = ".v2c.lock";
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input artifact: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("output directory {} is locked by another run (remove {} if stale)", .0.display(), .0.join(artifacts::LOCK).display())]
    Locked(PathBuf),
    #[error("invalid input {}: {msg}", path.display())]
    BadInput { path: PathBuf, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Embedding(#[from] EmbError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    QuantSet(#[from] QuantSetError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Cbm(#[from] CbmError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl PipelineError {
    /// Process exit status: 2 config, 3 missing input, 4 numeric failure,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::MissingInput(_) => 3,
            Self::Cbm(CbmError::NonFiniteLoss { .. } | CbmError::NonFiniteWeight { .. }) => 4,
            Self::QuantSet(QuantSetError::DegenerateBase(_)) => 4,
            Self::Synth(
                SynthError::InvalidParameter(_) | SynthError::InfeasibleGeometry { .. },
            ) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Vocab,
    Quantset,
    Filter,
    Tokenize,
    Train,
    Eval,
    Explain,
    Synth,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Vocab,
        Stage::Quantset,
        Stage::Filter,
        Stage::Tokenize,
        Stage::Train,
        Stage::Eval,
        Stage::Explain,
        Stage::Synth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Vocab => "vocab",
            Stage::Quantset => "quantset",
            Stage::Filter => "filter",
            Stage::Tokenize => "tokenize",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Explain => "explain",
            Stage::Synth => "synth",
        }
    }

    /// Parameters that affect this stage's outputs.
    fn param_keys(self) -> &'static [&'static str] {
        match self {
            Stage::Vocab => &[
                "top_n",
                "max_adj",
                "max_noun",
                "bigram_cap",
                "trigram_cap",
                "leakage",
            ],
            Stage::Quantset => &["base_source", "per_class", "shots"],
            Stage::Filter => &["k", "m", "min_count"],
            Stage::Tokenize => &["tokens_per_image", "concepts_per_class", "shots"],
            Stage::Train => &["lr", "batch", "epochs", "seed", "init", "shots"],
            Stage::Eval => &[],
            Stage::Explain => &["explain_top"],
            Stage::Synth => &[
                "seed",
                "synth.classes",
                "synth.planted",
                "synth.distractors",
                "synth.images_per_class",
                "synth.test_per_class",
                "synth.prompts_per_class",
                "synth.pool_size",
                "synth.background_fraction",
                "synth.views",
                "synth.dim",
                "synth.noise",
            ],
        }
    }

    pub fn manifest_name(self) -> String {
        format!("{}.manifest.json", self.name())
    }

    pub fn timing_name(self) -> String {
        format!("{}.timing.json", self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub params: BTreeMap<String, String>,
    pub config_hash: String,
    /// Input name to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub report: Value,
}

/// What a stage wrote, for callers that print a summary.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub manifest: Manifest,
    pub seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn config_hash(params: &BTreeMap<String, String>) -> String {
    let canonical: String = params.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    sha256_hex(canonical.as_bytes())
}

struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(artifacts::LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(dir.to_path_buf()))
            }
            Err(source) => Err(PipelineError::Io { path, source }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Input reader that hashes everything it loads.
struct Inputs {
    hashes: BTreeMap<String, String>,
}

impl Inputs {
    fn bytes(&mut self, name: &str, path: &Path) -> Result<Vec<u8>> {
        if !path.is_file() {
            return Err(PipelineError::MissingInput(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.hashes.insert(name.to_owned(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn v2ce(&mut self, name: &str, path: &Path) -> Result<EmbeddingMatrix> {
        let bytes = self.bytes(name, path)?;
        embkit::read_v2ce(&bytes[..]).map_err(|e| bad_input(path, e))
    }

    fn json<T: for<'de> Deserialize<'de>>(&mut self, name: &str, path: &Path) -> Result<T> {
        let bytes = self.bytes(name, path)?;
        serde_json::from_slice(&bytes).map_err(|e| bad_input(path, e))
    }

    fn catalog(&mut self, name: &str, path: &Path) -> Result<ConceptCatalog> {
        let bytes = self.bytes(name, path)?;
        ConceptCatalog::read_jsonl(&bytes[..]).map_err(|e| bad_input(path, e))
    }

    fn lines(&mut self, name: &str, path: &Path) -> Result<Vec<String>> {
        let bytes = self.bytes(name, path)?;
        let mut out = Vec::new();
        for line in BufReader::new(&bytes[..]).lines() {
            let line = line.map_err(|e| bad_input(path, e))?;
            let line = line.trim();
            if !line.is_empty() {
                out.push(line.to_owned());
            }
        }
        Ok(out)
    }
}

fn bad_input(path: &Path, e: impl fmt::Display) -> PipelineError {
    PipelineError::BadInput {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Atomic writer that hashes everything it writes.
struct Outputs<'a> {
    dir: &'a Path,
    hashes: BTreeMap<String, String>,
}

impl Outputs<'_> {
    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        let io = |source| PipelineError::Io {
            path: path.clone(),
            source,
        };
        let mut tmp = NamedTempFile::new_in(self.dir).map_err(io)?;
        tmp.write_all(bytes).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(&path).map_err(|e| io(e.error))?;
        self.hashes.insert(name.to_owned(), sha256_hex(bytes));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut buf = serde_json::to_vec_pretty(value).expect("artifact types serialize");
        buf.push(b'\n');
        self.bytes(name, &buf)
    }

    fn v2ce(&mut self, name: &str, m: &EmbeddingMatrix) -> Result<()> {
        let mut buf = Vec::new();
        embkit::write_v2ce(m, &mut buf)?;
        self.bytes(name, &buf)
    }

    fn catalog(&mut self, name: &str, cat: &ConceptCatalog) -> Result<()> {
        let mut buf = Vec::new();
        cat.write_jsonl(&mut buf)?;
        self.bytes(name, &buf)
    }
}

/// Runs one stage against `cfg`, writing artifacts into `cfg.out`.
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<StageOutcome> {
    let dir = cfg.out.as_path();
    fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let _lock = DirLock::acquire(dir)?;
    let start = Instant::now();
    let mut inputs = Inputs {
        hashes: BTreeMap::new(),
    };
    let mut outputs = Outputs {
        dir,
        hashes: BTreeMap::new(),
    };
    let report = match stage {
        Stage::Vocab => run_vocab(cfg, &mut inputs, &mut outputs),
        Stage::Quantset => run_quantset(cfg, &mut inputs, &mut outputs),
        Stage::Filter => run_filter(cfg, &mut inputs, &mut outputs),
        Stage::Tokenize => run_tokenize(cfg, &mut inputs, &mut outputs),
        Stage::Train => run_train(cfg, &mut inputs, &mut outputs),
        Stage::Eval => run_eval(cfg, &mut inputs, &mut outputs),
        Stage::Explain => run_explain(cfg, &mut inputs, &mut outputs),
        Stage::Synth => run_synth(cfg, &mut outputs),
    }?;
    let params = cfg.params(stage.param_keys());
    let manifest = Manifest {
        stage: stage.name().to_owned(),
        version: env!("CARGO_PKG_VERSION").to_owned(),
        config_hash: config_hash(&params),
        params,
        inputs: inputs.hashes,
        outputs: outputs.hashes.clone(),
        report,
    };
    outputs.json(&stage.manifest_name(), &manifest)?;
    let seconds = start.elapsed().as_secs_f64();
    outputs.json(
        &stage.timing_name(),
        &json!({ "stage": stage.name(), "seconds": seconds }),
    )?;
    Ok(StageOutcome { manifest, seconds })
}

fn artifact(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out.join(name)
}

fn class_names(cfg: &RunConfig, inputs: &mut Inputs) -> Result<Option<Vec<String>>> {
    match cfg.optional_path("class_names") {
        Some(p) => Ok(Some(inputs.lines("class_names", p)?)),
        None => Ok(None),
    }
}

/// Class count from the class-name list if given, else from the labels.
fn n_classes(names: Option<&[String]>, labeled: &EmbeddingMatrix, path: &Path) -> Result<usize> {
    let labels = labeled
        .labels()
        .ok_or_else(|| bad_input(path, "embeddings carry no labels"))?;
    Ok(match names {
        Some(n) => n.len(),
        None => labels.iter().max().map_or(0, |&m| m as usize + 1),
    })
}

/// The first `shots` rows of each class, in file order.
fn take_shots(m: &EmbeddingMatrix, shots: Option<usize>, path: &Path) -> Result<EmbeddingMatrix> {
    let Some(shots) = shots else {
        return Ok(m.clone());
    };
    let labels = m
        .labels()
        .ok_or_else(|| bad_input(path, "embeddings carry no labels"))?;
    let mut taken: BTreeMap<u32, usize> = BTreeMap::new();
    let rows: Vec<usize> = (0..m.rows())
        .filter(|&i| {
            let t = taken.entry(labels[i]).or_insert(0);
            *t += 1;
            *t <= shots
        })
        .collect();
    Ok(m.select_rows(&rows)?)
}

fn run_vocab(cfg: &RunConfig, inputs: &mut Inputs, out: &mut Outputs) -> Result<Value> {
    let lex_path = cfg.path("lexicon")?;
    let lex_bytes = inputs.bytes("lexicon", lex_path)?;
    let lex = Lexicon::parse(&lex_bytes[..]).map_err(|e| bad_input(lex_path, e))?;
    let rels = match cfg.optional_path("relations") {
        Some(p) => {
            let b = inputs.bytes("relations", p)?;
            RelationSet::parse(&b[..]).map_err(|e| bad_input(p, e))?
        }
        None => RelationSet::default(),
    };
    let mut parts = vec![vocab::build_atomic(&lex, cfg.top_n)?];
    if cfg.bigram_cap > 0 {
        parts.push(vocab::build_bigrams(
            &lex,
            cfg.max_adj,
            cfg.max_noun,
            cfg.bigram_cap,
        )?);
    }
    if cfg.trigram_cap > 0 {
        parts.push(vocab::build_trigrams(
            &lex,
            &rels,
            cfg.max_adj,
            cfg.max_noun,
            cfg.trigram_cap,
        )?);
    }
    let sizes: Vec<usize> = parts.iter().map(ConceptCatalog::len).collect();
    let merged = vocab::merge_catalogs(&parts)?;
    let before = merged.len();
    let catalog = match class_names(cfg, inputs)? {
        Some(names) => vocab::remove_class_leakage(&merged, &names, cfg.leakage)?,
        None => merged,
    };
    out.catalog(artifacts::CONCEPTS, &catalog)?;
    Ok(json!({
        "atomic": sizes[0],
        "bigram": sizes.get(1).copied().unwrap_or(0),
        "trigram": sizes.get(2).copied().unwrap_or(0),
        "merged": before,
        "leakage_removed": before - catalog.len(),
        "concepts": catalog.len(),
    }))
}

fn run_quantset(cfg: &RunConfig, inputs: &mut Inputs, out: &mut Outputs) -> Result<Value> {
    let names = class_names(cfg, inputs)?;
    let base = match cfg.base_source {
        BaseSource::Text => {
            let p = cfg.path("prompts")?;
            let prompts = inputs.v2ce("prompts", p)?;
            let n = n_classes(names.as_deref(), &prompts, p)?;
            quantset::base_from_text(&prompts, n)?
        }
        BaseSource::Images => {
            let (key, p) = match cfg.optional_path("fewshot") {
                Some(p) => ("fewshot", p),
                None => ("train", cfg.path("train")?),
            };
            let labeled = take_shots(&inputs.v2ce(key, p)?, cfg.shots, p)?;
            let n = n_classes(names.as_deref(), &labeled, p)?;
            quantset::base_from_images(&labeled, n)?
        }
    };
    let pool = inputs.v2ce("pool", cfg.path("pool")?)?;
    let qset = quantset::select_quantset(&base, &pool, cfg.per_class)?;
    out.json(artifacts::QUANTSET, &qset)?;
    Ok(json!({
        "n_classes": qset.n_classes(),
        "pool_rows": pool.rows(),
        "base_source": cfg.base_source.to_string(),
    }))
}

fn concept_catalog(cfg: &RunConfig, inputs: &mut Inputs) -> Result<ConceptCatalog> {
    let cat_path = cfg
        .optional_path("concepts")
        .map(Path::to_path_buf)
        .unwrap_or_else(|| artifact(cfg, artifacts::CONCEPTS));
    let catalog = inputs.catalog("concepts", &cat_path)?;
    let emb_path = cfg.path("concept_embeddings")?;
    let store = inputs.v2ce("concept_embeddings", emb_path)?;
    catalog
        .with_embeddings_by_text(&store)
        .map_err(|e| bad_input(emb_path, e))
}

fn run_filter(cfg: &RunConfig, inputs: &mut Inputs, out: &mut Outputs) -> Result<Value> {
    let qset: QuantSet = inputs.json(artifacts::QUANTSET, &artifact(cfg, artifacts::QUANTSET))?;
    let pool = inputs.v2ce("pool", cfg.path("pool")?)?;
    let views = match cfg.optional_path("pool_views") {
        Some(p) => inputs.v2ce("pool_views", p)?,
        None => pool.clone(),
    };
    let catalog = concept_catalog(cfg, inputs)?;
    let freq = conceptfilter::count_topk_concepts(&qset, &pool, &views, &catalog, cfg.k)?;
    let codebook = conceptfilter::build_codebook(&freq, &catalog, cfg.m, cfg.min_count)?;
    out.json(artifacts::FREQUENCIES, &freq)?;
    out.json(artifacts::CODEBOOK, &codebook.manifest())?;
    out.catalog(artifacts::CODEBOOK_CONCEPTS, &codebook.concepts)?;
    out.v2ce(
        artifacts::CODEBOOK_EMBEDDINGS,
        codebook
            .concepts
            .embeddings()
            .expect("codebook carries embeddings"),
    )?;
    Ok(json!({
        "catalog_concepts": catalog.len(),
        "codebook_concepts": codebook.len(),
        "views_per_class": freq.views_seen,
        "list_lengths": codebook.per_class.iter().map(Vec::len).collect::<Vec<_>>(),
    }))
}

fn load_codebook(cfg: &RunConfig, inputs: &mut Inputs) -> Result<Codebook> {
    let manifest: CodebookManifest =
        inputs.json(artifacts::CODEBOOK, &artifact(cfg, artifacts::CODEBOOK))?;
    let cat = inputs.catalog(
        artifacts::CODEBOOK_CONCEPTS,
        &artifact(cfg, artifacts::CODEBOOK_CONCEPTS),
    )?;
    let emb_path = artifact(cfg, artifacts::CODEBOOK_EMBEDDINGS);
    let emb = inputs.v2ce(artifacts::CODEBOOK_EMBEDDINGS, &emb_path)?;
    let cat = cat
        .with_embeddings(emb)
        .map_err(|e| bad_input(&emb_path, e))?;
    Codebook::from_manifest(manifest, cat).map_err(|e| bad_input(&emb_path, e))
}

fn load_bottleneck(cfg: &RunConfig, inputs: &mut Inputs) -> Result<Bottleneck> {
    let manifest: BottleneckManifest =
        inputs.json(artifacts::BOTTLENECK, &artifact(cfg, artifacts::BOTTLENECK))?;
    let emb_path = artifact(cfg, artifacts::BOTTLENECK_EMBEDDINGS);
    let emb = inputs.v2ce(artifacts::BOTTLENECK_EMBEDDINGS, &emb_path)?;
    Bottleneck::from_manifest(manifest, emb).map_err(|e| bad_input(&emb_path, e))
}

fn load_weights(cfg: &RunConfig, inputs: &mut Inputs) -> Result<WeightMatrix> {
    let p = artifact(cfg, artifacts::WEIGHTS);
    let m = inputs.v2ce(artifacts::WEIGHTS, &p)?;
    WeightMatrix::from_embedding_matrix(&m).map_err(|e| bad_input(&p, e))
}

fn labels_usize(m: &EmbeddingMatrix, path: &Path) -> Result<Vec<usize>> {
    Ok(m.labels()
        .ok_or_else(|| bad_input(path, "embeddings carry no labels"))?
        .iter()
        .map(|&l| l as usize)
        .collect())
}

fn run_tokenize(cfg: &RunConfig, inputs: &mut Inputs, out: &mut Outputs) -> Result<Value> {
    let codebook = load_codebook(cfg, inputs)?;
    let names = class_names(cfg, inputs)?;
    let p = cfg.path("train")?;
    let train = take_shots(&inputs.v2ce("train", p)?, cfg.shots, p)?;
    let n = n_classes(names.as_deref(), &train, p)?;
    let tok = V2CTokenizer::new(codebook, cfg.tokens_per_image)?;
    let b = tok.build_bottleneck(&train, n, cfg.concepts_per_class)?;
    out.json(artifacts::BOTTLENECK, &b.manifest())?;
    out.v2ce(artifacts::BOTTLENECK_EMBEDDINGS, b.embeddings())?;
    Ok(json!({
        "n_classes": b.n_classes(),
        "n_concepts": b.n_concepts(),
        "labeled_rows": train.rows(),
    }))
}

fn run_train(cfg: &RunConfig, inputs: &mut Inputs, out: &mut Outputs) -> Result<Value> {
    let b = load_bottleneck(cfg, inputs)?;
    let p = cfg.path("train")?;
    let train = take_shots(&inputs.v2ce("train", p)?, cfg.shots, p)?;
    let labels = labels_usize(&train, p)?;
    let a = cbm::activations(&train, &b)?;
    let val = match cfg.optional_path("val") {
        Some(vp) => {
            let v = inputs.v2ce("val", vp)?;
            Some((cbm::activations(&v, &b)?, labels_usize(&v, vp)?))
        }
        None => None,
    };
    let init = cfg.train.init.resolve(cfg.shots);
    let w0 = match init {
        InitMode::Prior => cbm::init_prior(&b),
        _ => cbm::init_random(b.n_classes(), b.n_concepts(), cfg.train.seed),
    };
    let validation = val.as_ref().map(|(va, vl)| Validation {
        activations: va,
        labels: vl,
    });
    let outcome = cbm::train(&a, &labels, &cfg.train, w0, validation)?;
    out.v2ce(artifacts::WEIGHTS, &outcome.weights.to_embedding_matrix()?)?;
    let summary = json!({
        "init": init.to_string(),
        "selected_epoch": outcome.selected_epoch,
        "train_accuracy": outcome.metrics.accuracy,
        "train_loss": outcome.metrics.loss,
    });
    out.json(
        artifacts::TRAIN_METRICS,
        &json!({ "summary": summary, "history": outcome.metrics.history }),
    )?;
    Ok(summary)
}

fn run_eval(cfg: &RunConfig, inputs: &mut Inputs, out: &mut Outputs) -> Result<Value> {
    let b = load_bottleneck(cfg, inputs)?;
    let w = load_weights(cfg, inputs)?;
    let p = cfg.path("test")?;
    let test = inputs.v2ce("test", p)?;
    let labels = labels_usize(&test, p)?;
    let m = cbm::evaluate(&cbm::activations(&test, &b)?, &labels, &w)?;
    let report = json!({
        "accuracy": m.accuracy,
        "loss": m.loss,
        "n": labels.len(),
    });
    out.json(artifacts::EVAL, &report)?;
    Ok(report)
}

fn run_explain(cfg: &RunConfig, inputs: &mut Inputs, out: &mut Outputs) -> Result<Value> {
    let b = load_bottleneck(cfg, inputs)?;
    let w = load_weights(cfg, inputs)?;
    let names = class_names(cfg, inputs)?
        .unwrap_or_else(|| (0..w.n_classes()).map(|k| format!("class{k}")).collect());
    if names.len() != w.n_classes() {
        return Err(PipelineError::Config(format!(
            "class_names lists {} classes, weights have {}",
            names.len(),
            w.n_classes()
        )));
    }
    let mut per_class = Vec::with_capacity(w.n_classes());
    for k in 0..w.n_classes() {
        per_class.push(cbm::explain_class(&w, &b, k, cfg.explain_top)?);
    }
    let name_width = names
        .iter()
        .map(|n| n.chars().count())
        .max()
        .unwrap_or(0)
        .max(5);
    let mut text = format!("{:<name_width$}  rank  weight    concept\n", "class");
    for (name, ex) in names.iter().zip(&per_class) {
        for (r, e) in ex.iter().enumerate() {
            let label = if r == 0 { name.as_str() } else { "" };
            text.push_str(&format!(
                "{label:<name_width$}  {:>4}  {:.6}  {}\n",
                r + 1,
                e.weight,
                e.text
            ));
        }
    }
    out.bytes(artifacts::EXPLANATIONS_TXT, text.as_bytes())?;
    let doc: Vec<Value> = names
        .iter()
        .zip(&per_class)
        .enumerate()
        .map(|(k, (name, ex))| json!({ "class": k, "name": name, "concepts": ex }))
        .collect();
    out.json(artifacts::EXPLANATIONS_JSON, &doc)?;
    Ok(json!({ "classes": names.len(), "top_n": cfg.explain_top }))
}

fn run_synth(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let world = synth::gen_world(&cfg.world)?;
    out.catalog("concepts.jsonl", &world.concepts)?;
    out.v2ce(
        "concept_embeddings.v2ce",
        world
            .concepts
            .embeddings()
            .expect("world concepts are embedded"),
    )?;
    out.v2ce("prompts.v2ce", &world.prompts)?;
    out.v2ce("train.v2ce", &world.train)?;
    out.v2ce("test.v2ce", &world.test)?;
    out.v2ce("pool.v2ce", &world.pool)?;
    out.v2ce("pool_views.v2ce", &world.pool_views)?;
    let names: String = world.class_names.iter().map(|n| format!("{n}\n")).collect();
    out.bytes("class_names.txt", names.as_bytes())?;
    out.json(artifacts::TRUTH, &world.truth())?;
    out.bytes(artifacts::CONFIG, synth_config_text().as_bytes())?;
    Ok(json!({
        "n_classes": world.params.n_classes,
        "concepts": world.concepts.len(),
        "pool_rows": world.pool.rows(),
        "view_rows": world.pool_views.rows(),
    }))
}

/// Reads a previously written manifest.
pub fn read_manifest(dir: &Path, stage: Stage) -> Result<Manifest> {
    let path = dir.join(stage.manifest_name());
    if !path.is_file() {
        return Err(PipelineError::MissingInput(path));
    }
    let f = File::open(&path).map_err(|source| PipelineError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| bad_input(&path, e))
}
