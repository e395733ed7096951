//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment and blank lines are
//! ignored. Relative paths resolve against the config file's directory.
//! Command-line overrides are applied after the file, in order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cbm::{InitMode, TrainConfig};
use crate::quantset::BaseSource;
use crate::synth::WorldParams;
use crate::tokenizer::DEFAULT_TOKENS_PER_IMAGE;
use crate::vocab::LeakageMode;

use super::PipelineError;

/// Keys naming input files.
pub const PATH_KEYS: [&str; 12] = [
    "lexicon",
    "relations",
    "class_names",
    "concepts",
    "concept_embeddings",
    "prompts",
    "fewshot",
    "pool",
    "pool_views",
    "train",
    "val",
    "test",
];

/// Non-path keys and their defaults, in canonical order.
const PARAM_DEFAULTS: [(&str, &str); 32] = [
    ("top_n", "10000"),
    ("max_adj", "100"),
    ("max_noun", "500"),
    ("bigram_cap", "20000"),
    ("trigram_cap", "20000"),
    ("leakage", "phrase"),
    ("base_source", "text"),
    ("per_class", "100"),
    ("k", "5"),
    ("m", "500"),
    ("min_count", "1"),
    ("tokens_per_image", "5"),
    ("concepts_per_class", "50"),
    ("shots", "all"),
    ("lr", "5e-5"),
    ("batch", "512"),
    ("epochs", "5000"),
    ("seed", "0"),
    ("init", "auto"),
    ("explain_top", "3"),
    ("synth.classes", "10"),
    ("synth.planted", "3"),
    ("synth.distractors", "200"),
    ("synth.images_per_class", "20"),
    ("synth.test_per_class", "20"),
    ("synth.prompts_per_class", "4"),
    ("synth.pool_size", "1000"),
    ("synth.background_fraction", "0.2"),
    ("synth.views", "3"),
    ("synth.dim", "64"),
    ("synth.noise", "0.1"),
    ("out", "."),
];

/// Parsed `key = value` pairs, later assignments winning.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(i) => &line[..i],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("line {}: expected `key = value`", n + 1))
            })?;
            entries.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        Ok(Self { entries })
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), PipelineError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| {
            PipelineError::Config(format!("override {assignment:?} is not `key=value`"))
        })?;
        self.entries
            .insert(k.trim().to_owned(), v.trim().to_owned());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out: PathBuf,
    paths: BTreeMap<&'static str, PathBuf>,
    pub top_n: usize,
    pub max_adj: usize,
    pub max_noun: usize,
    pub bigram_cap: usize,
    pub trigram_cap: usize,
    pub leakage: LeakageMode,
    pub base_source: BaseSource,
    pub per_class: usize,
    pub k: usize,
    pub m: usize,
    pub min_count: u64,
    pub tokens_per_image: usize,
    pub concepts_per_class: usize,
    /// Labeled images per class used for bottleneck building and training;
    /// `None` = all.
    pub shots: Option<usize>,
    pub train: TrainConfig,
    pub explain_top: usize,
    pub world: WorldParams,
    /// Every parameter value as resolved, for manifests.
    params: BTreeMap<&'static str, String>,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, PipelineError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| PipelineError::Config(format!("{key} = {value:?}: {e}")))
}

fn at_least_one(key: &str, v: usize) -> Result<usize, PipelineError> {
    if v == 0 {
        return Err(PipelineError::Config(format!("{key} must be at least 1")));
    }
    Ok(v)
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides and resolves defaults.
    /// Without a config file, relative paths resolve against `cwd`.
    pub fn load(
        path: Option<&Path>,
        overrides: &[String],
        cwd: &Path,
    ) -> Result<Self, PipelineError> {
        let (mut raw, base) = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    PipelineError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (RawConfig::parse(&text)?, cwd.join(dir))
            }
            None => (RawConfig::default(), cwd.to_path_buf()),
        };
        for o in overrides {
            raw.set(o)?;
        }
        Self::resolve(&raw, &base)
    }

    /// Resolves every key, anchoring relative paths (including `out`) at
    /// `base`.
    pub fn resolve(raw: &RawConfig, base: &Path) -> Result<Self, PipelineError> {
        for key in raw.entries.keys() {
            let known =
                PATH_KEYS.contains(&key.as_str()) || PARAM_DEFAULTS.iter().any(|(k, _)| k == key);
            if !known {
                return Err(PipelineError::Config(format!("unknown key {key:?}")));
            }
        }
        let mut params = BTreeMap::new();
        for (k, d) in PARAM_DEFAULTS {
            params.insert(k, raw.get(k).unwrap_or(d).to_owned());
        }
        let mut paths = BTreeMap::new();
        for k in PATH_KEYS {
            if let Some(v) = raw.get(k) {
                if v.is_empty() {
                    return Err(PipelineError::Config(format!("{k} is empty")));
                }
                paths.insert(k, base.join(v));
            }
        }
        let p = |k: &str| params[k].as_str();
        let num = |k: &str| parse_value::<usize>(k, p(k));
        let shots = match p("shots") {
            "all" => None,
            s => Some(at_least_one("shots", parse_value("shots", s)?)?),
        };
        let train = TrainConfig {
            learning_rate: parse_value("lr", p("lr"))?,
            batch_size: at_least_one("batch", num("batch")?)?,
            max_epochs: at_least_one("epochs", num("epochs")?)?,
            seed: parse_value("seed", p("seed"))?,
            init: parse_value::<InitMode>("init", p("init"))?,
            ..Default::default()
        };
        train
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let world = WorldParams {
            n_classes: num("synth.classes")?,
            planted_per_class: num("synth.planted")?,
            n_distractors: num("synth.distractors")?,
            images_per_class: num("synth.images_per_class")?,
            test_per_class: num("synth.test_per_class")?,
            prompts_per_class: num("synth.prompts_per_class")?,
            pool_size: num("synth.pool_size")?,
            background_fraction: parse_value(
                "synth.background_fraction",
                p("synth.background_fraction"),
            )?,
            views_per_image: num("synth.views")?,
            dim: num("synth.dim")?,
            noise: parse_value("synth.noise", p("synth.noise"))?,
            seed: train.seed,
        };
        Ok(Self {
            out: match p("out") {
                "." => base.to_path_buf(),
                o => base.join(o),
            },
            paths,
            top_n: at_least_one("top_n", num("top_n")?)?,
            max_adj: num("max_adj")?,
            max_noun: num("max_noun")?,
            bigram_cap: num("bigram_cap")?,
            trigram_cap: num("trigram_cap")?,
            leakage: parse_value("leakage", p("leakage"))?,
            base_source: parse_value("base_source", p("base_source"))?,
            per_class: at_least_one("per_class", num("per_class")?)?,
            k: at_least_one("k", num("k")?)?,
            m: at_least_one("m", num("m")?)?,
            min_count: parse_value("min_count", p("min_count"))?,
            tokens_per_image: at_least_one("tokens_per_image", num("tokens_per_image")?)?,
            concepts_per_class: at_least_one("concepts_per_class", num("concepts_per_class")?)?,
            shots,
            train,
            explain_top: at_least_one("explain_top", num("explain_top")?)?,
            world,
            params: params.into_iter().filter(|(k, _)| *k != "out").collect(),
        })
    }

    /// Path for `key`, or a config error naming the key.
    pub fn path(&self, key: &str) -> Result<&Path, PipelineError> {
        self.paths
            .get(key)
            .map(PathBuf::as_path)
            .ok_or_else(|| PipelineError::Config(format!("missing required key `{key}`")))
    }

    pub fn optional_path(&self, key: &str) -> Option<&Path> {
        self.paths.get(key).map(PathBuf::as_path)
    }

    /// The given parameters as resolved strings.
    pub fn params(&self, keys: &[&str]) -> BTreeMap<String, String> {
        keys.iter()
            .filter_map(|k| self.params.get(k).map(|v| ((*k).to_owned(), v.clone())))
            .collect()
    }
}

/// Defaults written for a freshly generated synthetic world: the production
/// selection sizes scaled down to a desk-sized pool.
pub fn synth_config_text() -> String {
    let mut s = String::from(
        "# generated by `v2c synth`\n\
         class_names = class_names.txt\n\
         concepts = concepts.jsonl\n\
         concept_embeddings = concept_embeddings.v2ce\n\
         prompts = prompts.v2ce\n\
         pool = pool.v2ce\n\
         pool_views = pool_views.v2ce\n\
         train = train.v2ce\n\
         test = test.v2ce\n",
    );
    s.push_str(&format!(
        "\nper_class = 20\n\
         k = {DEFAULT_TOKENS_PER_IMAGE}\n\
         m = 20\n\
         tokens_per_image = {DEFAULT_TOKENS_PER_IMAGE}\n\
         concepts_per_class = 5\n\
         lr = 0.05\n\
         batch = 32\n\
         epochs = 100\n\
         init = random\n"
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(text: &str) -> Result<RunConfig, PipelineError> {
        RawConfig::parse(text).and_then(|r| RunConfig::resolve(&r, Path::new("/base")))
    }

    #[test]
    fn defaults() {
        let c = resolve("").unwrap();
        assert_eq!(
            (c.k, c.m, c.concepts_per_class, c.per_class),
            (5, 500, 50, 100)
        );
        assert_eq!(c.top_n, 10_000);
        assert_eq!(c.train.learning_rate, 5e-5);
        assert_eq!(c.train.batch_size, 512);
        assert_eq!(c.train.max_epochs, 5000);
        assert_eq!(c.explain_top, 3);
        assert_eq!(c.shots, None);
        assert_eq!(c.out, PathBuf::from("/base"));
    }

    #[test]
    fn comments_paths_and_overrides() {
        let mut raw =
            RawConfig::parse("# comment\nlexicon = words.tsv  # trailing\n\nm=7\n").unwrap();
        raw.set("m = 9").unwrap();
        raw.set("shots=2").unwrap();
        let c = RunConfig::resolve(&raw, Path::new("/base")).unwrap();
        assert_eq!(c.path("lexicon").unwrap(), Path::new("/base/words.tsv"));
        assert_eq!(c.m, 9);
        assert_eq!(c.shots, Some(2));
        assert_eq!(c.params(&["m", "k"])["m"], "9");
    }

    #[test]
    fn missing_key_is_named() {
        let c = resolve("").unwrap();
        let e = c.path("lexicon").unwrap_err();
        assert!(e.to_string().contains("lexicon"));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn bad_values() {
        for text in [
            "k = 0",
            "lr = -1",
            "init = warm",
            "nonsense = 1",
            "no equals sign",
            "leakage = x",
        ] {
            let e = resolve(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn synth_config_parses() {
        let c = resolve(&synth_config_text()).unwrap();
        assert_eq!((c.m, c.concepts_per_class, c.per_class), (20, 5, 20));
        assert!(c.optional_path("val").is_none());
    }
}
