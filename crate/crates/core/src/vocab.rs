//! Concept vocabulary construction.
//!
//! Atomic concepts are the most frequent lexicon words; bigrams pair
//! adjectives with nouns ("black head"); trigrams prefix a relation phrase
//! ("has a white chest"). Cross products are bounded by `max_adj`,
//! `max_noun` and a `cap` on the number of phrases kept, preferring phrases
//! whose words have the lowest combined frequency rank.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embkit::{EmbError, EmbeddingMatrix};

/// Relation phrases used for trigrams when no relations file is supplied.
pub const DEFAULT_RELATIONS: [&str; 4] = ["part of", "made of", "is a", "has a"];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("lexicon is empty")]
    EmptyLexicon,
    #[error("lexicon has no adjectives")]
    NoAdjectives,
    #[error("lexicon has no nouns")]
    NoNouns,
    #[error("relation set is empty")]
    NoRelations,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),
    #[error("duplicate concept text {0:?}")]
    DuplicateConcept(String),
    #[error("{0} must be at least 1")]
    InvalidParameter(&'static str),
    #[error("catalog has {concepts} concepts but embeddings have {rows} rows")]
    EmbeddingRows { concepts: usize, rows: usize },
    #[error("no embedding row with id {0:?}")]
    MissingEmbedding(String),
    #[error(transparent)]
    Embedding(#[from] EmbError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = VocabError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PosTags {
    pub adj: bool,
    pub noun: bool,
    pub other: bool,
}

impl FromStr for PosTags {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut tags = PosTags::default();
        for t in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match t.to_ascii_uppercase().as_str() {
                "ADJ" => tags.adj = true,
                "NOUN" => tags.noun = true,
                "OTHER" => tags.other = true,
                _ => return Err(format!("unknown POS tag {t:?}")),
            }
        }
        if tags == PosTags::default() {
            return Err("missing POS tags".into());
        }
        Ok(tags)
    }
}

impl fmt::Display for PosTags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.adj {
            parts.push("ADJ");
        }
        if self.noun {
            parts.push("NOUN");
        }
        if self.other {
            parts.push("OTHER");
        }
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexEntry {
    pub word: String,
    pub rank: u32,
    pub pos: PosTags,
}

/// Frequency-ranked, POS-tagged word list. Entries are kept in rank order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    entries: Vec<LexEntry>,
}

impl Lexicon {
    /// Validates uniqueness of words and that ranks are exactly `1..=n`.
    pub fn new(mut entries: Vec<LexEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.rank);
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if e.rank as usize != i + 1 {
                return Err(VocabError::InvalidLexicon(format!(
                    "ranks must be unique and contiguous from 1; expected {} but found {} ({:?})",
                    i + 1,
                    e.rank,
                    e.word
                )));
            }
            if !seen.insert(e.word.as_str()) {
                return Err(VocabError::InvalidLexicon(format!(
                    "duplicate word {:?}",
                    e.word
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Parses `word<TAB>rank<TAB>pos1[,pos2]` lines. Blank lines are skipped.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| VocabError::Parse { line: n + 1, msg };
            let mut fields = line.split('\t');
            let (Some(word), Some(rank), Some(pos), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(err("expected word<TAB>rank<TAB>pos".into()));
            };
            let word = word.trim().to_lowercase();
            if word.is_empty() {
                return Err(err("empty word".into()));
            }
            let rank = rank
                .trim()
                .parse::<u32>()
                .map_err(|e| err(format!("bad rank {rank:?}: {e}")))?;
            let pos = pos.parse::<PosTags>().map_err(err)?;
            entries.push(LexEntry { word, rank, pos });
        }
        Self::new(entries)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entries {
            writeln!(w, "{}\t{}\t{}", e.word, e.rank, e.pos)?;
        }
        Ok(())
    }

    pub fn entries(&self) -> &[LexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn adjectives(&self, max: usize) -> Vec<&LexEntry> {
        self.entries
            .iter()
            .filter(|e| e.pos.adj)
            .take(max)
            .collect()
    }

    fn nouns(&self, max: usize) -> Vec<&LexEntry> {
        self.entries
            .iter()
            .filter(|e| e.pos.noun)
            .take(max)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationSet {
    relations: Vec<String>,
}

impl RelationSet {
    pub fn new<S: Into<String>>(relations: impl IntoIterator<Item = S>) -> Self {
        Self {
            relations: relations.into_iter().map(Into::into).collect(),
        }
    }

    /// One phrase per line; blank lines and duplicates are dropped.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut relations: Vec<String> = Vec::new();
        for line in reader.lines() {
            let phrase = line?
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
                .to_lowercase();
            if !phrase.is_empty() && !relations.contains(&phrase) {
                relations.push(phrase);
            }
        }
        Ok(Self { relations })
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }
}

impl Default for RelationSet {
    fn default() -> Self {
        Self::new(DEFAULT_RELATIONS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptKind {
    Atomic,
    Bigram,
    Trigram,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: usize,
    pub text: String,
    pub kind: ConceptKind,
}

/// Ordered concept list with dense ids `0..len` and, once embedded, one
/// embedding row per concept.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConceptCatalog {
    concepts: Vec<Concept>,
    embeddings: Option<EmbeddingMatrix>,
}

impl ConceptCatalog {
    /// Builds a catalog from `(text, kind)` pairs, assigning dense ids.
    /// Texts must be unique.
    pub fn from_texts<S: Into<String>>(
        items: impl IntoIterator<Item = (S, ConceptKind)>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut concepts = Vec::new();
        for (id, (text, kind)) in items.into_iter().enumerate() {
            let text = text.into();
            if !seen.insert(text.clone()) {
                return Err(VocabError::DuplicateConcept(text));
            }
            concepts.push(Concept { id, text, kind });
        }
        Ok(Self {
            concepts,
            embeddings: None,
        })
    }

    pub fn with_embeddings(mut self, embeddings: EmbeddingMatrix) -> Result<Self> {
        if embeddings.rows() != self.concepts.len() {
            return Err(VocabError::EmbeddingRows {
                concepts: self.concepts.len(),
                rows: embeddings.rows(),
            });
        }
        self.embeddings = Some(embeddings);
        Ok(self)
    }

    /// Attaches embeddings looked up by concept text in the row ids of
    /// `store`, which may hold extra rows in any order.
    pub fn with_embeddings_by_text(self, store: &EmbeddingMatrix) -> Result<Self> {
        let index: HashMap<&str, usize> = store
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let rows = self
            .concepts
            .iter()
            .map(|c| {
                index
                    .get(c.text.as_str())
                    .copied()
                    .ok_or_else(|| VocabError::MissingEmbedding(c.text.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let embeddings = store.select_rows(&rows)?;
        self.with_embeddings(embeddings)
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn embeddings(&self) -> Option<&EmbeddingMatrix> {
        self.embeddings.as_ref()
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn text(&self, id: usize) -> &str {
        &self.concepts[id].text
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> + '_ {
        self.concepts.iter().map(|c| c.text.as_str())
    }

    /// Sub-catalog of the given ids in the given order, ids re-densified.
    /// Embedding rows follow their concepts.
    pub fn select(&self, ids: &[usize]) -> Result<Self> {
        let concepts = ids
            .iter()
            .enumerate()
            .map(|(new_id, &old)| Concept {
                id: new_id,
                text: self.concepts[old].text.clone(),
                kind: self.concepts[old].kind,
            })
            .collect();
        let embeddings = match &self.embeddings {
            Some(e) => Some(e.select_rows(ids)?),
            None => None,
        };
        Ok(Self {
            concepts,
            embeddings,
        })
    }

    /// Reads JSON lines of `{"id":int,"text":str,"kind":...}`. Ids must be
    /// dense and in order.
    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut items = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let c: Concept = serde_json::from_str(&line).map_err(|e| VocabError::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
            if c.id != items.len() {
                return Err(VocabError::Parse {
                    line: n + 1,
                    msg: format!("expected id {}, found {}", items.len(), c.id),
                });
            }
            items.push((c.text, c.kind));
        }
        Self::from_texts(items)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for c in &self.concepts {
            serde_json::to_writer(&mut w, c)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// The `top_n` most frequent lexicon words as atomic concepts, in rank order.
pub fn build_atomic(lex: &Lexicon, top_n: usize) -> Result<ConceptCatalog> {
    if lex.is_empty() {
        return Err(VocabError::EmptyLexicon);
    }
    if top_n == 0 {
        return Err(VocabError::InvalidParameter("top_n"));
    }
    ConceptCatalog::from_texts(
        lex.entries
            .iter()
            .take(top_n)
            .map(|e| (e.word.clone(), ConceptKind::Atomic)),
    )
}

/// Keeps the `cap` smallest keys (lexicographic on the tuple) and returns
/// them sorted.
fn lowest<K: Ord + Copy>(mut keyed: Vec<K>, cap: usize) -> Vec<K> {
    let cap = cap.min(keyed.len());
    if cap == 0 {
        return Vec::new();
    }
    if cap < keyed.len() {
        keyed.select_nth_unstable(cap - 1);
        keyed.truncate(cap);
    }
    keyed.sort_unstable();
    keyed
}

/// "adj noun" phrases over the top `max_adj` adjectives and `max_noun` nouns,
/// keeping the `cap` pairs with lowest `rank(adj) + rank(noun)`, ties by
/// adjective rank then noun rank. A word is never paired with itself.
pub fn build_bigrams(
    lex: &Lexicon,
    max_adj: usize,
    max_noun: usize,
    cap: usize,
) -> Result<ConceptCatalog> {
    let adjs = lex.adjectives(max_adj);
    if adjs.is_empty() {
        return Err(VocabError::NoAdjectives);
    }
    let nouns = lex.nouns(max_noun);
    if nouns.is_empty() {
        return Err(VocabError::NoNouns);
    }
    let mut keyed = Vec::with_capacity(adjs.len() * nouns.len());
    for (ai, a) in adjs.iter().enumerate() {
        for (ni, n) in nouns.iter().enumerate() {
            if a.word != n.word {
                keyed.push((a.rank + n.rank, a.rank, n.rank, ai, ni));
            }
        }
    }
    ConceptCatalog::from_texts(lowest(keyed, cap).into_iter().map(|(_, _, _, ai, ni)| {
        (
            format!("{} {}", adjs[ai].word, nouns[ni].word),
            ConceptKind::Bigram,
        )
    }))
}

/// "rel adj noun" phrases. Relations rank by their 1-based list position;
/// phrases are ordered by the sum of all three ranks, then by relation,
/// adjective and noun rank.
pub fn build_trigrams(
    lex: &Lexicon,
    rels: &RelationSet,
    max_adj: usize,
    max_noun: usize,
    cap: usize,
) -> Result<ConceptCatalog> {
    if rels.relations.is_empty() {
        return Err(VocabError::NoRelations);
    }
    let adjs = lex.adjectives(max_adj);
    if adjs.is_empty() {
        return Err(VocabError::NoAdjectives);
    }
    let nouns = lex.nouns(max_noun);
    if nouns.is_empty() {
        return Err(VocabError::NoNouns);
    }
    if cap == 0 {
        return Ok(ConceptCatalog::default());
    }
    let mut keyed = Vec::with_capacity(rels.relations.len() * adjs.len() * nouns.len());
    for ri in 0..rels.relations.len() {
        let rr = ri as u32 + 1;
        for (ai, a) in adjs.iter().enumerate() {
            for (ni, n) in nouns.iter().enumerate() {
                if a.word != n.word {
                    keyed.push((rr + a.rank + n.rank, rr, a.rank, n.rank, ai, ni));
                }
            }
        }
    }
    ConceptCatalog::from_texts(lowest(keyed, cap).into_iter().map(|(_, rr, _, _, ai, ni)| {
        (
            format!(
                "{} {} {}",
                rels.relations[rr as usize - 1],
                adjs[ai].word,
                nouns[ni].word
            ),
            ConceptKind::Trigram,
        )
    }))
}

/// Concatenates catalogs, keeping the first occurrence of each text.
/// Embeddings survive only when every part carries them.
pub fn merge_catalogs(parts: &[ConceptCatalog]) -> Result<ConceptCatalog> {
    let mut seen = HashSet::new();
    let mut items = Vec::new();
    let mut rows: Vec<(usize, usize)> = Vec::new();
    for (p, part) in parts.iter().enumerate() {
        for c in &part.concepts {
            if seen.insert(c.text.as_str()) {
                items.push((c.text.clone(), c.kind));
                rows.push((p, c.id));
            }
        }
    }
    let mut merged = ConceptCatalog::from_texts(items)?;
    if !parts.is_empty() && parts.iter().all(|p| p.embeddings.is_some()) {
        let dim = parts[0].embeddings.as_ref().map_or(0, EmbeddingMatrix::dim);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for &(p, id) in &rows {
            let e = parts[p].embeddings.as_ref().expect("checked above");
            if e.dim() != dim {
                return Err(EmbError::DimMismatch {
                    context: "merged catalog embeddings",
                    expected: dim,
                    found: e.dim(),
                }
                .into());
            }
            data.extend_from_slice(e.row(id));
        }
        let ids = merged.texts().map(str::to_owned).collect();
        merged.embeddings = Some(EmbeddingMatrix::new(dim, data, ids)?);
    }
    Ok(merged)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LeakageMode {
    /// Drop concepts containing a whole class-name phrase.
    #[default]
    Phrase,
    /// Drop concepts sharing any single word with any class name.
    Token,
}

impl FromStr for LeakageMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "phrase" => Ok(Self::Phrase),
            "token" => Ok(Self::Token),
            _ => Err(format!(
                "unknown leakage mode {s:?} (expected phrase|token)"
            )),
        }
    }
}

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn contains_phrase(haystack: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && haystack.windows(phrase.len()).any(|w| w == phrase)
}

/// True if `text` mentions any class name under `mode`. Matching is
/// case-insensitive on word boundaries.
pub fn mentions_class(text: &str, class_names: &[String], mode: LeakageMode) -> bool {
    let tw = words(text);
    class_names.iter().any(|name| {
        let nw = words(name);
        match mode {
            LeakageMode::Phrase => contains_phrase(&tw, &nw),
            LeakageMode::Token => nw.iter().any(|w| tw.contains(w)),
        }
    })
}

/// Removes every concept that mentions a class name, re-densifying ids.
pub fn remove_class_leakage(
    cat: &ConceptCatalog,
    class_names: &[String],
    mode: LeakageMode,
) -> Result<ConceptCatalog> {
    let keep: Vec<usize> = cat
        .concepts
        .iter()
        .filter(|c| !mentions_class(&c.text, class_names, mode))
        .map(|c| c.id)
        .collect();
    cat.select(&keep)
}
