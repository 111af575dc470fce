//! Corpus ingestion: tokenization, vocabulary construction, bag-of-words
//! vectors and pre-trained word embeddings.
//!
//! All file formats handled here are line oriented:
//!
//! * corpus: one JSON object per line, `{"text": "...", "label": "..."}`
//!   (`label` optional);
//! * embeddings: `word v1 v2 ... vD`, single-space separated;
//! * vocabulary: one word per line, line number is the index;
//! * bag-of-words: one JSON object per line,
//!   `{"counts": {"<idx>": <count>, ...}, "label": "<label>"|null}`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Stopword list shipped with the crate.
pub const DEFAULT_STOPWORDS: &str = include_str!("../resources/stopwords.txt");

pub const DEFAULT_MIN_DF: usize = 5;
pub const DEFAULT_MAX_DF_RATIO: f64 = 0.8;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no word survived vocabulary filtering")]
    EmptyVocabulary,
    #[error("document has no in-vocabulary tokens")]
    EmptyDocument,
    #[error("{path}:{line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),
    #[error("duplicate vocabulary word `{0}`")]
    DuplicateWord(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, line: usize, msg: impl Into<String>) -> CorpusError {
    CorpusError::Format {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn default_stopwords() -> HashSet<String> {
    parse_stopwords(DEFAULT_STOPWORDS)
}

fn parse_stopwords(text: &str) -> HashSet<String> {
    text.lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

/// Reads a stopword file: one word per line, `#` starts a comment line.
pub fn load_stopwords(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(parse_stopwords(&text))
}

/// Lowercases, splits on every non-alphabetic character, then drops
/// stopwords and tokens shorter than two characters.
pub fn tokenize(raw_text: &str, stopwords: &HashSet<String>) -> Vec<String> {
    raw_text
        .split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .filter(|t| t.chars().count() >= 2 && !stopwords.contains(t))
        .collect()
}

pub fn tokenize_all<S: AsRef<str> + Sync>(
    texts: &[S],
    stopwords: &HashSet<String>,
) -> Vec<Vec<String>> {
    texts
        .par_iter()
        .map(|t| tokenize(t.as_ref(), stopwords))
        .collect()
}

/// Bidirectional word/index map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(CorpusError::DuplicateWord(w.clone()));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, idx: usize) -> &str {
        &self.words[idx]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Hex SHA-256 of the newline-joined word list; identifies the
    /// vocabulary a checkpoint was trained against.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for w in &self.words {
            hasher.update(w.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        for w in &self.words {
            writeln!(out, "{w}").map_err(io_err(path))?;
        }
        out.flush().map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut words = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            let w = line.trim();
            if w.is_empty() {
                return Err(format_err(path, i + 1, "empty vocabulary line"));
            }
            words.push(w.to_string());
        }
        Self::new(words)
    }
}

/// Keeps a word iff `min_df <= df < max_df_ratio * num_docs` and the word
/// has an embedding. Retained words are sorted lexicographically.
pub fn build_vocabulary<T: AsRef<str>>(
    token_docs: &[Vec<T>],
    min_df: usize,
    max_df_ratio: f64,
    embed_vocab: &HashSet<String>,
) -> Result<Vocabulary> {
    if min_df < 1 {
        return Err(CorpusError::InvalidThreshold(format!(
            "min_df must be >= 1, got {min_df}"
        )));
    }
    if !(max_df_ratio > 0.0 && max_df_ratio <= 1.0) {
        return Err(CorpusError::InvalidThreshold(format!(
            "max_df_ratio must lie in (0, 1], got {max_df_ratio}"
        )));
    }
    let df = document_frequencies(token_docs);
    let max_df = max_df_ratio * token_docs.len() as f64;
    let words: Vec<String> = df
        .into_iter()
        .filter(|(w, n)| *n >= min_df && (*n as f64) < max_df && embed_vocab.contains(w))
        .map(|(w, _)| w)
        .collect();
    if words.is_empty() {
        return Err(CorpusError::EmptyVocabulary);
    }
    Vocabulary::new(words)
}

/// Number of documents each word appears in, ordered by word.
pub fn document_frequencies<T: AsRef<str>>(token_docs: &[Vec<T>]) -> BTreeMap<String, usize> {
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for doc in token_docs {
        let unique: HashSet<&str> = doc.iter().map(|t| t.as_ref()).collect();
        for w in unique {
            *df.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    df
}

/// Sparse count vector of a single document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BowDocument {
    pub counts: BTreeMap<usize, u32>,
    pub label: Option<String>,
}

impl BowDocument {
    pub fn total(&self) -> u64 {
        self.counts.values().map(|&c| c as u64).sum()
    }

    pub fn with_label(mut self, label: Option<String>) -> Self {
        self.label = label;
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.counts.iter().map(|(&i, &c)| (i, c as f64))
    }
}

pub fn to_bow<T: AsRef<str>>(tokens: &[T], vocab: &Vocabulary) -> Result<BowDocument> {
    let mut counts = BTreeMap::new();
    for t in tokens {
        if let Some(i) = vocab.get(t.as_ref()) {
            *counts.entry(i).or_insert(0u32) += 1;
        }
    }
    if counts.is_empty() {
        return Err(CorpusError::EmptyDocument);
    }
    Ok(BowDocument {
        counts,
        label: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct BowCorpus {
    pub docs: Vec<BowDocument>,
    pub vocab: Vocabulary,
    pub split: Split,
}

impl BowCorpus {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        !self.docs.is_empty() && self.docs.iter().all(|d| d.label.is_some())
    }

    pub fn mean_length(&self) -> f64 {
        if self.docs.is_empty() {
            return 0.0;
        }
        self.docs.iter().map(|d| d.total() as f64).sum::<f64>() / self.docs.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bow_jsonl(path, &self.docs)
    }

    pub fn load(path: &Path, vocab: Vocabulary, split: Split) -> Result<Self> {
        let docs = read_bow_jsonl(path, vocab.len())?;
        Ok(Self { docs, vocab, split })
    }
}

/// Converts tokenized documents to bag-of-words, skipping (and logging)
/// documents that end up empty. Returns the kept documents together with
/// the positions of the skipped ones.
pub fn bow_documents<T: AsRef<str> + Sync>(
    token_docs: &[Vec<T>],
    labels: &[Option<String>],
    vocab: &Vocabulary,
) -> (Vec<BowDocument>, Vec<usize>) {
    let converted: Vec<Result<BowDocument>> =
        token_docs.par_iter().map(|t| to_bow(t, vocab)).collect();
    let mut docs = Vec::with_capacity(converted.len());
    let mut skipped = Vec::new();
    for (i, r) in converted.into_iter().enumerate() {
        match r {
            Ok(d) => docs.push(d.with_label(labels.get(i).cloned().flatten())),
            Err(_) => {
                log::warn!("document {i} has no in-vocabulary tokens; skipped");
                skipped.push(i);
            }
        }
    }
    (docs, skipped)
}

pub fn write_bow_jsonl(path: &Path, docs: &[BowDocument]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for d in docs {
        let line = serde_json::to_string(d).expect("BowDocument serializes");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_bow_jsonl(path: &Path, vocab_size: usize) -> Result<Vec<BowDocument>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: BowDocument =
            serde_json::from_str(&line).map_err(|e| format_err(path, i + 1, e.to_string()))?;
        if doc.counts.is_empty() {
            return Err(format_err(path, i + 1, "empty document"));
        }
        if let Some((&idx, _)) = doc.counts.iter().find(|(&k, &c)| k >= vocab_size || c == 0) {
            return Err(format_err(
                path,
                i + 1,
                format!("index {idx} out of range or zero count (V={vocab_size})"),
            ));
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Dense word vectors keyed by word.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    /// Panics if `vector` has the wrong length or a non-finite entry.
    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f64>) {
        assert_eq!(vector.len(), self.dim, "embedding dimension mismatch");
        assert!(vector.iter().all(|v| v.is_finite()), "non-finite embedding");
        self.vectors.insert(word.into(), vector);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(|v| v.as_slice())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vectors.contains_key(word)
    }

    pub fn vocabulary(&self) -> HashSet<String> {
        self.vectors.keys().cloned().collect()
    }

    /// Copy restricted to the words of `vocab` that have a vector.
    pub fn restrict(&self, vocab: &Vocabulary) -> Self {
        let vectors = vocab
            .words()
            .iter()
            .filter_map(|w| self.vectors.get(w).map(|v| (w.clone(), v.clone())))
            .collect();
        Self {
            dim: self.dim,
            vectors,
        }
    }

    /// Writes vectors in the order of `vocab`; words without a vector are
    /// skipped.
    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        for w in vocab.words() {
            if let Some(v) = self.vectors.get(w) {
                write!(out, "{w}").map_err(io_err(path))?;
                for x in v {
                    write!(out, " {x}").map_err(io_err(path))?;
                }
                writeln!(out).map_err(io_err(path))?;
            }
        }
        out.flush().map_err(io_err(path))
    }
}

/// Parses a `word v1 ... vD` text file. The dimension is taken from the
/// first non-blank line.
pub fn load_embeddings(path: &Path, restrict_to: Option<&Vocabulary>) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut table: Option<EmbeddingTable> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let word = parts.next().unwrap_or_default();
        let vector = parts
            .map(|p| {
                p.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format_err(path, i + 1, format!("bad float `{p}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if vector.is_empty() {
            return Err(format_err(path, i + 1, "missing vector"));
        }
        let table = table.get_or_insert_with(|| EmbeddingTable::new(vector.len()));
        if vector.len() != table.dim {
            return Err(format_err(
                path,
                i + 1,
                format!("dimension {} != {}", vector.len(), table.dim),
            ));
        }
        if restrict_to.is_none_or(|v| v.contains(word)) {
            table.vectors.insert(word.to_string(), vector);
        }
    }
    table.ok_or_else(|| format_err(path, 0, "empty embedding file"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusRecord {
    pub text: String,
    pub label: Option<String>,
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(&line).map_err(|m| format_err(path, i + 1, m))?);
    }
    Ok(records)
}

fn parse_record(line: &str) -> std::result::Result<CorpusRecord, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("record is not a JSON object")?;
    let text = obj
        .get("text")
        .and_then(|t| t.as_str())
        .ok_or("missing string field `text`")?
        .to_string();
    let label = match obj.get("label") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(serde_json::Value::Number(n)) => Some(n.to_string()),
        Some(_) => return Err("`label` must be a string".into()),
    };
    Ok(CorpusRecord { text, label })
}

/// Deterministic shuffled split of `0..n` into (train, test) positions.
/// Both halves come back sorted so the original order is kept.
pub fn train_test_split(n: usize, test_ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * test_ratio.clamp(0.0, 1.0)).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}
