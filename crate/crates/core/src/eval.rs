//! Topic and representation quality metrics.
//!
//! Coherence follows the usual C_V configuration: boolean sliding windows of
//! [`CV_WINDOW`] tokens over a reference corpus, NPMI with
//! `eps = `[`NPMI_EPS`], one-set segmentation and indirect cosine
//! similarity. Clustering quality assigns each document to its most
//! probable topic and compares against gold labels with Purity and NMI
//! (natural log, normalized by the geometric mean of the two entropies).

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BowDocument, EmbeddingTable, Vocabulary};
use crate::math::{dot, norm};
use crate::ntm::{topic_distribution, topic_words, NtmError, NtmParams};
use crate::trainer::infer_doc_topics;

pub const CV_WINDOW: usize = 110;
pub const NPMI_EPS: f64 = 1e-12;
pub const COHERENCE_TOP_N: usize = 10;
pub const DIVERSITY_TOP_N: usize = 25;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} assignments vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("window size must be at least 1")]
    InvalidWindow,
    #[error(transparent)]
    Ntm(#[from] NtmError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Window counts of single words and word pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceStats {
    pub window_size: usize,
    pub window_count: u64,
    pub doc_freq: HashMap<String, u64>,
    /// Keys are ordered so that `a < b`.
    pub joint_freq: HashMap<(String, String), u64>,
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl CooccurrenceStats {
    pub fn df(&self, w: &str) -> u64 {
        self.doc_freq.get(w).copied().unwrap_or(0)
    }

    /// Number of windows containing both words; `joint(w, w) = df(w)`.
    pub fn joint(&self, a: &str, b: &str) -> u64 {
        if a == b {
            return self.df(a);
        }
        self.joint_freq.get(&pair_key(a, b)).copied().unwrap_or(0)
    }

    fn merge(mut self, other: Self) -> Self {
        self.window_count += other.window_count;
        for (k, v) in other.doc_freq {
            *self.doc_freq.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.joint_freq {
            *self.joint_freq.entry(k).or_insert(0) += v;
        }
        self
    }
}

/// Counts over all words of the reference documents. Quadratic in the number
/// of distinct words per window; prefer [`build_cooccurrence_for`] on large
/// corpora.
pub fn build_cooccurrence<S: AsRef<str> + Sync>(
    reference_docs: &[Vec<S>],
    window: usize,
) -> Result<CooccurrenceStats> {
    build_cooccurrence_for(reference_docs, window, None)
}

/// Like [`build_cooccurrence`] but only records words in `targets` (window
/// counts still cover every window).
pub fn build_cooccurrence_for<S: AsRef<str> + Sync>(
    reference_docs: &[Vec<S>],
    window: usize,
    targets: Option<&HashSet<String>>,
) -> Result<CooccurrenceStats> {
    if window == 0 {
        return Err(EvalError::InvalidWindow);
    }
    let stats = reference_docs
        .par_iter()
        .map(|doc| count_document(doc, window, targets))
        .reduce(CooccurrenceStats::default, CooccurrenceStats::merge);
    Ok(CooccurrenceStats {
        window_size: window,
        ..stats
    })
}

fn count_document<S: AsRef<str>>(
    doc: &[S],
    window: usize,
    targets: Option<&HashSet<String>>,
) -> CooccurrenceStats {
    let mut stats = CooccurrenceStats::default();
    if doc.is_empty() {
        return stats;
    }
    let tokens: Vec<Option<&str>> = doc
        .iter()
        .map(|t| {
            let t = t.as_ref();
            targets.is_none_or(|ts| ts.contains(t)).then_some(t)
        })
        .collect();
    let n_windows = if tokens.len() <= window {
        1
    } else {
        tokens.len() - window + 1
    };
    let width = window.min(tokens.len());
    // Multiset of tracked words in the current window.
    let mut present: BTreeMap<&str, usize> = BTreeMap::new();
    for t in tokens[..width].iter().flatten() {
        *present.entry(t).or_insert(0) += 1;
    }
    for start in 0..n_windows {
        if start > 0 {
            if let Some(out) = tokens[start - 1] {
                let c = present.get_mut(out).expect("word in window");
                *c -= 1;
                if *c == 0 {
                    present.remove(out);
                }
            }
            if let Some(inc) = tokens[start + width - 1] {
                *present.entry(inc).or_insert(0) += 1;
            }
        }
        stats.window_count += 1;
        let words: Vec<&str> = present.keys().copied().collect();
        for (i, a) in words.iter().enumerate() {
            *stats.doc_freq.entry(a.to_string()).or_insert(0) += 1;
            for b in &words[i + 1..] {
                *stats
                    .joint_freq
                    .entry((a.to_string(), b.to_string()))
                    .or_insert(0) += 1;
            }
        }
    }
    stats
}

/// Treats each bag-of-words document as a single window.
pub fn document_cooccurrence(docs: &[BowDocument], vocab: &Vocabulary) -> CooccurrenceStats {
    let token_docs: Vec<Vec<&str>> = docs
        .iter()
        .map(|d| d.counts.keys().map(|&i| vocab.word(i)).collect())
        .collect();
    let longest = token_docs.iter().map(Vec::len).max().unwrap_or(1).max(1);
    build_cooccurrence(&token_docs, longest).expect("window is positive")
}

/// Normalized PMI of two words over window frequencies, in `[-1, 1]`.
/// A word that never occurs in the reference has no association and
/// scores 0.
pub fn npmi(a: &str, b: &str, stats: &CooccurrenceStats, eps: f64) -> f64 {
    if stats.window_count == 0 {
        return 0.0;
    }
    let n = stats.window_count as f64;
    let pa = stats.df(a) as f64 / n;
    let pb = stats.df(b) as f64 / n;
    if pa == 0.0 || pb == 0.0 {
        return 0.0;
    }
    let pab = stats.joint(a, b) as f64 / n + eps;
    let denom = -pab.ln();
    if denom <= 0.0 {
        // Both words occur in every window.
        return 1.0;
    }
    ((pab / (pa * pb)).ln() / denom).clamp(-1.0, 1.0)
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let d = norm(a) * norm(b);
    (d > 0.0).then(|| dot(a, b) / d)
}

/// C_V coherence of one topic's words.
pub fn cv_coherence<S: AsRef<str>>(topic_words: &[S], stats: &CooccurrenceStats) -> f64 {
    let words: Vec<&str> = topic_words.iter().map(|w| w.as_ref()).collect();
    if words.is_empty() {
        return 0.0;
    }
    let vectors: Vec<Vec<f64>> = words
        .iter()
        .map(|a| words.iter().map(|b| npmi(a, b, stats, NPMI_EPS)).collect())
        .collect();
    let mut total = vec![0.0; words.len()];
    for v in &vectors {
        total.iter_mut().zip(v).for_each(|(t, x)| *t += x);
    }
    let sims: f64 = vectors
        .iter()
        .zip(&words)
        .map(|(v, w)| {
            cosine(v, &total).unwrap_or_else(|| {
                log::debug!("zero NPMI vector for `{w}`; similarity taken as 0");
                0.0
            })
        })
        .sum();
    sims / words.len() as f64
}

/// Mean NPMI over all unordered word pairs of a topic.
pub fn npmi_coherence<S: AsRef<str>>(topic_words: &[S], stats: &CooccurrenceStats) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, a) in topic_words.iter().enumerate() {
        for b in &topic_words[i + 1..] {
            sum += npmi(a.as_ref(), b.as_ref(), stats, NPMI_EPS);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Cluster id per document alongside its gold label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub assignments: Vec<usize>,
    pub labels: Vec<String>,
}

impl ClusterAssignment {
    pub fn new(assignments: Vec<usize>, labels: Vec<String>) -> Result<Self> {
        if assignments.len() != labels.len() {
            return Err(EvalError::LengthMismatch(assignments.len(), labels.len()));
        }
        if assignments.is_empty() {
            return Err(EvalError::Empty("cluster assignment".into()));
        }
        Ok(Self {
            assignments,
            labels,
        })
    }

    fn contingency(&self) -> HashMap<(usize, &str), usize> {
        let mut m = HashMap::new();
        for (c, l) in self.assignments.iter().zip(&self.labels) {
            *m.entry((*c, l.as_str())).or_insert(0) += 1;
        }
        m
    }
}

fn check(ca: &ClusterAssignment) -> Result<()> {
    if ca.assignments.len() != ca.labels.len() {
        return Err(EvalError::LengthMismatch(ca.assignments.len(), ca.labels.len()));
    }
    if ca.assignments.is_empty() {
        return Err(EvalError::Empty("cluster assignment".into()));
    }
    Ok(())
}

pub fn purity(ca: &ClusterAssignment) -> Result<f64> {
    check(ca)?;
    let mut best: HashMap<usize, usize> = HashMap::new();
    for ((c, _), n) in ca.contingency() {
        let b = best.entry(c).or_insert(0);
        *b = (*b).max(n);
    }
    Ok(best.values().sum::<usize>() as f64 / ca.assignments.len() as f64)
}

fn entropy<I: IntoIterator<Item = usize>>(counts: I, n: f64) -> f64 {
    counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

pub fn nmi(ca: &ClusterAssignment) -> Result<f64> {
    check(ca)?;
    let n = ca.assignments.len() as f64;
    let mut by_cluster: HashMap<usize, usize> = HashMap::new();
    let mut by_label: HashMap<&str, usize> = HashMap::new();
    for (c, l) in ca.assignments.iter().zip(&ca.labels) {
        *by_cluster.entry(*c).or_insert(0) += 1;
        *by_label.entry(l.as_str()).or_insert(0) += 1;
    }
    let hc = entropy(by_cluster.values().copied(), n);
    let hl = entropy(by_label.values().copied(), n);
    if hc <= 0.0 || hl <= 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = ca
        .contingency()
        .iter()
        .map(|(&(c, l), &nij)| {
            let pij = nij as f64 / n;
            let pc = by_cluster[&c] as f64 / n;
            let pl = by_label[l] as f64 / n;
            pij * (pij / (pc * pl)).ln()
        })
        .sum();
    Ok((mi / (hc * hl).sqrt()).clamp(0.0, 1.0))
}

pub fn pn(purity_value: f64, nmi_value: f64) -> f64 {
    0.5 * (purity_value + nmi_value)
}

/// Unique words across all lists over the total number of slots.
pub fn topic_diversity<S: AsRef<str>>(topics: &[Vec<S>]) -> f64 {
    let slots: usize = topics.iter().map(Vec::len).sum();
    if slots == 0 {
        return 0.0;
    }
    let unique: HashSet<&str> = topics.iter().flatten().map(|w| w.as_ref()).collect();
    unique.len() as f64 / slots as f64
}

pub fn topic_quality(tc: f64, td: f64) -> f64 {
    tc * td
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum W2vMetric {
    Cosine,
    L1,
    L2,
}

fn w2v_distance(a: &[f64], b: &[f64], metric: W2vMetric) -> f64 {
    match metric {
        W2vMetric::Cosine => 1.0 - cosine(a, b).unwrap_or(0.0),
        W2vMetric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        W2vMetric::L2 => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
    }
}

/// Mean pairwise embedding distance within one topic. Words without an
/// embedding are ignored; `None` if fewer than two words remain.
pub fn w2v_topic_distance<S: AsRef<str>>(
    words: &[S],
    emb: &EmbeddingTable,
    metric: W2vMetric,
) -> Option<f64> {
    let vecs: Vec<&[f64]> = words.iter().filter_map(|w| emb.get(w.as_ref())).collect();
    if vecs.len() < 2 {
        return None;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            sum += w2v_distance(vecs[i], vecs[j], metric);
            n += 1;
        }
    }
    Some(sum / n as f64)
}

/// [`w2v_topic_distance`] averaged over topics (lower is better). Topics
/// with fewer than two embedded words are left out.
pub fn w2v_quality<S: AsRef<str>>(topics: &[Vec<S>], emb: &EmbeddingTable, metric: W2vMetric) -> f64 {
    let scores: Vec<f64> = topics
        .iter()
        .filter_map(|t| w2v_topic_distance(t, emb, metric))
        .collect();
    if scores.is_empty() {
        log::warn!("no topic has two embedded words; w2v quality is 0");
        return 0.0;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicMetrics {
    pub topic: usize,
    pub words: Vec<String>,
    pub cv: f64,
    pub npmi: f64,
    pub w2v_cosine: Option<f64>,
    pub w2v_l1: Option<f64>,
    pub w2v_l2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cv: f64,
    pub npmi_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pn: Option<f64>,
    pub td: f64,
    pub tq: f64,
    pub w2v_cosine: f64,
    pub w2v_l1: f64,
    pub w2v_l2: f64,
    pub topics: Vec<TopicMetrics>,
}

/// Most probable topic of each document.
pub fn assign_clusters(params: &NtmParams, docs: &[BowDocument]) -> Result<Vec<usize>> {
    docs.par_iter()
        .map(|d| {
            let z = infer_doc_topics(params, d)?;
            Ok(crate::math::top_n(&z, 1)[0])
        })
        .collect()
}

/// Clustering metrics when every document carries a label.
pub fn clustering_scores(
    params: &NtmParams,
    docs: &[BowDocument],
) -> Result<Option<(f64, f64, f64)>> {
    if docs.is_empty() || docs.iter().any(|d| d.label.is_none()) {
        return Ok(None);
    }
    let labels = docs.iter().map(|d| d.label.clone().unwrap_or_default()).collect();
    let ca = ClusterAssignment::new(assign_clusters(params, docs)?, labels)?;
    let (p, n) = (purity(&ca)?, nmi(&ca)?);
    Ok(Some((p, n, pn(p, n))))
}

/// Top words of every topic.
pub fn model_topics(params: &NtmParams, vocab: &Vocabulary, n: usize) -> Result<Vec<Vec<String>>> {
    (0..params.num_topics())
        .map(|k| Ok(topic_words(&topic_distribution(params, k)?, vocab, n).words))
        .collect()
}

/// All metrics for a trained model. `reference` must cover the topics' top
/// words (see [`build_cooccurrence_for`]); clustering metrics are computed
/// only when every test document is labelled.
pub fn evaluate_model(
    params: &NtmParams,
    vocab: &Vocabulary,
    test_docs: &[BowDocument],
    reference: &CooccurrenceStats,
    emb: &EmbeddingTable,
) -> Result<MetricsReport> {
    let top10 = model_topics(params, vocab, COHERENCE_TOP_N)?;
    let top25 = model_topics(params, vocab, DIVERSITY_TOP_N)?;
    let topics: Vec<TopicMetrics> = top10
        .iter()
        .enumerate()
        .map(|(k, words)| TopicMetrics {
            topic: k,
            words: words.clone(),
            cv: cv_coherence(words, reference),
            npmi: npmi_coherence(words, reference),
            w2v_cosine: w2v_topic_distance(words, emb, W2vMetric::Cosine),
            w2v_l1: w2v_topic_distance(words, emb, W2vMetric::L1),
            w2v_l2: w2v_topic_distance(words, emb, W2vMetric::L2),
        })
        .collect();
    let k = topics.len().max(1) as f64;
    let cv = topics.iter().map(|t| t.cv).sum::<f64>() / k;
    let npmi_mean = topics.iter().map(|t| t.npmi).sum::<f64>() / k;
    let td = topic_diversity(&top25);
    let clustering = clustering_scores(params, test_docs)?;
    if clustering.is_none() {
        log::warn!("test documents are not all labelled; skipping purity/NMI/PN");
    }
    Ok(MetricsReport {
        cv,
        npmi_mean,
        purity: clustering.map(|c| c.0),
        nmi: clustering.map(|c| c.1),
        pn: clustering.map(|c| c.2),
        td,
        tq: topic_quality(cv, td),
        w2v_cosine: w2v_quality(&top10, emb, W2vMetric::Cosine),
        w2v_l1: w2v_quality(&top10, emb, W2vMetric::L1),
        w2v_l2: w2v_quality(&top10, emb, W2vMetric::L2),
        topics,
    })
}
