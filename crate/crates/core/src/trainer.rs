//! Warm-up training of the topic model followed by confidence-weighted
//! refinement toward LLM-suggested word sets.
//!
//! Every step computes the minibatch ELBO. Once `step > t_refine`, each
//! topic's top-N words are sent to the suggestion provider (through a cache
//! keyed on the word set) and the refinement loss
//!
//! ```text
//! L_ref = Σ_k Conf_k · D(t_k, u_k)
//! ```
//!
//! is added with weight `gamma`. `t_k` is the topic's distribution
//! restricted to its top-N words and renormalized, `u_k` is uniform over the
//! suggested words and `D` is the entropic OT value over embedding cosine
//! costs (or one of the closed-form divergences). Only the decoder `φ`
//! receives refinement gradients; the top-N selection is frozen within a
//! step.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BowCorpus, BowDocument, EmbeddingTable, Vocabulary};
use crate::eval;
use crate::llm::{
    CachedOutcome, CompletionProvider, Confidence, ConfidenceMethod, LlmError, PromptSpec,
    QueryCounts, Suggester, Suggestion, SuggestionCache,
};
use crate::math::dot;
use crate::ntm::{
    batch_loss_and_grad, encode, sample_noise, topic_distribution, topic_words, Adam, NtmError,
    NtmParams, TopicWords,
};
use crate::ot::{
    cost_matrix, divergence_and_grad, sinkhorn, union_support, DivergenceKind, OtError,
    SinkhornConfig, DEFAULT_KL_SMOOTHING,
};

pub const UNLABELED: &str = "unlabeled";
pub const REPORT_TOP_WORDS: usize = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss at step {step} (ntm {ntm}, refine {refine})")]
    NonFiniteLoss { step: u64, ntm: f64, refine: f64 },
    #[error("topic {topic}: {source}")]
    Topic {
        topic: usize,
        #[source]
        source: OtError,
    },
    #[error(transparent)]
    Ntm(#[from] NtmError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn default_n_top_words() -> usize {
    10
}
fn default_m_refined() -> usize {
    10
}
fn default_gamma() -> f64 {
    200.0
}
fn default_epsilon() -> f64 {
    crate::ot::DEFAULT_EPSILON
}
fn default_lr() -> f64 {
    0.002
}
fn default_batch_size() -> usize {
    64
}
fn default_hidden() -> usize {
    crate::ntm::DEFAULT_HIDDEN
}
fn default_epochs() -> usize {
    50
}
fn default_label_words() -> usize {
    crate::llm::prompt::DEFAULT_LABEL_WORDS
}
fn default_template() -> String {
    crate::llm::prompt::DEFAULT_TEMPLATE.to_string()
}
fn default_ot_max_iter() -> usize {
    crate::ot::DEFAULT_MAX_ITER
}
fn default_ot_tol() -> f64 {
    crate::ot::DEFAULT_TOL
}
fn default_max_in_flight() -> usize {
    4
}
fn default_confidence() -> ConfidenceMethod {
    ConfidenceMethod::LabelTokenProb
}
fn default_divergence() -> DivergenceKind {
    DivergenceKind::Ot
}

/// Training settings, read from a JSON file with these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub k_topics: usize,
    /// Topic words sent to the LLM and compared against its suggestion.
    #[serde(default = "default_n_top_words")]
    pub n_top_words: usize,
    /// Maximum number of suggested words kept.
    #[serde(default = "default_m_refined")]
    pub m_refined: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Total minibatch steps; defaults to `epochs × batches per epoch`.
    #[serde(default)]
    pub t_total: Option<u64>,
    /// Last warm-up step; defaults to `t_total - 50` (floored at 0).
    #[serde(default)]
    pub t_refine: Option<u64>,
    #[serde(default = "default_epsilon")]
    pub epsilon_ot: f64,
    #[serde(default = "default_divergence")]
    pub divergence: DivergenceKind,
    #[serde(default = "default_confidence")]
    pub confidence_method: ConfidenceMethod,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_hidden")]
    pub hidden_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_label_words")]
    pub n_label_words: usize,
    #[serde(default = "default_template")]
    pub template_id: String,
    #[serde(default = "default_ot_max_iter")]
    pub ot_max_iter: usize,
    #[serde(default = "default_ot_tol")]
    pub ot_tol: f64,
    /// Write a checkpoint every this many steps (the final one is always
    /// written).
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    /// Concurrent LLM requests per step.
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Compute coherence/diversity (and PN on labelled held-out data) at the
    /// end of every epoch.
    #[serde(default)]
    pub eval_every_epoch: bool,
}

impl TrainConfig {
    pub fn new(k_topics: usize) -> Self {
        serde_json::from_value(serde_json::json!({ "k_topics": k_topics }))
            .expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        let cfg = Self::from_json(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that does not depend on the corpus size.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.k_topics < 2 {
            return fail("k_topics must be at least 2");
        }
        if self.n_top_words < 1 {
            return fail("n_top_words must be at least 1");
        }
        if self.m_refined < 1 {
            return fail("m_refined must be at least 1");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail("gamma must be finite and >= 0");
        }
        if !(self.epsilon_ot > 0.0 && self.epsilon_ot.is_finite()) {
            return fail("epsilon_ot must be > 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be > 0");
        }
        if self.batch_size == 0 || self.hidden_size == 0 || self.epochs == 0 {
            return fail("batch_size, hidden_size and epochs must be positive");
        }
        if self.ot_max_iter == 0 || !(self.ot_tol > 0.0) {
            return fail("ot_max_iter and ot_tol must be positive");
        }
        if let (Some(r), Some(t)) = (self.t_refine, self.t_total) {
            if r > t {
                return fail("t_refine must not exceed t_total");
            }
        }
        if self.checkpoint_every == Some(0) {
            return fail("checkpoint_every must be positive");
        }
        self.prompt_spec().validate()?;
        Ok(())
    }

    pub fn prompt_spec(&self) -> PromptSpec {
        PromptSpec {
            n_label_words: self.n_label_words,
            m_refined_words: self.m_refined,
            template_id: self.template_id.clone(),
        }
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.epsilon_ot,
            max_iter: self.ot_max_iter,
            tol: self.ot_tol,
        }
    }

    /// Step counts for a corpus of `n_docs` documents.
    pub fn schedule(&self, n_docs: usize) -> Result<Schedule> {
        if n_docs == 0 {
            return Err(TrainError::EmptyCorpus);
        }
        let batches_per_epoch = n_docs.div_ceil(self.batch_size) as u64;
        let t_total = self
            .t_total
            .unwrap_or(self.epochs as u64 * batches_per_epoch);
        let t_refine = self.t_refine.unwrap_or(t_total.saturating_sub(50));
        if t_refine > t_total {
            return Err(TrainError::Config(format!(
                "t_refine {t_refine} exceeds t_total {t_total}"
            )));
        }
        Ok(Schedule {
            t_total,
            t_refine,
            batches_per_epoch,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub t_total: u64,
    pub t_refine: u64,
    pub batches_per_epoch: u64,
}

/// `ntm + gamma · refine` after the warm-up, `ntm` up to and including
/// step `t_refine`.
pub fn total_loss(ntm: f64, refine: f64, gamma: f64, step: u64, t_refine: u64) -> f64 {
    if step > t_refine {
        ntm + gamma * refine
    } else {
        ntm
    }
}

/// One topic's input to the refinement loss: the frozen top-N rows of `φ`
/// and the words to pull the topic toward.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineTarget {
    pub topic_index: usize,
    pub top_indices: Vec<usize>,
    pub refined_words: Vec<String>,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineSettings {
    pub divergence: DivergenceKind,
    pub sinkhorn: SinkhornConfig,
    pub kl_smoothing: f64,
}

impl RefineSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            divergence: cfg.divergence,
            sinkhorn: cfg.sinkhorn(),
            kl_smoothing: DEFAULT_KL_SMOOTHING,
        }
    }
}

impl Default for RefineSettings {
    fn default() -> Self {
        Self {
            divergence: DivergenceKind::Ot,
            sinkhorn: SinkhornConfig::default(),
            kl_smoothing: DEFAULT_KL_SMOOTHING,
        }
    }
}

/// Per-topic outcome of [`refinement_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct TopicRefinement {
    pub topic_index: usize,
    /// Transport cost `⟨C, P⟩` for OT; the divergence value otherwise.
    pub ot_cost: f64,
    /// Unweighted objective term: the regularized OT value for OT (never
    /// below `ot_cost`), the divergence otherwise.
    pub objective: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementOutput {
    pub loss: f64,
    /// V×K, same layout as `dec_phi`.
    pub grad_phi: Array2<f64>,
    pub topics: Vec<TopicRefinement>,
}

/// The topic's distribution restricted to `rows`, renormalized. Equal to a
/// softmax over those rows of `φ[:, k]`.
fn restricted_topic(params: &NtmParams, k: usize, rows: &[usize]) -> Vec<f64> {
    let col = params.dec_phi.column(k);
    let logits: Vec<f64> = rows.iter().map(|&i| col[i]).collect();
    crate::math::softmax(&logits)
}

/// Objective value and its gradient with respect to the restricted topic
/// distribution `t`.
fn topic_objective(
    target: &RefineTarget,
    t: &[f64],
    vocab: &Vocabulary,
    emb: &EmbeddingTable,
    settings: &RefineSettings,
) -> std::result::Result<(f64, f64, Vec<f64>), OtError> {
    let words: Vec<&str> = target.top_indices.iter().map(|&i| vocab.word(i)).collect();
    let refined: Vec<&str> = target.refined_words.iter().map(String::as_str).collect();
    match settings.divergence {
        DivergenceKind::Ot => {
            let c = cost_matrix(&words, &refined, emb)?;
            let b = vec![1.0 / refined.len() as f64; refined.len()];
            let r = sinkhorn(t, &b, &c, &settings.sinkhorn)?;
            let grad = crate::ot::ot_grad_source(&r);
            Ok((r.cost, r.value, grad))
        }
        kind => {
            let (_, p, q) = union_support(&words, t, &refined);
            let (v, g) = divergence_and_grad(&p, &q, kind, settings.kl_smoothing)?;
            Ok((v, v, g[..t.len()].to_vec()))
        }
    }
}

/// Confidence-weighted distance between each topic and its suggested words,
/// with the gradient with respect to `dec_phi`.
///
/// The gradient flows through the renormalized top-N distribution only
/// (`∂t_i/∂φ_jk = t_i(δ_ij − t_j)` for rows in the frozen selection); every
/// other parameter block gets zero.
pub fn refinement_loss(
    params: &NtmParams,
    targets: &[RefineTarget],
    vocab: &Vocabulary,
    emb: &EmbeddingTable,
    settings: &RefineSettings,
) -> Result<RefinementOutput> {
    let k_topics = params.num_topics();
    for t in targets {
        if t.topic_index >= k_topics {
            return Err(NtmError::Index {
                index: t.topic_index,
                k: k_topics,
            }
            .into());
        }
        if t.top_indices.is_empty() || t.refined_words.is_empty() {
            return Err(TrainError::Config(format!(
                "topic {} has an empty word list",
                t.topic_index
            )));
        }
    }
    let per_topic: Vec<(f64, f64, Vec<f64>)> = targets
        .par_iter()
        .map(|target| {
            let t = restricted_topic(params, target.topic_index, &target.top_indices);
            let (cost, value, g) = topic_objective(target, &t, vocab, emb, settings).map_err(
                |source| TrainError::Topic {
                    topic: target.topic_index,
                    source,
                },
            )?;
            let gs: Vec<f64> = g.iter().map(|x| target.confidence * x).collect();
            let mean = dot(&t, &gs);
            let dphi: Vec<f64> = t.iter().zip(&gs).map(|(ti, gi)| ti * (gi - mean)).collect();
            Ok((cost, value, dphi))
        })
        .collect::<Result<_>>()?;

    let mut grad_phi = Array2::zeros(params.dec_phi.raw_dim());
    let mut loss = 0.0;
    let mut topics = Vec::with_capacity(targets.len());
    for (target, (cost, value, dphi)) in targets.iter().zip(per_topic) {
        loss += target.confidence * value;
        for (&row, d) in target.top_indices.iter().zip(&dphi) {
            grad_phi[[row, target.topic_index]] += d;
        }
        topics.push(TopicRefinement {
            topic_index: target.topic_index,
            ot_cost: cost,
            objective: value,
            confidence: target.confidence,
        });
    }
    Ok(RefinementOutput {
        loss,
        grad_phi,
        topics,
    })
}

/// Document-topic proportions on the noise-free path.
pub fn infer_doc_topics(params: &NtmParams, x: &BowDocument) -> std::result::Result<Vec<f64>, NtmError> {
    let zero = vec![0.0; params.num_topics()];
    Ok(encode(x, params, &zero)?.z.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub step: u64,
    pub topic_index: usize,
    pub original_words: TopicWords,
    pub suggestion: Suggestion,
    pub confidence: Confidence,
    pub ot_cost: f64,
    pub objective: f64,
}

/// One CSV row per training step. Confidence and parse rate are NaN during
/// warm-up (no queries are made).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub ntm_loss: f64,
    pub refine_loss: f64,
    pub total_loss: f64,
    pub mean_confidence: f64,
    pub parse_success_rate: f64,
}

pub const METRICS_HEADER: [&str; 6] = [
    "step",
    "ntm_loss",
    "refine_loss",
    "total_loss",
    "mean_confidence",
    "parse_success_rate",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub mean_ntm_loss: f64,
    pub mean_total_loss: f64,
    /// Mean pairwise NPMI of top-10 words, documents as windows.
    pub npmi: Option<f64>,
    pub td: Option<f64>,
    pub purity: Option<f64>,
    pub nmi: Option<f64>,
    pub pn: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochMetrics>,
}

fn write_rows<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl MetricsLog {
    pub fn steps_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        if self.steps.is_empty() {
            writeln!(buf, "{}", METRICS_HEADER.join(","))?;
        }
        write_rows(&self.steps, &mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }

    pub fn write_steps(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.steps_csv()?)?;
        Ok(())
    }

    pub fn write_epochs(&self, path: &Path) -> Result<()> {
        write_rows(&self.epochs, std::fs::File::create(path)?)
    }

    pub fn read_steps(path: &Path) -> Result<Vec<StepMetrics>> {
        let mut r = csv::Reader::from_path(path)?;
        r.deserialize().map(|row| row.map_err(Into::into)).collect()
    }
}

/// Row of the topic report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicReport {
    pub topic: usize,
    pub label: Option<String>,
    pub words: Vec<String>,
    pub probs: Vec<f64>,
    pub confidence: Option<f64>,
}

/// Top words of every topic with the latest label and confidence found in
/// `records` ("unlabeled" and no confidence for topics never refined).
pub fn export_topics(
    params: &NtmParams,
    vocab: &Vocabulary,
    records: &[RefinementRecord],
) -> std::result::Result<Vec<TopicReport>, NtmError> {
    (0..params.num_topics())
        .map(|k| {
            let tw = topic_words(&topic_distribution(params, k)?, vocab, REPORT_TOP_WORDS);
            let latest = records
                .iter()
                .filter(|r| r.topic_index == k)
                .max_by_key(|r| r.step);
            Ok(TopicReport {
                topic: k,
                label: Some(
                    latest
                        .map(|r| r.suggestion.label.join(" "))
                        .unwrap_or_else(|| UNLABELED.to_string()),
                ),
                words: tw.words,
                probs: tw.probs,
                confidence: latest.map(|r| r.confidence.value),
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Callbacks invoked during [`train`]. All methods default to no-ops.
pub trait TrainObserver {
    /// After the parameter update of `step`.
    fn on_step(&mut self, _step: u64, _params: &NtmParams) -> Result<()> {
        Ok(())
    }
    /// Every `checkpoint_every` steps and after the last step.
    fn on_checkpoint(&mut self, _step: u64, _params: &NtmParams) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _metrics: &EpochMetrics, _params: &NtmParams) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: NtmParams,
    pub metrics: MetricsLog,
    pub records: Vec<RefinementRecord>,
    pub schedule: Schedule,
    pub llm: QueryCounts,
}

/// Optional inputs to [`train`].
#[derive(Default)]
pub struct TrainExtras<'a> {
    pub cache: Option<SuggestionCache>,
    /// Labelled held-out documents for per-epoch PN.
    pub held_out: Option<&'a [BowDocument]>,
    pub observer: Option<&'a mut dyn TrainObserver>,
}

struct StepRefinement {
    loss: f64,
    grad_phi: Option<Array2<f64>>,
    mean_confidence: f64,
    success_rate: f64,
    records: Vec<RefinementRecord>,
}

fn refine_step(
    step: u64,
    params: &NtmParams,
    vocab: &Vocabulary,
    emb: &EmbeddingTable,
    cfg: &TrainConfig,
    suggester: &Suggester<'_>,
) -> Result<StepRefinement> {
    let k_topics = params.num_topics();
    let originals: Vec<TopicWords> = (0..k_topics)
        .map(|k| Ok(topic_words(&topic_distribution(params, k)?, vocab, cfg.n_top_words)))
        .collect::<std::result::Result<_, NtmError>>()?;
    let word_sets: Vec<Vec<String>> = originals.iter().map(|t| t.words.clone()).collect();
    let outcomes = suggester.suggest_all(&word_sets, vocab);

    let mut targets = Vec::new();
    let mut accepted: Vec<(TopicWords, Suggestion, Confidence)> = Vec::new();
    for (k, (orig, outcome)) in originals.into_iter().zip(outcomes).enumerate() {
        match outcome {
            Ok(CachedOutcome::Refined {
                suggestion,
                confidence,
            }) => {
                let refined: Vec<String> = suggestion
                    .refined_words
                    .iter()
                    .filter(|w| cfg.divergence != DivergenceKind::Ot || emb.contains(w))
                    .cloned()
                    .collect();
                if refined.is_empty() {
                    log::warn!("step {step}, topic {k}: no suggested word has an embedding");
                    continue;
                }
                targets.push(RefineTarget {
                    topic_index: k,
                    top_indices: orig.indices.clone(),
                    refined_words: refined,
                    confidence: confidence.value,
                });
                accepted.push((orig, suggestion, confidence));
            }
            Ok(CachedOutcome::Failed { reason }) => {
                log::debug!("step {step}, topic {k}: skipped ({reason})");
            }
            Err(e) => log::warn!("step {step}, topic {k}: left unrefined ({e})"),
        }
    }
    let n_ok = targets.len();
    let success_rate = n_ok as f64 / k_topics as f64;
    if n_ok == 0 {
        return Ok(StepRefinement {
            loss: 0.0,
            grad_phi: None,
            mean_confidence: f64::NAN,
            success_rate,
            records: Vec::new(),
        });
    }
    let out = refinement_loss(params, &targets, vocab, emb, &RefineSettings::from_config(cfg))?;
    let mean_confidence = targets.iter().map(|t| t.confidence).sum::<f64>() / n_ok as f64;
    let records = accepted
        .into_iter()
        .zip(&out.topics)
        .map(|((orig, suggestion, confidence), tr)| RefinementRecord {
            step,
            topic_index: tr.topic_index,
            original_words: orig,
            suggestion,
            confidence,
            ot_cost: tr.ot_cost,
            objective: tr.objective,
        })
        .collect();
    Ok(StepRefinement {
        loss: out.loss,
        grad_phi: Some(out.grad_phi),
        mean_confidence,
        success_rate,
        records,
    })
}

fn epoch_metrics(
    epoch: usize,
    step: u64,
    losses: &[(f64, f64)],
    params: &NtmParams,
    corpus: &BowCorpus,
    cfg: &TrainConfig,
    extras: &TrainExtras<'_>,
) -> Result<EpochMetrics> {
    let n = losses.len().max(1) as f64;
    let mut m = EpochMetrics {
        epoch,
        step,
        mean_ntm_loss: losses.iter().map(|l| l.0).sum::<f64>() / n,
        mean_total_loss: losses.iter().map(|l| l.1).sum::<f64>() / n,
        npmi: None,
        td: None,
        purity: None,
        nmi: None,
        pn: None,
    };
    if cfg.eval_every_epoch {
        let top10 = eval::model_topics(params, &corpus.vocab, eval::COHERENCE_TOP_N)?;
        let top25 = eval::model_topics(params, &corpus.vocab, eval::DIVERSITY_TOP_N)?;
        let stats = eval::document_cooccurrence(&corpus.docs, &corpus.vocab);
        m.npmi = Some(
            top10
                .iter()
                .map(|t| eval::npmi_coherence(t, &stats))
                .sum::<f64>()
                / top10.len() as f64,
        );
        m.td = Some(eval::topic_diversity(&top25));
        if let Some(held) = extras.held_out {
            if let Some((p, nm, pn)) = eval::clustering_scores(params, held)? {
                m.purity = Some(p);
                m.nmi = Some(nm);
                m.pn = Some(pn);
            }
        }
    }
    Ok(m)
}

/// Runs warm-up and refinement training.
///
/// Parameter initialization, minibatch order and reparameterization noise
/// all come from one ChaCha8 stream seeded with `cfg.seed`; refinement never
/// draws from it, so `gamma = 0` reproduces plain training bit for bit.
pub fn train(
    corpus: &BowCorpus,
    emb: &EmbeddingTable,
    provider: &dyn CompletionProvider,
    cfg: &TrainConfig,
    mut extras: TrainExtras<'_>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let schedule = cfg.schedule(corpus.len())?;
    let cache = extras.cache.take().unwrap_or_default();
    let suggester = Suggester::new(provider, cache, cfg.prompt_spec(), cfg.confidence_method)?
        .with_max_in_flight(cfg.max_in_flight);
    let vocab = &corpus.vocab;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = NtmParams::init(vocab.len(), cfg.k_topics, cfg.hidden_size, &mut rng);
    let mut adam = Adam::new(&params, cfg.lr);
    let mut metrics = MetricsLog::default();
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..corpus.len()).collect();

    let mut step = 0u64;
    let mut epoch = 0usize;
    while step < schedule.t_total {
        epoch += 1;
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            if step >= schedule.t_total {
                break;
            }
            step += 1;
            let docs: Vec<&BowDocument> = batch.iter().map(|&i| &corpus.docs[i]).collect();
            let noises: Vec<Vec<f64>> = docs
                .iter()
                .map(|_| sample_noise(cfg.k_topics, &mut rng))
                .collect();
            let (ntm, mut grad) = batch_loss_and_grad(&docs, &params, &noises)?;

            let (refine, mean_confidence, success_rate) = if step > schedule.t_refine {
                let r = refine_step(step, &params, vocab, emb, cfg, &suggester)?;
                if let Some(g) = &r.grad_phi {
                    if cfg.gamma != 0.0 {
                        grad.dec_phi.scaled_add(cfg.gamma, g);
                    }
                }
                records.extend(r.records);
                (r.loss, r.mean_confidence, r.success_rate)
            } else {
                (0.0, f64::NAN, f64::NAN)
            };
            let total = total_loss(ntm.total, refine, cfg.gamma, step, schedule.t_refine);
            if !total.is_finite() || !ntm.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    ntm: ntm.total,
                    refine,
                });
            }
            adam.update(&mut params, &grad);
            metrics.steps.push(StepMetrics {
                step,
                ntm_loss: ntm.total,
                refine_loss: refine,
                total_loss: total,
                mean_confidence,
                parse_success_rate: success_rate,
            });
            epoch_losses.push((ntm.total, total));
            log::debug!("step {step}: ntm {:.4} refine {refine:.4}", ntm.total);

            if let Some(obs) = extras.observer.as_deref_mut() {
                obs.on_step(step, &params)?;
                let due = cfg.checkpoint_every.is_some_and(|n| step.is_multiple_of(n));
                if due || step == schedule.t_total {
                    obs.on_checkpoint(step, &params)?;
                }
            }
        }
        let em = epoch_metrics(epoch, step, &epoch_losses, &params, corpus, cfg, &extras)?;
        log::info!(
            "epoch {epoch} (step {step}/{}): mean loss {:.4}",
            schedule.t_total,
            em.mean_total_loss
        );
        if let Some(obs) = extras.observer.as_deref_mut() {
            obs.on_epoch(&em, &params)?;
        }
        metrics.epochs.push(em);
    }

    Ok(TrainOutput {
        params,
        metrics,
        records,
        schedule,
        llm: suggester.counts(),
    })
}
