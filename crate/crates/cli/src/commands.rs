use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;

use topicalign::corpus::{
    self, bow_documents, build_vocabulary, load_corpus, load_embeddings, tokenize_all,
    train_test_split, write_bow_jsonl, BowCorpus, EmbeddingTable, Split, Vocabulary,
};
use topicalign::eval;
use topicalign::llm::{
    self, build_prompt, confidence_for, label_token_probability, word_intrusion_confidence,
    ChatEndpointConfig, CompletionProvider, ConfidenceMethod, HttpChatClient, LlmError, MockDefault,
    MockScript, ParseOptions, PromptSpec, RawCompletion, Suggestion, SuggestionCache,
};
use topicalign::ntm::{Checkpoint, NtmParams};
use topicalign::trainer::{
    self, export_topics as build_topic_report, write_jsonl, RefinementRecord,
    Schedule, TrainConfig, TrainExtras, TrainObserver, METRICS_HEADER,
};

use crate::{
    usage, EmitCurvesArgs, EvaluateArgs, ExportTopicsArgs, Failure, LlmArgs, LlmKind,
    MockFallback, PreprocessArgs, RefineOnceArgs, TrainArgs,
};

type CmdResult = Result<(), Failure>;

/// Returns early with a runtime failure.
macro_rules! fail {
    ($($arg:tt)*) => {
        return Err(Failure::Runtime(anyhow!($($arg)*)))
    };
}

pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_FILE: &str = "train_config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const TOPICS_FILE: &str = "topics.jsonl";
pub const RECORDS_FILE: &str = "refinements.jsonl";

fn require_file(path: &Path, what: &str) -> CmdResult {
    if !path.is_file() {
        return Err(usage(anyhow!("{what} `{}` does not exist", path.display())));
    }
    Ok(())
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn preprocess(a: PreprocessArgs) -> CmdResult {
    require_file(&a.corpus, "corpus")?;
    require_file(&a.embeddings, "embedding file")?;
    if let Some(s) = &a.stopwords {
        require_file(s, "stopword file")?;
    }
    if !(0.0..1.0).contains(&a.test_ratio) {
        return Err(usage(anyhow!("--test-ratio must lie in [0, 1)")));
    }
    if a.min_df < 1 || !(a.max_df_ratio > 0.0 && a.max_df_ratio <= 1.0) {
        return Err(usage(anyhow!(
            "--min-df must be >= 1 and --max-df-ratio must lie in (0, 1]"
        )));
    }

    let stopwords = match &a.stopwords {
        Some(p) => corpus::load_stopwords(p)?,
        None => corpus::default_stopwords(),
    };
    let records = load_corpus(&a.corpus)?;
    if records.is_empty() {
        fail!("corpus `{}` has no documents", a.corpus.display());
    }
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let labels: Vec<Option<String>> = records.iter().map(|r| r.label.clone()).collect();
    let tokens = tokenize_all(&texts, &stopwords);
    let all_emb = load_embeddings(&a.embeddings, None)?;
    let vocab = build_vocabulary(&tokens, a.min_df, a.max_df_ratio, &all_emb.vocabulary())?;
    let emb = all_emb.restrict(&vocab);

    let (train_idx, test_idx) = train_test_split(records.len(), a.test_ratio, a.seed);
    let pick = |idx: &[usize]| -> (Vec<Vec<String>>, Vec<Option<String>>) {
        (
            idx.iter().map(|&i| tokens[i].clone()).collect(),
            idx.iter().map(|&i| labels[i].clone()).collect(),
        )
    };
    let (train_tok, train_lab) = pick(&train_idx);
    let (test_tok, test_lab) = pick(&test_idx);
    let (train_docs, train_skipped) = bow_documents(&train_tok, &train_lab, &vocab);
    let (test_docs, test_skipped) = bow_documents(&test_tok, &test_lab, &vocab);
    if train_docs.is_empty() {
        fail!("no training document has an in-vocabulary word");
    }

    create_dir(&a.out)?;
    vocab.save(&a.out.join(VOCAB_FILE))?;
    write_bow_jsonl(&a.out.join(TRAIN_FILE), &train_docs)?;
    write_bow_jsonl(&a.out.join(TEST_FILE), &test_docs)?;
    emb.save(&a.out.join(EMBEDDINGS_FILE), &vocab)?;

    let all: Vec<_> = train_docs.iter().chain(&test_docs).collect();
    let avg_len = all.iter().map(|d| d.total() as f64).sum::<f64>() / all.len() as f64;
    let n_labels: HashSet<&str> = all.iter().filter_map(|d| d.label.as_deref()).collect();
    println!("#docs\t#train\t#test\tV\tavg_length\t#labels");
    println!(
        "{}\t{}\t{}\t{}\t{:.2}\t{}",
        all.len(),
        train_docs.len(),
        test_docs.len(),
        vocab.len(),
        avg_len,
        n_labels.len()
    );
    let skipped = train_skipped.len() + test_skipped.len();
    if skipped > 0 {
        eprintln!("skipped {skipped} documents with no in-vocabulary words");
    }
    Ok(())
}

struct DataDir {
    vocab: Vocabulary,
    train: Option<BowCorpus>,
    test: Option<BowCorpus>,
    emb: EmbeddingTable,
}

fn load_data(dir: &Path, need_train: bool) -> Result<DataDir, Failure> {
    let vocab_path = dir.join(VOCAB_FILE);
    require_file(&vocab_path, "vocabulary")?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let load_split = |name: &str, split: Split| -> Result<Option<BowCorpus>, Failure> {
        let p = dir.join(name);
        if !p.is_file() {
            return Ok(None);
        }
        Ok(Some(BowCorpus::load(&p, vocab.clone(), split)?))
    };
    let train = if need_train {
        require_file(&dir.join(TRAIN_FILE), "training split")?;
        load_split(TRAIN_FILE, Split::Train)?
    } else {
        None
    };
    let test = load_split(TEST_FILE, Split::Test)?;
    let emb_path = dir.join(EMBEDDINGS_FILE);
    require_file(&emb_path, "embedding file")?;
    let emb = load_embeddings(&emb_path, Some(&vocab))?;
    Ok(DataDir {
        vocab,
        train,
        test,
        emb,
    })
}

fn provider(a: &LlmArgs) -> Result<Box<dyn CompletionProvider>, Failure> {
    match a.llm {
        LlmKind::Mock => {
            let default = match a.mock_default {
                MockFallback::Malformed => MockDefault::Malformed,
                MockFallback::Nearest => MockDefault::Nearest,
            };
            let script = match &a.mock_script {
                Some(p) => {
                    require_file(p, "mock script")?;
                    MockScript::load(p, default).map_err(usage)?
                }
                None => MockScript::new(default),
            };
            Ok(Box::new(script))
        }
        LlmKind::Http => {
            if a.mock_script.is_some() {
                return Err(usage(anyhow!("--mock-script requires --llm mock")));
            }
            let cfg = ChatEndpointConfig::from_env(a.llm_url.clone(), a.llm_model.clone())
                .map_err(usage)?;
            Ok(Box::new(HttpChatClient::new(cfg)))
        }
    }
}

struct CheckpointWriter {
    dir: PathBuf,
    vocab_hash: String,
    final_step: u64,
}

impl TrainObserver for CheckpointWriter {
    fn on_checkpoint(&mut self, step: u64, params: &NtmParams) -> trainer::Result<()> {
        if step == self.final_step {
            return Ok(());
        }
        let ckpt = Checkpoint {
            params: params.clone(),
            vocab_hash: self.vocab_hash.clone(),
        };
        fs::create_dir_all(&self.dir)?;
        ckpt.save(&self.dir.join(format!("step_{step:06}.json")))?;
        Ok(())
    }
}

#[derive(Serialize)]
struct SavedConfig<'a> {
    config: &'a TrainConfig,
    schedule: Schedule,
}

pub fn train(a: TrainArgs) -> CmdResult {
    require_file(&a.config, "config")?;
    let cfg = TrainConfig::load(&a.config).map_err(usage)?;
    let data = load_data(&a.data, true)?;
    let train = data.train.expect("training split checked");
    let schedule = cfg.schedule(train.len()).map_err(usage)?;
    let provider = provider(&a.llm)?;
    let cache = match &a.cache {
        Some(p) => SuggestionCache::persistent(p)?,
        None => SuggestionCache::in_memory(),
    };
    create_dir(&a.out)?;

    let held_out = data
        .test
        .as_ref()
        .filter(|t| t.has_labels())
        .map(|t| t.docs.as_slice());
    let mut writer = CheckpointWriter {
        dir: a.out.join("checkpoints"),
        vocab_hash: data.vocab.hash(),
        final_step: schedule.t_total,
    };
    let out = trainer::train(
        &train,
        &data.emb,
        provider.as_ref(),
        &cfg,
        TrainExtras {
            cache: Some(cache),
            held_out,
            observer: Some(&mut writer),
        },
    )?;

    Checkpoint {
        params: out.params.clone(),
        vocab_hash: data.vocab.hash(),
    }
    .save(&a.out.join(CHECKPOINT_FILE))?;
    write_json(
        &a.out.join(CONFIG_FILE),
        &SavedConfig {
            config: &cfg,
            schedule: out.schedule,
        },
    )?;
    out.metrics.write_steps(&a.out.join(METRICS_FILE))?;
    out.metrics.write_epochs(&a.out.join(EPOCHS_FILE))?;
    write_jsonl(&a.out.join(RECORDS_FILE), &out.records)?;
    let report = build_topic_report(&out.params, &data.vocab, &out.records)?;
    write_jsonl(&a.out.join(TOPICS_FILE), &report)?;
    eprintln!(
        "trained {} steps (warm-up {}); {} LLM queries, {} parsed",
        out.schedule.t_total, out.schedule.t_refine, out.llm.queries, out.llm.parsed
    );
    Ok(())
}

fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<Checkpoint, Failure> {
    require_file(path, "checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    if ckpt.vocab_hash != vocab.hash() {
        fail!(
            "checkpoint `{}` was trained on a different vocabulary",
            path.display()
        );
    }
    if ckpt.params.vocab_size() != vocab.len() {
        fail!("checkpoint vocabulary size {} != {}", ckpt.params.vocab_size(), vocab.len());
    }
    Ok(ckpt)
}

pub fn evaluate(a: EvaluateArgs) -> CmdResult {
    require_file(&a.reference, "reference corpus")?;
    if a.window == 0 {
        return Err(usage(anyhow!("--window must be at least 1")));
    }
    let data = load_data(&a.data, false)?;
    let ckpt = load_checkpoint(&a.checkpoint, &data.vocab)?;
    let test_docs = data.test.map(|t| t.docs).unwrap_or_default();
    if test_docs.is_empty() {
        log::warn!("no test documents; clustering metrics omitted");
    }

    let stopwords = match &a.stopwords {
        Some(p) => corpus::load_stopwords(p)?,
        None => corpus::default_stopwords(),
    };
    let reference = load_corpus(&a.reference)?;
    let texts: Vec<&str> = reference.iter().map(|r| r.text.as_str()).collect();
    let ref_tokens = tokenize_all(&texts, &stopwords);
    let targets: HashSet<String> = eval::model_topics(&ckpt.params, &data.vocab, eval::COHERENCE_TOP_N)?
        .into_iter()
        .flatten()
        .collect();
    let stats = eval::build_cooccurrence_for(&ref_tokens, a.window, Some(&targets))?;
    let report = eval::evaluate_model(&ckpt.params, &data.vocab, &test_docs, &stats, &data.emb)?;
    if report.purity.is_none() {
        eprintln!("warning: test split is not fully labelled; purity/nmi/pn omitted");
    }
    write_json(&a.out, &report)
}

#[derive(Serialize)]
struct ConfidenceValues {
    /// `None` when logprobs are missing or the label span is not found.
    label_token_prob: Option<f64>,
    word_intrusion: f64,
    /// The default method's value (label token probability with fallback).
    selected: llm::Confidence,
}

#[derive(Serialize)]
struct RefineOnceOutput {
    prompt: String,
    completion: RawCompletion,
    suggestion: Suggestion,
    confidence: ConfidenceValues,
}

pub fn refine_once(a: RefineOnceArgs) -> CmdResult {
    let words: Vec<String> = a
        .words
        .split(',')
        .map(|w| w.trim().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return Err(usage(anyhow!("--words is empty")));
    }
    require_file(&a.vocab, "vocabulary")?;
    let spec = PromptSpec {
        n_label_words: a.label_words,
        m_refined_words: a.refined_words,
        template_id: a.template.clone(),
    };
    spec.validate().map_err(usage)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let provider = provider(&a.llm)?;

    let prompt = build_prompt(&words, &spec).map_err(usage)?;
    let completion = provider.complete(&words, &prompt)?;
    let suggestion = llm::parse_suggestion_with(
        &completion,
        &vocab,
        &words,
        &ParseOptions::new(spec.m_refined_words),
    )
    .map_err(|e| match e {
        LlmError::ParseFailure { reason, raw } => Failure::Runtime(anyhow!(
            "could not parse suggestion: {reason}\n--- raw completion ---\n{raw}"
        )),
        other => other.into(),
    })?;
    let confidence = ConfidenceValues {
        label_token_prob: label_token_probability(&completion, &suggestion.label)
            .ok()
            .map(|c| c.value),
        word_intrusion: word_intrusion_confidence(&suggestion, words.len()).value,
        selected: confidence_for(
            ConfidenceMethod::LabelTokenProb,
            &completion,
            &suggestion,
            words.len(),
        ),
    };
    let out = RefineOnceOutput {
        prompt,
        completion,
        suggestion,
        confidence,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<RefinementRecord>, Failure> {
    require_file(path, "refinement records")?;
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .with_context(|| format!("{}:{}", path.display(), i + 1))
                .map_err(Failure::Runtime)
        })
        .collect()
}

pub fn export_topics(a: ExportTopicsArgs) -> CmdResult {
    require_file(&a.vocab, "vocabulary")?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let ckpt = load_checkpoint(&a.checkpoint, &vocab)?;
    let records = match &a.records {
        Some(p) => read_records(p)?,
        None => Vec::new(),
    };
    let report = build_topic_report(&ckpt.params, &vocab, &records)?;
    write_jsonl(&a.out, &report)?;
    Ok(())
}

pub fn emit_curves(a: EmitCurvesArgs) -> CmdResult {
    if !a.run_id.is_empty() && a.run_id.len() != a.metrics.len() {
        return Err(usage(anyhow!(
            "{} run ids given for {} metrics files",
            a.run_id.len(),
            a.metrics.len()
        )));
    }
    for p in &a.metrics {
        require_file(p, "metrics file")?;
    }
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["run_id", "step", "metric", "value"])?;
    for (i, path) in a.metrics.iter().enumerate() {
        let run_id = a
            .run_id
            .get(i)
            .cloned()
            .unwrap_or_else(|| path.display().to_string());
        let mut reader = csv::Reader::from_path(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let header: Vec<String> = reader
            .headers()
            .with_context(|| format!("reading {}", path.display()))?
            .iter()
            .map(str::to_string)
            .collect();
        if header != METRICS_HEADER {
            fail!(
                "`{}` does not have the metrics header `{}`",
                path.display(),
                METRICS_HEADER.join(",")
            );
        }
        for (line, row) in reader.records().enumerate() {
            let row = row.with_context(|| format!("{}: row {}", path.display(), line + 2))?;
            for (metric, value) in METRICS_HEADER.iter().zip(row.iter()).skip(1) {
                out.write_record([run_id.as_str(), &row[0], metric, value])?;
            }
        }
    }
    let bytes = out.into_inner().map_err(|e| anyhow!("{e}"))?;
    let mut file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    file.write_all(&bytes)?;
    Ok(())
}
