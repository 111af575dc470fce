//! LLM topic suggestion: prompting, transport, answer parsing, confidence
//! scoring and memoization.

pub mod cache;
pub mod client;
pub mod confidence;
pub mod mock;
pub mod parse;
pub mod prompt;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{canonical_key, CachedOutcome, SuggestionCache};
pub use client::{ChatEndpointConfig, HttpChatClient};
pub use confidence::{
    confidence_for, label_token_probability, word_intrusion_confidence, Confidence, ConfidenceMethod,
};
pub use mock::{mock_complete, MockDefault, MockEntry, MockScript};
pub use parse::{filter_suggestion, parse_suggestion, parse_suggestion_with, ParseOptions};
pub use prompt::{build_prompt, PromptSpec};

use crate::corpus::Vocabulary;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("unknown prompt template `{0}`")]
    UnknownTemplate(String),
    #[error("topic has no words")]
    EmptyTopic,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Backend { status: u16, body: String },
    #[error("could not parse suggestion: {reason}")]
    ParseFailure { reason: String, raw: String },
    #[error("completion carries no token logprobs")]
    MissingLogprobs,
    #[error("label tokens not found in completion")]
    SpanNotFound,
    #[error("suggestion cache: {0}")]
    CacheIo(String),
    #[error("mock script line {line}: {msg}")]
    Script { line: usize, msg: String },
    #[error("endpoint configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCompletion {
    pub text: String,
    /// `None` when the backend did not return logprobs.
    pub tokens: Option<Vec<TokenLogprob>>,
    pub finish_reason: String,
}

impl RawCompletion {
    pub fn missing_logprobs(&self) -> bool {
        self.tokens.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub label: Vec<String>,
    /// In-vocabulary suggested words, at most M.
    pub refined_words: Vec<String>,
    /// Original topic words flagged as intruders.
    pub removed_words: Vec<String>,
    /// Suggested words discarded because they are not in the vocabulary.
    pub dropped_oov: Vec<String>,
}

impl Suggestion {
    pub fn is_usable(&self) -> bool {
        !self.refined_words.is_empty()
    }
}

/// Anything that can turn a prompt into a completion.
pub trait CompletionProvider: Send + Sync {
    /// `topic_words` is passed alongside the rendered prompt so offline
    /// providers can key on it.
    fn complete(&self, topic_words: &[String], prompt: &str) -> Result<RawCompletion, LlmError>;
}

/// Counters over all provider calls made by a [`Suggester`].
#[derive(Debug, Default)]
pub struct QueryStats {
    queries: AtomicUsize,
    parsed: AtomicUsize,
    failed: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QueryCounts {
    pub queries: usize,
    pub parsed: usize,
    /// Parse failures, unusable suggestions and transport errors.
    pub failed: usize,
}

impl QueryStats {
    pub fn snapshot(&self) -> QueryCounts {
        QueryCounts {
            queries: self.queries.load(Ordering::SeqCst),
            parsed: self.parsed.load(Ordering::SeqCst),
            failed: self.failed.load(Ordering::SeqCst),
        }
    }
}

/// Turns a completion into a cacheable outcome.
pub fn interpret_completion<S: AsRef<str>>(
    completion: &RawCompletion,
    vocab: &Vocabulary,
    topic_words: &[S],
    opts: &ParseOptions,
    method: ConfidenceMethod,
) -> CachedOutcome {
    match parse_suggestion_with(completion, vocab, topic_words, opts) {
        Ok(s) if s.is_usable() => {
            let confidence = confidence_for(method, completion, &s, topic_words.len());
            CachedOutcome::Refined {
                suggestion: s,
                confidence,
            }
        }
        Ok(_) => CachedOutcome::Failed {
            reason: "no in-vocabulary refined words".into(),
        },
        Err(e) => CachedOutcome::Failed {
            reason: e.to_string(),
        },
    }
}

/// Fetches suggestions for topics through a cache, querying the provider
/// only for unseen word sets.
pub struct Suggester<'a> {
    provider: &'a dyn CompletionProvider,
    cache: SuggestionCache,
    prompt: PromptSpec,
    parse: ParseOptions,
    method: ConfidenceMethod,
    max_in_flight: usize,
    stats: QueryStats,
}

impl<'a> Suggester<'a> {
    pub fn new(
        provider: &'a dyn CompletionProvider,
        cache: SuggestionCache,
        prompt: PromptSpec,
        method: ConfidenceMethod,
    ) -> Result<Self, LlmError> {
        prompt.validate()?;
        let parse = ParseOptions::new(prompt.m_refined_words);
        Ok(Self {
            provider,
            cache,
            prompt,
            parse,
            method,
            max_in_flight: 4,
            stats: QueryStats::default(),
        })
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn counts(&self) -> QueryCounts {
        self.stats.snapshot()
    }

    pub fn cache(&self) -> &SuggestionCache {
        &self.cache
    }

    fn query(&self, words: &[String], vocab: &Vocabulary) -> Result<CachedOutcome, LlmError> {
        let prompt = build_prompt(words, &self.prompt)?;
        self.stats.queries.fetch_add(1, Ordering::SeqCst);
        let completion = match self.provider.complete(words, &prompt) {
            Ok(c) => c,
            Err(e) => {
                self.stats.failed.fetch_add(1, Ordering::SeqCst);
                return Err(e);
            }
        };
        let outcome = interpret_completion(&completion, vocab, words, &self.parse, self.method);
        match &outcome {
            CachedOutcome::Refined { .. } => self.stats.parsed.fetch_add(1, Ordering::SeqCst),
            CachedOutcome::Failed { reason } => {
                log::info!("suggestion for [{}] unusable: {reason}", words.join(", "));
                self.stats.failed.fetch_add(1, Ordering::SeqCst)
            }
        };
        Ok(outcome)
    }

    /// One outcome per topic, in input order. Transport errors are returned
    /// per topic and are not cached.
    pub fn suggest_all(
        &self,
        topics: &[Vec<String>],
        vocab: &Vocabulary,
    ) -> Vec<Result<CachedOutcome, LlmError>> {
        let keys: Vec<String> = topics.iter().map(|t| canonical_key(t)).collect();
        let mut misses: Vec<usize> = Vec::new();
        for (i, k) in keys.iter().enumerate() {
            if self.cache.get(k).is_none() && !misses.iter().any(|&j| keys[j] == *k) {
                misses.push(i);
            }
        }
        let mut fresh: Vec<(usize, Result<CachedOutcome, LlmError>)> = Vec::new();
        for chunk in misses.chunks(self.max_in_flight) {
            let results: Vec<(usize, Result<CachedOutcome, LlmError>)> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&i| (i, s.spawn(move || self.query(&topics[i], vocab))))
                    .collect();
                handles
                    .into_iter()
                    .map(|(i, h)| (i, h.join().expect("query thread panicked")))
                    .collect()
            });
            fresh.extend(results);
        }
        let mut transport: Vec<(String, String)> = Vec::new();
        for (i, r) in fresh {
            match r {
                Ok(outcome) => {
                    if let Err(e) = self.cache.put(&keys[i], outcome) {
                        log::warn!("{e}");
                    }
                }
                Err(e) => transport.push((keys[i].clone(), e.to_string())),
            }
        }
        keys.iter()
            .map(|k| match self.cache.get(k) {
                Some(o) => Ok(o),
                None => {
                    let msg = transport
                        .iter()
                        .find(|(tk, _)| tk == k)
                        .map(|(_, m)| m.clone())
                        .unwrap_or_else(|| "no outcome".into());
                    Err(LlmError::Transport(msg))
                }
            })
            .collect()
    }
}
