//! Confidence scores attached to a suggestion.

use serde::{Deserialize, Serialize};

use super::parse::label_span;
use super::{LlmError, RawCompletion, Suggestion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMethod {
    /// Product of the generation probabilities of the label tokens.
    LabelTokenProb,
    /// One minus the fraction of topic words flagged as intruders.
    WordIntrusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confidence {
    pub value: f64,
    pub method: ConfidenceMethod,
}

/// `exp(Σ logprob)` over the tokens overlapping the label inside the
/// answer's `"Topic"` value.
pub fn label_token_probability(
    completion: &RawCompletion,
    label: &[String],
) -> Result<Confidence, LlmError> {
    let tokens = completion.tokens.as_ref().ok_or(LlmError::MissingLogprobs)?;
    if label.is_empty() {
        return Err(LlmError::SpanNotFound);
    }
    // Work on the token concatenation so offsets line up with tokens even
    // when a backend's text and tokens disagree slightly.
    let joined: String = tokens.iter().map(|t| t.token.as_str()).collect();
    let span = label_span(&joined, label).ok_or(LlmError::SpanNotFound)?;
    let mut offset = 0;
    let mut sum = 0.0;
    let mut hit = false;
    for t in tokens {
        let (start, end) = (offset, offset + t.token.len());
        offset = end;
        if start < span.end && end > span.start {
            sum += t.logprob;
            hit = true;
        }
    }
    if !hit {
        return Err(LlmError::SpanNotFound);
    }
    Ok(Confidence {
        value: sum.exp().clamp(0.0, 1.0),
        method: ConfidenceMethod::LabelTokenProb,
    })
}

/// `1 - |removed| / n_original`
pub fn word_intrusion_confidence(suggestion: &Suggestion, n_original: usize) -> Confidence {
    let n = n_original.max(1) as f64;
    let removed = suggestion.removed_words.len().min(n_original) as f64;
    Confidence {
        value: (1.0 - removed / n).clamp(0.0, 1.0),
        method: ConfidenceMethod::WordIntrusion,
    }
}

/// Confidence by the requested method; label token probability falls back
/// to word intrusion when logprobs are missing or the label span cannot be
/// located.
pub fn confidence_for(
    method: ConfidenceMethod,
    completion: &RawCompletion,
    suggestion: &Suggestion,
    n_original: usize,
) -> Confidence {
    match method {
        ConfidenceMethod::WordIntrusion => word_intrusion_confidence(suggestion, n_original),
        ConfidenceMethod::LabelTokenProb => label_token_probability(completion, &suggestion.label)
            .unwrap_or_else(|e| {
                log::debug!("label token probability unavailable ({e}); using word intrusion");
                word_intrusion_confidence(suggestion, n_original)
            }),
    }
}
