//! Scripted chain-of-thought completions for parser checks.

use serde::Deserialize;

use topicalign::corpus::Vocabulary;
use topicalign::llm::{RawCompletion, TokenLogprob};

#[derive(Debug, Deserialize)]
pub struct Expected {
    pub label: Vec<String>,
    pub refined: Vec<String>,
    pub removed: Vec<String>,
    pub oov: Vec<String>,
}

#[derive(Debug, Deserialize)]
pub struct Fixture {
    pub name: String,
    pub original: Vec<String>,
    pub text: String,
    #[serde(default)]
    pub expect: Option<Expected>,
    #[serde(default)]
    pub malformed: bool,
}

pub fn fixtures() -> Vec<Fixture> {
    include_str!("../fixtures/completions.jsonl")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("fixture line"))
        .collect()
}

/// Every in-vocabulary word used by the fixtures; `spacewalk` is the one
/// planted out-of-vocabulary word.
pub fn fixture_vocab() -> Vocabulary {
    let mut words: Vec<String> = [
        "astronaut", "comet", "galaxy", "game", "launch", "mission", "moon", "nasa", "orbit",
        "rocket", "satellite", "score", "shuttle", "star", "telescope",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    words.sort();
    Vocabulary::new(words).unwrap()
}

pub fn text_only(text: &str) -> RawCompletion {
    RawCompletion {
        text: text.to_string(),
        tokens: None,
        finish_reason: "stop".into(),
    }
}

/// A completion whose tokens are given explicitly with their logprobs.
pub fn with_tokens(tokens: &[(&str, f64)]) -> RawCompletion {
    RawCompletion {
        text: tokens.iter().map(|(t, _)| *t).collect(),
        tokens: Some(
            tokens
                .iter()
                .map(|(t, lp)| TokenLogprob {
                    token: t.to_string(),
                    logprob: *lp,
                })
                .collect(),
        ),
        finish_reason: "stop".into(),
    }
}

/// The scripted case whose label tokens have probabilities 0.9 and 0.8.
pub fn label_product_case() -> RawCompletion {
    with_tokens(&[
        ("Step", 0.0),
        (" 1", 0.0),
        (": space", -0.05),
        ("\nStep", 0.0),
        (" 4", 0.0),
        (": {\"", 0.0),
        ("Topic", 0.0),
        ("\": \"", 0.0),
        ("space", 0.9f64.ln()),
        (" exploration", 0.8f64.ln()),
        ("\", \"", 0.0),
        ("Words", 0.0),
        ("\": [\"", 0.0),
        ("nasa", -0.3),
        ("\"]}", 0.0),
    ])
}

/// Ten original words of which the reasoning flags three as intruders.
pub const INTRUSION_ORIGINAL: [&str; 10] = [
    "nasa", "orbit", "rocket", "launch", "game", "shuttle", "moon", "score", "star", "telescope",
];

pub const INTRUSION_TEXT: &str = "Step 1: Space exploration\nStep 2: game, score, telescope\nStep 3: comet\nStep 4: {\"Topic\": \"space exploration\", \"Words\": [\"nasa\", \"orbit\", \"rocket\", \"comet\"]}";
