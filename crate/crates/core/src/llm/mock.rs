//! Deterministic offline stand-in for the chat endpoint.
//!
//! A script maps canonical word-set keys (see [`canonical_key`]) to canned
//! completions. Script files are line-delimited JSON:
//!
//! ```text
//! {"key": "cpu,disk,ram", "text": "...", "logprobs": [["tok", -0.1], ...]}
//! ```
//!
//! `logprobs` is optional. A record with key `"*"` sets a fixed default
//! completion.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::cache::canonical_key;
use super::{CompletionProvider, LlmError, RawCompletion, TokenLogprob};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<(String, f64)>>,
}

impl MockEntry {
    pub fn to_completion(&self) -> RawCompletion {
        RawCompletion {
            text: self.text.clone(),
            tokens: self.logprobs.as_ref().map(|lps| {
                lps.iter()
                    .map(|(t, lp)| TokenLogprob {
                        token: t.clone(),
                        logprob: *lp,
                    })
                    .collect()
            }),
            finish_reason: "stop".into(),
        }
    }

    /// A four-step reasoning completion ending in the JSON answer, with
    /// synthetic token logprobs: every token is certain except the label
    /// inside the answer, whose tokens multiply to `label_prob`.
    pub fn chain_of_thought(
        label: &str,
        removed: &[&str],
        added: &[&str],
        words: &[&str],
        label_prob: f64,
    ) -> Self {
        let list = |ws: &[&str]| {
            if ws.is_empty() {
                "None".to_string()
            } else {
                ws.join(", ")
            }
        };
        let words_json = serde_json::to_string(words).expect("strings serialize");
        let head = format!(
            "Step 1. {label}\nStep 2. {}\nStep 3. {}\nStep 4. {{\"Topic\": \"",
            list(removed),
            list(added)
        );
        let tail = format!("\", \"Words\": {words_json}}}");

        let label_parts: Vec<String> = label
            .split_inclusive(' ')
            .map(|s| s.to_string())
            .collect();
        let per_token = label_prob.ln() / label_parts.len().max(1) as f64;
        let mut logprobs: Vec<(String, f64)> =
            split_tokens(&head).into_iter().map(|t| (t, 0.0)).collect();
        logprobs.extend(label_parts.into_iter().map(|t| (t, per_token)));
        logprobs.extend(split_tokens(&tail).into_iter().map(|t| (t, 0.0)));
        Self {
            text: format!("{head}{label}{tail}"),
            logprobs: Some(logprobs),
        }
    }
}

/// Splits text into word-ish tokens; leading whitespace sticks to the next
/// token, punctuation stands alone. Concatenation restores the input.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut cur = String::new();
    let mut cur_alnum = false;
    for c in text.chars() {
        let alnum = c.is_alphanumeric();
        let boundary = if c.is_whitespace() {
            !cur.chars().all(char::is_whitespace)
        } else if alnum {
            !(cur_alnum || cur.chars().all(char::is_whitespace))
        } else {
            !cur.chars().all(char::is_whitespace)
        };
        if boundary && !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        cur.push(c);
        cur_alnum = alnum;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// What to answer when the requested word set is not scripted.
#[derive(Debug, Clone, PartialEq)]
pub enum MockDefault {
    /// Text without any JSON answer.
    Malformed,
    /// The scripted entry whose key shares the most words with the request
    /// (Jaccard), earliest entry on ties.
    Nearest,
    Fixed(MockEntry),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScriptRecord {
    key: String,
    text: String,
    #[serde(default)]
    logprobs: Option<Vec<(String, f64)>>,
}

pub const MALFORMED_TEXT: &str = "I am unable to summarize these words.";

#[derive(Debug)]
pub struct MockScript {
    order: Vec<String>,
    entries: HashMap<String, MockEntry>,
    pub default: MockDefault,
    calls: AtomicUsize,
}

impl Clone for MockScript {
    fn clone(&self) -> Self {
        Self {
            order: self.order.clone(),
            entries: self.entries.clone(),
            default: self.default.clone(),
            calls: AtomicUsize::new(self.calls()),
        }
    }
}

impl MockScript {
    pub fn new(default: MockDefault) -> Self {
        Self {
            order: Vec::new(),
            entries: HashMap::new(),
            default,
            calls: AtomicUsize::new(0),
        }
    }

    /// Registers `entry` for the word set `words` (order irrelevant).
    pub fn insert<S: AsRef<str>>(&mut self, words: &[S], entry: MockEntry) {
        let key = canonical_key(words);
        if self.entries.insert(key.clone(), entry).is_none() {
            self.order.push(key);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of completions served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn load(path: &Path, default: MockDefault) -> Result<Self, LlmError> {
        let file = File::open(path).map_err(|e| LlmError::Script {
            line: 0,
            msg: format!("{}: {e}", path.display()),
        })?;
        let mut script = Self::new(default);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| LlmError::Script {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ScriptRecord = serde_json::from_str(&line).map_err(|e| LlmError::Script {
                line: i + 1,
                msg: e.to_string(),
            })?;
            let entry = MockEntry {
                text: rec.text,
                logprobs: rec.logprobs,
            };
            if rec.key == "*" {
                script.default = MockDefault::Fixed(entry);
            } else {
                let words: Vec<&str> = rec.key.split(',').map(str::trim).collect();
                script.insert(&words, entry);
            }
        }
        Ok(script)
    }

    fn nearest(&self, key: &str) -> Option<&MockEntry> {
        let want: std::collections::HashSet<&str> = key.split(',').collect();
        let mut best: Option<(&String, f64)> = None;
        for k in &self.order {
            let have: std::collections::HashSet<&str> = k.split(',').collect();
            let inter = want.intersection(&have).count() as f64;
            let union = want.union(&have).count() as f64;
            let score = if union == 0.0 { 0.0 } else { inter / union };
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((k, score));
            }
        }
        best.map(|(k, _)| &self.entries[k])
    }
}

/// Scripted completion for `topic_words`.
pub fn mock_complete<S: AsRef<str>>(topic_words: &[S], script: &MockScript) -> RawCompletion {
    script.calls.fetch_add(1, Ordering::SeqCst);
    let key = canonical_key(topic_words);
    if let Some(e) = script.entries.get(&key) {
        return e.to_completion();
    }
    let fallback = match &script.default {
        MockDefault::Malformed => None,
        MockDefault::Nearest => script.nearest(&key),
        MockDefault::Fixed(e) => Some(e),
    };
    fallback.map(MockEntry::to_completion).unwrap_or_else(|| RawCompletion {
        text: MALFORMED_TEXT.into(),
        tokens: Some(vec![TokenLogprob {
            token: MALFORMED_TEXT.into(),
            logprob: 0.0,
        }]),
        finish_reason: "stop".into(),
    })
}

impl CompletionProvider for MockScript {
    fn complete(&self, topic_words: &[String], _prompt: &str) -> Result<RawCompletion, LlmError> {
        Ok(mock_complete(topic_words, self))
    }
}
