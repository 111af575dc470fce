//! Topic-suggestion prompt templates.
//!
//! Every template asks the model to (1) name the topic in a few words,
//! (2) list the intruder words it removes, (3) list added words, and
//! (4) answer with a JSON object holding `"Topic"` and `"Words"`.
//! `{n}` and `{m}` are replaced by the label length and refined-list size.

use serde::{Deserialize, Serialize};

use super::LlmError;

pub const DEFAULT_TEMPLATE: &str = "origin";
pub const DEFAULT_LABEL_WORDS: usize = 2;
pub const DEFAULT_REFINED_WORDS: usize = 10;

const ORIGIN: &str = "Analyze step-by-step and provide the final answer.

Step 1. Given a set of words, summarize a topic (avoid using proper nouns as topics) by {n} words that covers most of those words. Note, only the topic, no other explanations.

Step 2. Remove irrelevant words about the topic from the given word list. Note, only the removed words, no other explanations.

Step 3. Add new relevant words (maximum {m} words) about the topic to the word list up to {m} words. Note, only the added words, no other explanations.

Step 4. Provide your answer in json format as {\"Topic\": \"<{n} Word Topic>\", \"Words\": \"<Refined {m} Word List>\"}. Note, only {m} refined words allowed for the topic, and no follow up explanations.";

const VARIANT_1: &str = "Perform the following actions sequentially and provide the final result:

Step 1. After examining a set of words, condense a subject (avoid proper nouns) into {n} words that encompass most of those words. (Note: Only the subject, no further elaboration.)

Step 2. Eliminate irrelevant words from the given word list based on the subject. (Note: Only the removed words, no further elaboration.)

Step 3. Add new pertinent words (maximum {m} words) related to the subject to the word list until it reaches {m} words. (Note: Only the added words, no further elaboration.)

Step 4. Present your response in JSON format as {\"Topic\": \"<{n} Word Subject>\", \"Words\": \"<Refined {m} Word List>\"}. Note: Only {m} refined words are permitted for the subject, and no follow-up explanations.";

const VARIANT_2: &str = "Perform a meticulous examination and furnish the conclusive resolution.

Stride 1. Bestowed a catalogue of vocabularies, condense a subject matter (circumvent the employment of proper appellations as subjects) by {n} words that envelop the preponderance of those vocabularies. (Heed, solely the subject, devoid of supplemental explication.)

Stride 2. Dislodge irrelevant vocabularies concerning the subject from the granted vocabulary catalogue. (Heed, solely the dislodged vocabularies, devoid of supplemental explication.)

Stride 3. Amalgamate novel applicable vocabularies (maximal {m} vocabularies) concerning the subject to the vocabulary catalogue up to {m} vocabularies. (Heed, solely the amalgamated vocabularies, devoid of supplemental explication.)

Stride 4. Tender your resolution in json format as {\"Topic\": \"<{n} Word Subject>\", \"Words\": \"<Refined {m} Word Catalogue>\"}. Heed, solely {m} refined vocabularies permitted for the subject, and devoid of successive explication.";

const VARIANT_3: &str = "Step-by-step analysis and final answer:

Step 1. Given a set of words, summarize a topic (avoid using proper nouns as topics) by {n} words that covers most of those words. (Note, only the topic, no other explanations.)

Step 2. Remove irrelevant words about the topic from the given word list. (Note, only the removed words, no other explanations.)

Step 3. Add new relevant words (maximum {m} words) about the topic to the word list, keeping the total word count at {m} words. (Note, only the added words, no other explanations.)

Step 4. Provide your answer in JSON format as {\"Topic\": \"<{n} Word Topic>\", \"Words\": \"<Refined {m} Word List>\"}. Note, only {m} refined words allowed for the topic, and no follow-up explanations.";

const VARIANT_4: &str = "Break down the analysis into steps and give the final response.

1. Look at a set of words and identify a {n}-word topic that sums up most of those words (don't use proper nouns as topics, just state the topic).

2. Remove words from the list that don't relate to the topic (just list the removed words).

3. Add new relevant words about the topic to the list, up to {m} words total (just list the new added words).

4. Provide your response in JSON format: {\"Topic\": \"<{n} Word Topic>\", \"Words\": \"<Refined {m} Word List>\"}. Only include {m} words for the refined list, no explanations.";

const VARIANT_5: &str = "Step-by-step analysis and provide the final answer in JSON format:

Step 1: Based on the given set of words, summarize a topic using {n} words that encompass most of those words (avoid proper nouns).

Step 2: Remove any irrelevant words from the given word list that do not relate to the summarized topic.

Step 3: Add new relevant words (up to {m} words) that are related to the summarized topic.

Step 4: Present your answer in the following JSON format: {\"Topic\": \"<{n} Word Topic>\", \"Words\": \"<Refined {m} Word List>\"}, where \"Topic\" contains the {n}-word summarized topic, and \"Words\" contains the refined list of {m} words related to that topic. Do not provide any additional explanations.";

pub const TEMPLATE_IDS: [&str; 6] = [
    "origin",
    "variant_1",
    "variant_2",
    "variant_3",
    "variant_4",
    "variant_5",
];

fn template_text(id: &str) -> Option<&'static str> {
    Some(match id {
        "origin" => ORIGIN,
        "variant_1" => VARIANT_1,
        "variant_2" => VARIANT_2,
        "variant_3" => VARIANT_3,
        "variant_4" => VARIANT_4,
        "variant_5" => VARIANT_5,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub n_label_words: usize,
    pub m_refined_words: usize,
    pub template_id: String,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            n_label_words: DEFAULT_LABEL_WORDS,
            m_refined_words: DEFAULT_REFINED_WORDS,
            template_id: DEFAULT_TEMPLATE.into(),
        }
    }
}

impl PromptSpec {
    pub fn validate(&self) -> Result<(), LlmError> {
        if template_text(&self.template_id).is_none() {
            return Err(LlmError::UnknownTemplate(self.template_id.clone()));
        }
        Ok(())
    }
}

/// Renders the template followed by the comma-joined topic words.
pub fn build_prompt<S: AsRef<str>>(topic_words: &[S], spec: &PromptSpec) -> Result<String, LlmError> {
    let text =
        template_text(&spec.template_id).ok_or_else(|| LlmError::UnknownTemplate(spec.template_id.clone()))?;
    if topic_words.is_empty() {
        return Err(LlmError::EmptyTopic);
    }
    let words: Vec<&str> = topic_words.iter().map(|w| w.as_ref()).collect();
    let body = text
        .replace("{n}", &spec.n_label_words.to_string())
        .replace("{m}", &spec.m_refined_words.to_string());
    Ok(format!("{body}\n\nWord list: {}", words.join(", ")))
}
