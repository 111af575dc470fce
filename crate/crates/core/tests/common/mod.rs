//! Shared fixtures: a planted three-topic corpus, block-clustered
//! embeddings and a mock LLM that answers with the planted blocks.

#![allow(dead_code)]

pub mod completions;
pub mod oracles;

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use topicalign::corpus::{BowCorpus, BowDocument, EmbeddingTable, Split, Vocabulary};
use topicalign::llm::{MockDefault, MockEntry, MockScript};
use topicalign::ntm::{Checkpoint, NtmParams};
use topicalign::trainer::TrainConfig;

pub const BLOCKS: usize = 3;
pub const BLOCK_SIZE: usize = 20;
pub const N_DOCS: usize = 300;
pub const N_TEST: usize = 60;
pub const IN_BLOCK: f64 = 0.9;
pub const LABEL_CONFIDENCE: f64 = 0.9;

pub fn planted_word(block: usize, j: usize) -> String {
    const NAMES: [&str; BLOCKS] = ["astro", "bio", "chem"];
    format!("{}{j:02}", NAMES[block])
}

pub fn planted_block(block: usize) -> Vec<String> {
    (0..BLOCK_SIZE).map(|j| planted_word(block, j)).collect()
}

pub struct Planted {
    pub train: BowCorpus,
    pub test: BowCorpus,
    pub emb: EmbeddingTable,
    pub blocks: Vec<Vec<String>>,
}

/// 300 documents of 36–44 tokens; each token comes from the document's
/// block with probability 0.9 and uniformly from the whole vocabulary
/// otherwise. The last 60 documents form the test split.
pub fn planted(seed: u64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks: Vec<Vec<String>> = (0..BLOCKS).map(planted_block).collect();
    let vocab = Vocabulary::new(blocks.concat()).unwrap();
    let v = vocab.len();
    let docs: Vec<BowDocument> = (0..N_DOCS)
        .map(|d| {
            let block = d % BLOCKS;
            let len = rng.random_range(36..=44);
            let mut counts = BTreeMap::new();
            for _ in 0..len {
                let w = if rng.random::<f64>() < IN_BLOCK {
                    block * BLOCK_SIZE + rng.random_range(0..BLOCK_SIZE)
                } else {
                    rng.random_range(0..v)
                };
                *counts.entry(w).or_insert(0u32) += 1;
            }
            BowDocument {
                counts,
                label: Some(format!("block{block}")),
            }
        })
        .collect();
    let (train, test) = docs.split_at(N_DOCS - N_TEST);
    Planted {
        train: BowCorpus {
            docs: train.to_vec(),
            vocab: vocab.clone(),
            split: Split::Train,
        },
        test: BowCorpus {
            docs: test.to_vec(),
            vocab: vocab.clone(),
            split: Split::Test,
        },
        emb: block_embeddings(&blocks, seed + 1),
        blocks,
    }
}

/// 8-dimensional vectors: a block-specific axis plus small noise, so
/// within-block cosine distances are small and across-block ones near 1.
pub fn block_embeddings(blocks: &[Vec<String>], seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 8;
    let mut emb = EmbeddingTable::new(dim);
    for (b, words) in blocks.iter().enumerate() {
        for w in words {
            let mut v: Vec<f64> = (0..dim)
                .map(|_| { let x: f64 = StandardNormal.sample(&mut rng); 0.15 * x })
                .collect();
            v[b] += 1.0;
            emb.insert(w.clone(), v);
        }
    }
    emb
}

/// Suggests the full planted block whose word set overlaps the queried
/// topic most, with label probability [`LABEL_CONFIDENCE`].
pub fn block_mock(blocks: &[Vec<String>]) -> MockScript {
    let mut script = MockScript::new(MockDefault::Nearest);
    let labels = ["astronomy topic", "biology topic", "chemistry topic"];
    for (b, words) in blocks.iter().enumerate() {
        let ws: Vec<&str> = words.iter().map(String::as_str).collect();
        script.insert(
            &ws,
            MockEntry::chain_of_thought(labels[b % labels.len()], &[], &[], &ws, LABEL_CONFIDENCE),
        );
    }
    script
}

pub fn jaccard<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> f64 {
    let a: HashSet<&str> = a.iter().map(|s| s.as_ref()).collect();
    let b: HashSet<&str> = b.iter().map(|s| s.as_ref()).collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Mean over topics of the best Jaccard overlap with any planted block.
pub fn mean_best_jaccard(topics: &[Vec<String>], blocks: &[Vec<String>]) -> f64 {
    topics
        .iter()
        .map(|t| blocks.iter().map(|b| jaccard(t, b)).fold(0.0, f64::max))
        .sum::<f64>()
        / topics.len() as f64
}

pub fn random_simplex(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Parameters with independent N(0, scale²) entries.
pub fn random_params(v: usize, k: usize, h: usize, scale: f64, rng: &mut impl Rng) -> NtmParams {
    let mut p = NtmParams::zeros(v, k, h);
    for field in p.fields_mut() {
        for x in field.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *x = scale * n;
        }
    }
    p
}

/// A document touching roughly half of the vocabulary, counts 1–4.
pub fn random_doc(v: usize, rng: &mut impl Rng) -> BowDocument {
    let mut counts = BTreeMap::new();
    for w in 0..v {
        if rng.random::<f64>() < 0.5 {
            counts.insert(w, rng.random_range(1..=4u32));
        }
    }
    if counts.is_empty() {
        counts.insert(0, 1);
    }
    BowDocument { counts, label: None }
}

/// `n` words `w00, w01, …` with random `dim`-dimensional embeddings.
pub fn random_vocab(n: usize, dim: usize, rng: &mut impl Rng) -> (Vocabulary, EmbeddingTable) {
    let words: Vec<String> = (0..n).map(|i| format!("w{i:02}")).collect();
    let mut emb = EmbeddingTable::new(dim);
    for w in &words {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        emb.insert(w.clone(), v);
    }
    (Vocabulary::new(words).unwrap(), emb)
}

/// Settings shared by the planted-corpus training runs: refinement starts
/// after 40 steps (five epochs of 8 batches).
pub fn planted_config(seed: u64, t_total: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(BLOCKS);
    cfg.n_top_words = 10;
    cfg.m_refined = BLOCK_SIZE;
    cfg.gamma = 5.0;
    cfg.t_total = Some(t_total);
    cfg.t_refine = Some(40);
    cfg.seed = seed;
    cfg.lr = 0.01;
    cfg.batch_size = 32;
    cfg.hidden_size = 32;
    cfg
}

pub fn checkpoint_json(params: &NtmParams, vocab: &Vocabulary) -> String {
    Checkpoint {
        params: params.clone(),
        vocab_hash: vocab.hash(),
    }
    .to_json()
}
