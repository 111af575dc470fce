//! Neural topic modelling with LLM-guided topic refinement.
//!
//! A VAE topic model is trained on bag-of-words documents. After a warm-up
//! phase each topic's top words are sent to a language model, which returns
//! a short label and a refined word list. The distance between the topic and
//! the refined words (entropic optimal transport over word embeddings by
//! default), weighted by how confident the model was, is added to the
//! training objective.
//!
//! Modules:
//! - [`corpus`]: tokenization, vocabulary, bag-of-words files, embeddings.
//! - [`ntm`]: the topic model, its hand-derived gradients and checkpoints.
//! - [`ot`]: Sinkhorn solver and alternative divergences.
//! - [`llm`]: prompts, HTTP/mock providers, answer parsing, confidence.
//! - [`trainer`]: warm-up and refinement training loop.
//! - [`eval`]: coherence, clustering and diversity metrics.

pub mod corpus;
pub mod eval;
pub mod llm;
pub mod math;
pub mod ntm;
pub mod ot;
pub mod trainer;
