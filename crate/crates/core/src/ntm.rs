//! Logistic-normal VAE topic model with a single linear decoder.
//!
//! Encoder: `h = softplus(W1 x̂ + b1)`, `mu = Wmu h + bmu`,
//! `logvar = clamp(Wlv h + blv, -10, 10)`, `z = softmax(mu + exp(logvar/2) ⊙ ε)`
//! with `x̂` the count vector scaled to sum one.
//!
//! Decoder: `log p(w | z) = log_softmax(φ z)`; column `k` of `φ` (after a
//! softmax over the vocabulary) is topic `k`.
//!
//! The loss minimized is the negative ELBO with an analytic KL to the
//! standard normal prior. Gradients are derived by hand and checked against
//! central finite differences in the tests.

use std::path::Path;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BowDocument, Vocabulary};
use crate::math::{log_softmax, sigmoid, softmax, softplus, top_n};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
pub const DEFAULT_HIDDEN: usize = 200;

/// Documents per gradient accumulation chunk. Fixed so the reduction order
/// does not depend on the thread pool.
const CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum NtmError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("topic index {index} out of range for K={k}")]
    Index { index: usize, k: usize },
    #[error("document has no words")]
    EmptyDocument,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NtmError>;

/// Encoder and decoder weights. Gradients use the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct NtmParams {
    /// H×V
    pub enc_w1: Array2<f64>,
    pub enc_b1: Array1<f64>,
    /// K×H
    pub enc_w_mu: Array2<f64>,
    pub enc_b_mu: Array1<f64>,
    /// K×H
    pub enc_w_logvar: Array2<f64>,
    pub enc_b_logvar: Array1<f64>,
    /// V×K; the topics.
    pub dec_phi: Array2<f64>,
}

pub type NtmGrads = NtmParams;

impl NtmParams {
    pub fn zeros(vocab_size: usize, num_topics: usize, hidden: usize) -> Self {
        Self {
            enc_w1: Array2::zeros((hidden, vocab_size)),
            enc_b1: Array1::zeros(hidden),
            enc_w_mu: Array2::zeros((num_topics, hidden)),
            enc_b_mu: Array1::zeros(num_topics),
            enc_w_logvar: Array2::zeros((num_topics, hidden)),
            enc_b_logvar: Array1::zeros(num_topics),
            dec_phi: Array2::zeros((vocab_size, num_topics)),
        }
    }

    /// Xavier-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(
        vocab_size: usize,
        num_topics: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(vocab_size, num_topics, hidden);
        for w in [
            &mut p.enc_w1,
            &mut p.enc_w_mu,
            &mut p.enc_w_logvar,
            &mut p.dec_phi,
        ] {
            let (r, c) = w.dim();
            let std = (2.0 / (r + c) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            w.iter_mut().for_each(|x| *x = dist.sample(rng));
        }
        p
    }

    pub fn vocab_size(&self) -> usize {
        self.dec_phi.nrows()
    }

    pub fn num_topics(&self) -> usize {
        self.dec_phi.ncols()
    }

    pub fn hidden_size(&self) -> usize {
        self.enc_b1.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab_size(), self.num_topics(), self.hidden_size())
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (v, k, h) = (self.vocab_size(), self.num_topics(), self.hidden_size());
        let ok = self.enc_w1.dim() == (h, v)
            && self.enc_w_mu.dim() == (k, h)
            && self.enc_w_logvar.dim() == (k, h)
            && self.enc_b_mu.len() == k
            && self.enc_b_logvar.len() == k;
        if ok {
            Ok(())
        } else {
            Err(NtmError::Shape(format!(
                "inconsistent parameter shapes for V={v}, K={k}, H={h}"
            )))
        }
    }

    /// Flat views of every field, in declaration order.
    pub fn fields(&self) -> [&[f64]; 7] {
        [
            self.enc_w1.as_slice().expect("standard layout"),
            self.enc_b1.as_slice().expect("standard layout"),
            self.enc_w_mu.as_slice().expect("standard layout"),
            self.enc_b_mu.as_slice().expect("standard layout"),
            self.enc_w_logvar.as_slice().expect("standard layout"),
            self.enc_b_logvar.as_slice().expect("standard layout"),
            self.dec_phi.as_slice().expect("standard layout"),
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.enc_w1.as_slice_mut().expect("standard layout"),
            self.enc_b1.as_slice_mut().expect("standard layout"),
            self.enc_w_mu.as_slice_mut().expect("standard layout"),
            self.enc_b_mu.as_slice_mut().expect("standard layout"),
            self.enc_w_logvar.as_slice_mut().expect("standard layout"),
            self.enc_b_logvar.as_slice_mut().expect("standard layout"),
            self.dec_phi.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|f| f.iter().all(|x| x.is_finite()))
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.fields_mut().into_iter().zip(other.fields()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += alpha * y);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for f in self.fields_mut() {
            f.iter_mut().for_each(|x| *x *= alpha);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub mu: Array1<f64>,
    pub logvar: Array1<f64>,
    pub z: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `Σ_v x_v log p_v`, the reconstruction log-likelihood.
    pub reconstruction: f64,
    pub kl: f64,
    /// `-reconstruction + kl`
    pub total: f64,
}

/// Intermediate values kept for the backward pass.
struct Forward {
    x_norm: Vec<(usize, f64)>,
    pre: Array1<f64>,
    h: Array1<f64>,
    mu: Array1<f64>,
    logvar_raw: Array1<f64>,
    logvar: Array1<f64>,
    z: Array1<f64>,
}

fn check_inputs(x: &BowDocument, params: &NtmParams, noise: &[f64]) -> Result<()> {
    if noise.len() != params.num_topics() {
        return Err(NtmError::Shape(format!(
            "noise has length {}, expected K={}",
            noise.len(),
            params.num_topics()
        )));
    }
    if x.counts.is_empty() {
        return Err(NtmError::EmptyDocument);
    }
    if let Some((&i, _)) = x.counts.iter().next_back() {
        if i >= params.vocab_size() {
            return Err(NtmError::Shape(format!(
                "word index {i} >= V={}",
                params.vocab_size()
            )));
        }
    }
    Ok(())
}

fn forward(x: &BowDocument, params: &NtmParams, noise: &[f64]) -> Forward {
    let total = x.total() as f64;
    let x_norm: Vec<(usize, f64)> = x.iter().map(|(i, c)| (i, c / total)).collect();

    let mut pre = params.enc_b1.clone();
    for &(v, xv) in &x_norm {
        pre.scaled_add(xv, &params.enc_w1.column(v));
    }
    let h = pre.mapv(softplus);
    let mu = params.enc_w_mu.dot(&h) + &params.enc_b_mu;
    let logvar_raw = params.enc_w_logvar.dot(&h) + &params.enc_b_logvar;
    let logvar = logvar_raw.mapv(|l| l.clamp(LOGVAR_MIN, LOGVAR_MAX));
    let latent: Vec<f64> = mu
        .iter()
        .zip(&logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    let z = Array1::from(softmax(&latent));
    Forward {
        x_norm,
        pre,
        h,
        mu,
        logvar_raw,
        logvar,
        z,
    }
}

pub fn encode(x: &BowDocument, params: &NtmParams, noise: &[f64]) -> Result<EncoderOutput> {
    check_inputs(x, params, noise)?;
    let f = forward(x, params, noise);
    Ok(EncoderOutput {
        mu: f.mu,
        logvar: f.logvar,
        z: f.z,
    })
}

/// Log-probabilities over the vocabulary, `log_softmax(φ z)`.
pub fn decode(z: &[f64], params: &NtmParams) -> Result<Vec<f64>> {
    if z.len() != params.num_topics() {
        return Err(NtmError::Shape(format!(
            "z has length {}, expected K={}",
            z.len(),
            params.num_topics()
        )));
    }
    let logits = params.dec_phi.dot(&ndarray::aview1(z));
    Ok(log_softmax(logits.as_slice().expect("contiguous")))
}

/// `0.5 Σ (exp(logvar) + mu² - 1 - logvar)`
pub fn kl_standard_normal(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
        .sum::<f64>()
}

fn loss_from(x: &BowDocument, f: &Forward, log_p: &[f64]) -> LossBreakdown {
    let reconstruction: f64 = x.iter().map(|(v, c)| c * log_p[v]).sum();
    let kl = kl_standard_normal(
        f.mu.as_slice().expect("contiguous"),
        f.logvar.as_slice().expect("contiguous"),
    );
    LossBreakdown {
        reconstruction,
        kl,
        total: -reconstruction + kl,
    }
}

pub fn elbo_loss(x: &BowDocument, params: &NtmParams, noise: &[f64]) -> Result<LossBreakdown> {
    check_inputs(x, params, noise)?;
    let f = forward(x, params, noise);
    let log_p = decode(f.z.as_slice().expect("contiguous"), params)?;
    Ok(loss_from(x, &f, &log_p))
}

/// Adds the gradient of one document's loss into `grad`.
fn accumulate_grad(
    x: &BowDocument,
    params: &NtmParams,
    noise: &[f64],
    grad: &mut NtmGrads,
) -> LossBreakdown {
    let f = forward(x, params, noise);
    let log_p = decode(f.z.as_slice().expect("contiguous"), params).expect("checked shapes");
    let loss = loss_from(x, &f, &log_p);
    let n_words = x.total() as f64;

    // d loss / d logits = n p - x
    let mut g_logits = Array1::from_iter(log_p.iter().map(|lp| n_words * lp.exp()));
    for (v, c) in x.iter() {
        g_logits[v] -= c;
    }

    // decoder: logits = φ z
    Zip::from(&mut grad.dec_phi)
        .and_broadcast(&g_logits.view().insert_axis(Axis(1)))
        .and_broadcast(&f.z.view().insert_axis(Axis(0)))
        .for_each(|g, &a, &b| *g += a * b);
    let g_z = params.dec_phi.t().dot(&g_logits);

    // softmax Jacobian
    let zg = f.z.dot(&g_z);
    let g_latent = &f.z * &(g_z - zg);

    let g_mu = &g_latent + &f.mu;
    let g_logvar = Array1::from_iter((0..f.mu.len()).map(|k| {
        if f.logvar_raw[k] <= LOGVAR_MIN || f.logvar_raw[k] >= LOGVAR_MAX {
            return 0.0;
        }
        let std = (0.5 * f.logvar[k]).exp();
        g_latent[k] * 0.5 * std * noise[k] + 0.5 * (f.logvar[k].exp() - 1.0)
    }));

    let outer = |g: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>| {
        Zip::from(g)
            .and_broadcast(&a.view().insert_axis(Axis(1)))
            .and_broadcast(&b.view().insert_axis(Axis(0)))
            .for_each(|g, &x, &y| *g += x * y);
    };
    outer(&mut grad.enc_w_mu, &g_mu, &f.h);
    grad.enc_b_mu += &g_mu;
    outer(&mut grad.enc_w_logvar, &g_logvar, &f.h);
    grad.enc_b_logvar += &g_logvar;

    let g_h = params.enc_w_mu.t().dot(&g_mu) + params.enc_w_logvar.t().dot(&g_logvar);
    let g_pre = Array1::from_iter(g_h.iter().zip(&f.pre).map(|(g, p)| g * sigmoid(*p)));
    for &(v, xv) in &f.x_norm {
        grad.enc_w1.column_mut(v).scaled_add(xv, &g_pre);
    }
    grad.enc_b1 += &g_pre;
    loss
}

/// Loss and its exact gradient with respect to every parameter, noise held
/// fixed.
pub fn elbo_loss_and_grad(
    x: &BowDocument,
    params: &NtmParams,
    noise: &[f64],
) -> Result<(LossBreakdown, NtmGrads)> {
    check_inputs(x, params, noise)?;
    let mut grad = params.zeros_like();
    let loss = accumulate_grad(x, params, noise, &mut grad);
    Ok((loss, grad))
}

pub fn grad_elbo(x: &BowDocument, params: &NtmParams, noise: &[f64]) -> Result<NtmGrads> {
    elbo_loss_and_grad(x, params, noise).map(|(_, g)| g)
}

/// Mean loss and mean gradient over a minibatch. Work is split into fixed
/// chunks and summed in order, so the result is independent of thread count.
pub fn batch_loss_and_grad(
    docs: &[&BowDocument],
    params: &NtmParams,
    noises: &[Vec<f64>],
) -> Result<(LossBreakdown, NtmGrads)> {
    if docs.len() != noises.len() || docs.is_empty() {
        return Err(NtmError::Shape(format!(
            "{} documents but {} noise vectors",
            docs.len(),
            noises.len()
        )));
    }
    for (d, e) in docs.iter().zip(noises) {
        check_inputs(d, params, e)?;
    }
    let partials: Vec<(LossBreakdown, NtmGrads)> = docs
        .par_chunks(CHUNK)
        .zip(noises.par_chunks(CHUNK))
        .map(|(ds, es)| {
            let mut grad = params.zeros_like();
            let mut loss = LossBreakdown {
                reconstruction: 0.0,
                kl: 0.0,
                total: 0.0,
            };
            for (d, e) in ds.iter().zip(es) {
                let l = accumulate_grad(d, params, e, &mut grad);
                loss.reconstruction += l.reconstruction;
                loss.kl += l.kl;
                loss.total += l.total;
            }
            (loss, grad)
        })
        .collect();
    let mut iter = partials.into_iter();
    let (mut loss, mut grad) = iter.next().expect("at least one chunk");
    for (l, g) in iter {
        loss.reconstruction += l.reconstruction;
        loss.kl += l.kl;
        loss.total += l.total;
        grad.add_scaled(1.0, &g);
    }
    let n = docs.len() as f64;
    grad.scale(1.0 / n);
    Ok((
        LossBreakdown {
            reconstruction: loss.reconstruction / n,
            kl: loss.kl / n,
            total: loss.total / n,
        },
        grad,
    ))
}

pub fn sample_noise<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k).map(|_| StandardNormal.sample(rng)).collect()
}

/// A topic: a distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Topic {
    pub topic_index: usize,
    pub dist: Vec<f64>,
}

pub fn topic_distribution(params: &NtmParams, k: usize) -> Result<Topic> {
    if k >= params.num_topics() {
        return Err(NtmError::Index {
            index: k,
            k: params.num_topics(),
        });
    }
    let col: Vec<f64> = params.dec_phi.column(k).to_vec();
    Ok(Topic {
        topic_index: k,
        dist: softmax(&col),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicWords {
    pub indices: Vec<usize>,
    pub words: Vec<String>,
    pub probs: Vec<f64>,
}

/// The `n` most probable words of `topic`, descending, ties broken by the
/// smaller word index.
pub fn topic_words(topic: &Topic, vocab: &Vocabulary, n: usize) -> TopicWords {
    let indices = top_n(&topic.dist, n);
    TopicWords {
        words: indices.iter().map(|&i| vocab.word(i).to_string()).collect(),
        probs: indices.iter().map(|&i| topic.dist[i]).collect(),
        indices,
    }
}

/// First-order adaptive-moment optimizer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: NtmParams,
    v: NtmParams,
}

impl Adam {
    pub fn new(params: &NtmParams, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut NtmParams, grad: &NtmGrads) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .fields_mut()
            .into_iter()
            .zip(grad.fields())
            .zip(self.m.fields_mut())
            .zip(self.v.fields_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Row-major matrix as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&Array2<f64>> for StoredMatrix {
    fn from(a: &Array2<f64>) -> Self {
        Self {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }
}

impl TryFrom<StoredMatrix> for Array2<f64> {
    type Error = NtmError;
    fn try_from(m: StoredMatrix) -> Result<Self> {
        Array2::from_shape_vec((m.rows, m.cols), m.data)
            .map_err(|e| NtmError::Checkpoint(e.to_string()))
    }
}

pub const CHECKPOINT_FORMAT: &str = "topicalign-ntm";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredCheckpoint {
    format: String,
    version: u32,
    vocab_size: usize,
    num_topics: usize,
    hidden_size: usize,
    vocab_hash: String,
    enc_w1: StoredMatrix,
    enc_b1: Vec<f64>,
    enc_w_mu: StoredMatrix,
    enc_b_mu: Vec<f64>,
    enc_w_logvar: StoredMatrix,
    enc_b_logvar: Vec<f64>,
    dec_phi: StoredMatrix,
}

/// Parameters together with the hash of the vocabulary they index.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NtmParams,
    pub vocab_hash: String,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let p = &self.params;
        let stored = StoredCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            vocab_size: p.vocab_size(),
            num_topics: p.num_topics(),
            hidden_size: p.hidden_size(),
            vocab_hash: self.vocab_hash.clone(),
            enc_w1: (&p.enc_w1).into(),
            enc_b1: p.enc_b1.to_vec(),
            enc_w_mu: (&p.enc_w_mu).into(),
            enc_b_mu: p.enc_b_mu.to_vec(),
            enc_w_logvar: (&p.enc_w_logvar).into(),
            enc_b_logvar: p.enc_b_logvar.to_vec(),
            dec_phi: (&p.dec_phi).into(),
        };
        serde_json::to_string(&stored).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: StoredCheckpoint =
            serde_json::from_str(text).map_err(|e| NtmError::Checkpoint(e.to_string()))?;
        if s.format != CHECKPOINT_FORMAT || s.version != CHECKPOINT_VERSION {
            return Err(NtmError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                s.format, s.version
            )));
        }
        let params = NtmParams {
            enc_w1: s.enc_w1.try_into()?,
            enc_b1: Array1::from(s.enc_b1),
            enc_w_mu: s.enc_w_mu.try_into()?,
            enc_b_mu: Array1::from(s.enc_b_mu),
            enc_w_logvar: s.enc_w_logvar.try_into()?,
            enc_b_logvar: Array1::from(s.enc_b_logvar),
            dec_phi: s.dec_phi.try_into()?,
        };
        params.check_shapes()?;
        if (params.vocab_size(), params.num_topics(), params.hidden_size())
            != (s.vocab_size, s.num_topics, s.hidden_size)
        {
            return Err(NtmError::Checkpoint("declared sizes disagree with arrays".into()));
        }
        Ok(Self {
            params,
            vocab_hash: s.vocab_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::logsumexp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn doc(pairs: &[(usize, u32)]) -> BowDocument {
        BowDocument {
            counts: pairs.iter().copied().collect::<BTreeMap<_, _>>(),
            label: None,
        }
    }

    fn random_params(v: usize, k: usize, h: usize, seed: u64) -> NtmParams {
        NtmParams::init(v, k, h, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_weights_give_uniform_z() {
        let p = NtmParams::zeros(5, 4, 3);
        let out = encode(&doc(&[(0, 2), (3, 1)]), &p, &[0.0; 4]).unwrap();
        assert!(out.z.iter().all(|z| (z - 0.25).abs() < 1e-15));
    }

    #[test]
    fn encode_is_deterministic_and_normalized() {
        let p = random_params(10, 3, 6, 1);
        let x = doc(&[(1, 3), (7, 2)]);
        let noise = [0.3, -1.2, 0.8];
        let a = encode(&x, &p, &noise).unwrap();
        let b = encode(&x, &p, &noise).unwrap();
        assert_eq!(a, b);
        assert!((a.z.sum() - 1.0).abs() < 1e-6);
        assert!(a.z.iter().all(|&z| z >= 0.0));
    }

    #[test]
    fn encode_rejects_bad_shapes() {
        let p = NtmParams::zeros(5, 3, 2);
        assert!(matches!(
            encode(&doc(&[(0, 1)]), &p, &[0.0; 2]),
            Err(NtmError::Shape(_))
        ));
        assert!(matches!(
            encode(&doc(&[(9, 1)]), &p, &[0.0; 3]),
            Err(NtmError::Shape(_))
        ));
        assert!(matches!(decode(&[1.0], &p), Err(NtmError::Shape(_))));
    }

    #[test]
    fn decode_examples() {
        let p = NtmParams::zeros(8, 2, 2);
        let out = decode(&[0.5, 0.5], &p).unwrap();
        assert!(out.iter().all(|x| (x + 8f64.ln()).abs() < 1e-12));

        let p = random_params(8, 3, 2, 4);
        let out = decode(&[0.0, 1.0, 0.0], &p).unwrap();
        let col: Vec<f64> = p.dec_phi.column(1).to_vec();
        let expected = log_softmax(&col);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let out = decode(&[0.2, 0.5, 0.3], &p).unwrap();
        assert!(logsumexp(&out).abs() < 1e-6);
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_standard_normal(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((kl_standard_normal(&[1.0, 0.0, 0.0], &[0.0; 3]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_gradient_vanishes_at_prior() {
        // Zero weights and biases: mu = 0, logvar = 0. With zero noise the
        // reconstruction term does not reach mu either, so grad mu is zero.
        let mut p = NtmParams::zeros(4, 2, 3);
        p.dec_phi.fill(0.0);
        let g = grad_elbo(&doc(&[(0, 1), (2, 2)]), &p, &[0.0, 0.0]).unwrap();
        assert!(g.enc_b_mu.iter().all(|x| x.abs() < 1e-15));
        assert!(g.enc_b_logvar.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn untouched_decoder_rows_get_no_reconstruction_gradient_pattern() {
        // One-hot z: only column k of φ gets gradient; for rows v the
        // gradient is n p_v - x_v, which for a zero count is just n p_v.
        let mut p = NtmParams::zeros(5, 2, 2);
        p.enc_b_mu[0] = 60.0; // z ≈ e_0
        let x = doc(&[(1, 3)]);
        let g = grad_elbo(&x, &p, &[0.0, 0.0]).unwrap();
        let log_p = decode(&[1.0, 0.0], &p).unwrap();
        for v in 0..5 {
            assert!(g.dec_phi[[v, 1]].abs() < 1e-12);
            let expected = 3.0 * log_p[v].exp() - if v == 1 { 3.0 } else { 0.0 };
            assert!((g.dec_phi[[v, 0]] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn topic_distribution_examples() {
        let p = NtmParams::zeros(4, 2, 1);
        assert_eq!(topic_distribution(&p, 0).unwrap().dist, vec![0.25; 4]);
        let mut p = NtmParams::zeros(2, 1, 1);
        p.dec_phi[[0, 0]] = 2f64.ln();
        let t = topic_distribution(&p, 0).unwrap();
        assert!((t.dist[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((t.dist[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            topic_distribution(&p, 1),
            Err(NtmError::Index { index: 1, k: 1 })
        ));
    }

    #[test]
    fn topic_words_order_and_ties() {
        let vocab = Vocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let t = Topic {
            topic_index: 0,
            dist: vec![0.1, 0.7, 0.2],
        };
        let tw = topic_words(&t, &vocab, 2);
        assert_eq!(tw.indices, vec![1, 2]);
        assert_eq!(tw.words, vec!["b", "c"]);
        assert_eq!(tw.probs, vec![0.7, 0.2]);
        let u = Topic {
            topic_index: 0,
            dist: vec![1.0 / 3.0; 3],
        };
        assert_eq!(topic_words(&u, &vocab, 2).indices, vec![0, 1]);
        let mut all = topic_words(&t, &vocab, 3).indices;
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
    }

    #[test]
    fn batch_gradient_is_mean_of_document_gradients() {
        let p = random_params(12, 3, 5, 9);
        let docs: Vec<BowDocument> = (0..40)
            .map(|i| doc(&[(i % 12, 1 + (i % 3) as u32), ((i * 7) % 12, 2)]))
            .collect();
        let refs: Vec<&BowDocument> = docs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noises: Vec<Vec<f64>> = (0..40).map(|_| sample_noise(3, &mut rng)).collect();
        let (loss, grad) = batch_loss_and_grad(&refs, &p, &noises).unwrap();
        let mut expected = p.zeros_like();
        let mut total = 0.0;
        for (d, e) in docs.iter().zip(&noises) {
            let (l, g) = elbo_loss_and_grad(d, &p, e).unwrap();
            expected.add_scaled(1.0 / 40.0, &g);
            total += l.total;
        }
        assert!((loss.total - total / 40.0).abs() < 1e-9);
        for (a, b) in grad.fields().iter().zip(expected.fields()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn checkpoint_json_round_trip_is_exact() {
        let p = random_params(7, 3, 4, 11);
        let ck = Checkpoint {
            params: p,
            vocab_hash: "abc".into(),
        };
        let text = ck.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn checkpoint_rejects_foreign_format() {
        let p = NtmParams::zeros(2, 2, 1);
        let text = Checkpoint {
            params: p,
            vocab_hash: String::new(),
        }
        .to_json()
        .replace(CHECKPOINT_FORMAT, "other");
        assert!(Checkpoint::from_json(&text).is_err());
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = NtmParams::zeros(2, 2, 1);
        let mut g = p.zeros_like();
        g.dec_phi[[0, 0]] = 3.0;
        g.dec_phi[[1, 1]] = -0.5;
        let mut opt = Adam::new(&p, 0.01);
        opt.update(&mut p, &g);
        assert!((p.dec_phi[[0, 0]] + 0.01).abs() < 1e-8);
        assert!((p.dec_phi[[1, 1]] - 0.01).abs() < 1e-8);
        assert_eq!(p.dec_phi[[0, 1]], 0.0);
    }
}
