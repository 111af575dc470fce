//! Discrete optimal transport between word distributions.
//!
//! The solver is entropic Sinkhorn in the log domain. It minimizes
//!
//! ```text
//! W_ε(a, b) = min_P ⟨C, P⟩ + ε KL(P ‖ a bᵀ)   s.t. P 1 = a, Pᵀ 1 = b
//! ```
//!
//! whose optimal plan coincides with the plan of the plain entropy-regularized
//! problem. With potentials `f, g` the plan is
//! `P_ij = a_i b_j exp((f_i + g_j - C_ij) / ε)` and at convergence
//! `W_ε = ⟨f, a⟩ + ⟨g, b⟩`. The gradient of `W_ε` with respect to `a` (along
//! zero-sum directions) is `f`, which is what the topic refinement step
//! back-propagates.
//!
//! Besides OT this module hosts the closed-form divergences used as
//! alternatives to OT (KL, Jensen-Shannon, Hellinger, total variation).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EmbeddingTable;
use crate::math::{dot, logsumexp, norm};

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const MARGINAL_FLOOR: f64 = 1e-9;
pub const ZERO_NORM: f64 = 1e-12;
pub const DEFAULT_KL_SMOOTHING: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum OtError {
    #[error("no embedding for `{0}`")]
    MissingEmbedding(String),
    #[error("embedding of `{0}` has (near) zero norm")]
    ZeroVector(String),
    #[error("scaling factors overflowed at iteration {iteration}; increase epsilon")]
    NumericalOverflow { iteration: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, OtError>;

/// Row-major N×M ground cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(OtError::Invalid(format!(
                "{} values for a {rows}x{cols} cost matrix",
                values.len()
            )));
        }
        if values.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(OtError::Invalid("costs must be finite and >= 0".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(OtError::Invalid("ragged cost rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// `1 - cos(e_i, e_j)`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    (1.0 - dot(a, b) / (norm(a) * norm(b))).clamp(0.0, 2.0)
}

fn lookup<'a>(emb: &'a EmbeddingTable, word: &str) -> Result<&'a [f64]> {
    let v = emb
        .get(word)
        .ok_or_else(|| OtError::MissingEmbedding(word.to_string()))?;
    if norm(v) < ZERO_NORM {
        return Err(OtError::ZeroVector(word.to_string()));
    }
    Ok(v)
}

/// Cosine-distance cost between two word lists.
pub fn cost_matrix<S: AsRef<str>, T: AsRef<str>>(
    src_words: &[S],
    dst_words: &[T],
    emb: &EmbeddingTable,
) -> Result<CostMatrix> {
    let src = src_words
        .iter()
        .map(|w| lookup(emb, w.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let dst = dst_words
        .iter()
        .map(|w| lookup(emb, w.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let values = src
        .iter()
        .flat_map(|s| dst.iter().map(move |d| cosine_distance(s, d)))
        .collect();
    CostMatrix::new(src.len(), dst.len(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtResult {
    /// Transport cost `⟨C, P⟩` of the returned plan.
    pub cost: f64,
    /// Regularized objective `W_ε(a, b) = ⟨f, a⟩ + ⟨g, b⟩`; never below `cost`
    /// at convergence.
    pub value: f64,
    /// Row-major N×M.
    pub plan: Vec<f64>,
    /// Source potential, centered to mean zero.
    pub dual_f: Vec<f64>,
    pub dual_g: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest row-marginal violation at exit.
    pub marginal_error: f64,
}

impl OtResult {
    pub fn row_sums(&self) -> Vec<f64> {
        let m = self.dual_g.len();
        self.plan.chunks(m).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let m = self.dual_g.len();
        let mut out = vec![0.0; m];
        for row in self.plan.chunks(m) {
            out.iter_mut().zip(row).for_each(|(o, p)| *o += p);
        }
        out
    }
}

/// Floors entries at [`MARGINAL_FLOOR`] and renormalizes.
pub fn floor_marginal(p: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = p.iter().map(|x| x.max(MARGINAL_FLOOR)).collect();
    let s: f64 = floored.iter().sum();
    floored.into_iter().map(|x| x / s).collect()
}

fn check_marginal(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(OtError::Invalid(format!("{what} is empty")));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(OtError::Invalid(format!("{what} has negative or non-finite mass")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(OtError::Invalid(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

/// Log-domain Sinkhorn iterations.
pub fn sinkhorn(a: &[f64], b: &[f64], c: &CostMatrix, cfg: &SinkhornConfig) -> Result<OtResult> {
    if a.len() != c.rows() {
        return Err(OtError::LengthMismatch(a.len(), c.rows()));
    }
    if b.len() != c.cols() {
        return Err(OtError::LengthMismatch(b.len(), c.cols()));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(OtError::Invalid(format!("epsilon must be > 0, got {}", cfg.epsilon)));
    }
    check_marginal(a, "source marginal")?;
    check_marginal(b, "target marginal")?;
    let a = floor_marginal(a);
    let b = floor_marginal(b);
    let (n, m, eps) = (a.len(), b.len(), cfg.epsilon);
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut buf_m = vec![0.0; m];
    let mut buf_n = vec![0.0; n];
    let mut iterations = 0;
    let mut err = f64::INFINITY;

    // f_i = -ε log Σ_j b_j exp((g_j - C_ij)/ε), and symmetrically for g.
    let update_f = |f: &mut [f64], g: &[f64], buf: &mut [f64]| {
        for i in 0..n {
            let row = c.row(i);
            for j in 0..m {
                buf[j] = log_b[j] + (g[j] - row[j]) / eps;
            }
            f[i] = -eps * logsumexp(buf);
        }
    };
    let update_g = |g: &mut [f64], f: &[f64], buf: &mut [f64]| {
        for j in 0..m {
            for i in 0..n {
                buf[i] = log_a[i] + (f[i] - c.get(i, j)) / eps;
            }
            g[j] = -eps * logsumexp(buf);
        }
    };
    let row_error = |f: &[f64], g: &[f64], buf: &mut [f64]| -> f64 {
        (0..n)
            .map(|i| {
                let row = c.row(i);
                for j in 0..m {
                    buf[j] = log_b[j] + (f[i] + g[j] - row[j]) / eps;
                }
                // row sum / a_i = exp(lse)
                (a[i] * logsumexp(buf).exp() - a[i]).abs()
            })
            .fold(0.0, f64::max)
    };

    while iterations < cfg.max_iter {
        iterations += 1;
        update_f(&mut f, &g, &mut buf_m);
        update_g(&mut g, &f, &mut buf_n);
        if f.iter().chain(&g).any(|x| !x.is_finite()) {
            return Err(OtError::NumericalOverflow {
                iteration: iterations,
            });
        }
        err = row_error(&f, &g, &mut buf_m);
        if err < cfg.tol {
            break;
        }
    }
    let converged = err < cfg.tol;
    if !converged {
        log::debug!("sinkhorn stopped after {iterations} iterations, marginal error {err:.3e}");
    }

    let shift = f.iter().sum::<f64>() / n as f64;
    f.iter_mut().for_each(|x| *x -= shift);
    g.iter_mut().for_each(|x| *x += shift);

    let mut plan = vec![0.0; n * m];
    let mut cost = 0.0;
    for i in 0..n {
        for j in 0..m {
            let p = a[i] * b[j] * ((f[i] + g[j] - c.get(i, j)) / eps).exp();
            plan[i * m + j] = p;
            cost += c.get(i, j) * p;
        }
    }
    if plan.iter().any(|p| !p.is_finite()) {
        return Err(OtError::NumericalOverflow {
            iteration: iterations,
        });
    }
    let value = dot(&f, &a) + dot(&g, &b);
    Ok(OtResult {
        cost: cost.max(0.0),
        value,
        plan,
        dual_f: f,
        dual_g: g,
        iterations,
        converged,
        marginal_error: err,
    })
}

/// Gradient of the regularized OT value with respect to the source
/// marginal: the centered source potential.
pub fn ot_grad_source(result: &OtResult) -> Vec<f64> {
    if !result.converged {
        log::warn!(
            "using potentials of an unconverged sinkhorn run (marginal error {:.3e})",
            result.marginal_error
        );
    }
    result.dual_f.clone()
}

/// Distance used to compare a topic's word distribution with the suggested
/// words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DivergenceKind {
    Ot,
    Kl,
    Jsd,
    Hd,
    Tvd,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 5] = [Self::Ot, Self::Kl, Self::Jsd, Self::Hd, Self::Tvd];
}

impl std::fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Ot => "OT",
            Self::Kl => "KL",
            Self::Jsd => "JSD",
            Self::Hd => "HD",
            Self::Tvd => "TVD",
        };
        f.write_str(s)
    }
}

fn smooth(p: &[f64], s: f64) -> Vec<f64> {
    let z: f64 = p.iter().sum::<f64>() + s * p.len() as f64;
    p.iter().map(|x| (x + s) / z).collect()
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// Closed-form divergences between two distributions on a shared support.
/// `smoothing` applies to KL only. `Ot` has no closed form here and is
/// rejected; use [`sinkhorn`].
pub fn divergence(p: &[f64], q: &[f64], kind: DivergenceKind, smoothing: f64) -> Result<f64> {
    divergence_and_grad(p, q, kind, smoothing).map(|(v, _)| v)
}

/// Divergence value and its gradient with respect to `p` (entries where
/// `p_i = 0` get the one-sided limit, or zero when that is infinite).
pub fn divergence_and_grad(
    p: &[f64],
    q: &[f64],
    kind: DivergenceKind,
    smoothing: f64,
) -> Result<(f64, Vec<f64>)> {
    if p.len() != q.len() {
        return Err(OtError::LengthMismatch(p.len(), q.len()));
    }
    let n = p.len();
    match kind {
        DivergenceKind::Ot => Err(OtError::Invalid(
            "OT needs a cost matrix; call sinkhorn".into(),
        )),
        DivergenceKind::Kl => {
            let ps = smooth(p, smoothing);
            let qs = smooth(q, smoothing);
            let value = kl_raw(&ps, &qs);
            // p̃ = (p + s) / Z with Z = Σp + n s.
            let z: f64 = p.iter().sum::<f64>() + smoothing * n as f64;
            let inner: Vec<f64> = ps
                .iter()
                .zip(&qs)
                .map(|(a, b)| if *a > 0.0 { (a / b).ln() + 1.0 } else { 0.0 })
                .collect();
            let mean: f64 = dot(&inner, &ps);
            let grad = inner.iter().map(|g| (g - mean) / z).collect();
            Ok((value, grad))
        }
        DivergenceKind::Jsd => {
            let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
            let value = 0.5 * kl_raw(p, &m) + 0.5 * kl_raw(q, &m);
            let grad = p
                .iter()
                .zip(&m)
                .map(|(pi, mi)| if *pi > 0.0 { 0.5 * (pi / mi).ln() } else { 0.0 })
                .collect();
            Ok((value, grad))
        }
        DivergenceKind::Hd => {
            let diff: Vec<f64> = p.iter().zip(q).map(|(a, b)| a.sqrt() - b.sqrt()).collect();
            let l2 = norm(&diff);
            let value = l2 / std::f64::consts::SQRT_2;
            let grad = p
                .iter()
                .zip(&diff)
                .map(|(pi, d)| {
                    if l2 == 0.0 || *pi <= 0.0 {
                        0.0
                    } else {
                        d / (l2 * std::f64::consts::SQRT_2 * 2.0 * pi.sqrt())
                    }
                })
                .collect();
            Ok((value, grad))
        }
        DivergenceKind::Tvd => {
            let value = 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>();
            let grad = p
                .iter()
                .zip(q)
                .map(|(a, b)| {
                    if a > b {
                        0.5
                    } else if a < b {
                        -0.5
                    } else {
                        0.0
                    }
                })
                .collect();
            Ok((value, grad))
        }
    }
}

/// Places a topic's distribution (mass `t` on `topic_words`) and a uniform
/// distribution over `refined_words` on the union of both word lists.
/// Topic words come first, in order, followed by refined words not already
/// present.
pub fn union_support<S: AsRef<str>, T: AsRef<str>>(
    topic_words: &[S],
    t: &[f64],
    refined_words: &[T],
) -> (Vec<String>, Vec<f64>, Vec<f64>) {
    let mut words: Vec<String> = topic_words.iter().map(|w| w.as_ref().to_string()).collect();
    let mut p: Vec<f64> = t.to_vec();
    let mut q = vec![0.0; words.len()];
    let u = 1.0 / refined_words.len() as f64;
    for w in refined_words {
        match words.iter().position(|x| x == w.as_ref()) {
            Some(i) => q[i] += u,
            None => {
                words.push(w.as_ref().to_string());
                p.push(0.0);
                q.push(u);
            }
        }
    }
    (words, p, q)
}
