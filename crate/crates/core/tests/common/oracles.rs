//! Reference implementations used only to check the library: brute-force
//! assignment, textbook divergence formulas, recount-based clustering scores
//! and central finite differences. They favour obviousness over speed.

use std::collections::BTreeMap;

/// Minimum of `Σ_i C[i][π(i)]` over all permutations `π`, by enumeration.
pub fn min_assignment_cost(c: &[Vec<f64>]) -> f64 {
    fn go(c: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == c.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..c.len() {
            if !used[j] {
                used[j] = true;
                go(c, row + 1, used, acc + c[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.len()], 0.0, &mut best);
    best
}

fn renormalized_with(p: &[f64], s: f64) -> Vec<f64> {
    let shifted: Vec<f64> = p.iter().map(|x| x + s).collect();
    let total: f64 = shifted.iter().sum();
    shifted.iter().map(|x| x / total).collect()
}

/// `Σ p log(p/q)` after adding `s` to every entry of both and renormalizing.
pub fn kl(p: &[f64], q: &[f64], s: f64) -> f64 {
    let p = renormalized_with(p, s);
    let q = renormalized_with(q, s);
    let mut total = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            total += p[i] * (p[i].ln() - q[i].ln());
        }
    }
    total
}

pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = (0..p.len()).map(|i| (p[i] + q[i]) / 2.0).collect();
    let half = |x: &[f64]| -> f64 {
        (0..x.len())
            .filter(|&i| x[i] > 0.0)
            .map(|i| x[i] * (x[i] / m[i]).ln())
            .sum()
    };
    0.5 * half(p) + 0.5 * half(q)
}

pub fn hellinger(p: &[f64], q: &[f64]) -> f64 {
    let sq: f64 = (0..p.len()).map(|i| (p[i].sqrt() - q[i].sqrt()).powi(2)).sum();
    sq.sqrt() / 2f64.sqrt()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    (0..p.len()).map(|i| (p[i] - q[i]).abs()).sum::<f64>() / 2.0
}

/// Contingency table `table[cluster][label]` over sorted distinct values.
fn contingency(assignments: &[usize], labels: &[String]) -> Vec<Vec<usize>> {
    let clusters: Vec<usize> = {
        let mut c = assignments.to_vec();
        c.sort();
        c.dedup();
        c
    };
    let names: Vec<&String> = {
        let mut l: Vec<&String> = labels.iter().collect();
        l.sort();
        l.dedup();
        l
    };
    let mut table = vec![vec![0usize; names.len()]; clusters.len()];
    for d in 0..assignments.len() {
        let r = clusters.iter().position(|c| *c == assignments[d]).unwrap();
        let col = names.iter().position(|l| *l == &labels[d]).unwrap();
        table[r][col] += 1;
    }
    table
}

pub fn purity(assignments: &[usize], labels: &[String]) -> f64 {
    let table = contingency(assignments, labels);
    let hits: usize = table.iter().map(|row| *row.iter().max().unwrap()).sum();
    hits as f64 / assignments.len() as f64
}

/// Mutual information over the square root of the product of entropies.
pub fn nmi(assignments: &[usize], labels: &[String]) -> f64 {
    let table = contingency(assignments, labels);
    let n = assignments.len() as f64;
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let cols: Vec<f64> = (0..table[0].len())
        .map(|j| table.iter().map(|r| r[j]).sum::<usize>() as f64)
        .collect();
    let h = |xs: &[f64]| -> f64 {
        xs.iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| -(x / n) * (x / n).ln())
            .sum()
    };
    let (hr, hc) = (h(&rows), h(&cols));
    if hr == 0.0 || hc == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += (nij / n) * ((n * nij) / (rows[i] * cols[j])).ln();
            }
        }
    }
    mi / (hr * hc).sqrt()
}

/// Distinct words over total word slots.
pub fn diversity(topics: &[Vec<&str>]) -> f64 {
    let mut seen: BTreeMap<&str, ()> = BTreeMap::new();
    let mut slots = 0;
    for t in topics {
        for w in t {
            seen.insert(w, ());
            slots += 1;
        }
    }
    seen.len() as f64 / slots as f64
}

/// `(f(x + h) - f(x - h)) / 2h`
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Below this magnitude gradient entries are compared absolutely: both the
/// analytic value and the difference quotient are then dominated by
/// round-off in the loss.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}
