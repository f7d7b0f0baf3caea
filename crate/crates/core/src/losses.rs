//! Contrastive matching objectives over a batch similarity matrix.
//!
//! All losses are summed over the batch. Every function builds graph nodes
//! so the result can be differentiated, including through inner updates.

use mdw_numeric::{Graph, Tensor, Var};

use crate::error::{contract, Result};

const LABEL_SUM_TOL: f64 = 1e-6;

/// Image-to-text (row-stochastic) and text-to-image (column-stochastic)
/// matching probabilities.
#[derive(Clone, Copy, Debug)]
pub struct MatchingProbs {
    pub i2t: Var,
    pub t2i: Var,
}

/// Matching targets in both directions. `i2t` rows and `t2i` columns are
/// probability vectors.
#[derive(Clone, Copy, Debug)]
pub struct Labels {
    pub i2t: Var,
    pub t2i: Var,
}

impl Labels {
    /// One-hot targets on the diagonal.
    pub fn hard(g: &Graph, b: usize) -> Result<Self> {
        let eye = g.constant(Tensor::identity(b)?);
        Ok(Self { i2t: eye, t2i: eye })
    }

    /// Targets from matching logits: row softmax for i2t, column softmax
    /// for t2i, both at temperature `tau`.
    pub fn soft(g: &Graph, logits: Var, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        let z = g.scale(logits, 1.0 / tau)?;
        Ok(Self {
            i2t: g.row_softmax(z)?,
            t2i: g.col_softmax(z)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub correspondence: f64,
    pub noncorrespondence: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            correspondence: 1.0,
            noncorrespondence: 1.0,
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return contract(format!("temperature must be positive, got {tau}"));
    }
    Ok(())
}

fn check_square(g: &Graph, h: Var) -> Result<usize> {
    let [r, c] = g.shape(h);
    if r != c {
        return contract(format!("similarity matrix must be square, got {r}x{c}"));
    }
    Ok(r)
}

pub fn matching_probs(g: &Graph, h: Var, tau: f64) -> Result<MatchingProbs> {
    check_tau(tau)?;
    let z = g.scale(h, 1.0 / tau)?;
    Ok(MatchingProbs {
        i2t: g.row_softmax(z)?,
        t2i: g.col_softmax(z)?,
    })
}

/// Softmax of one row of matching logits at temperature `tau`.
pub fn soft_labels(row: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if row.is_empty() {
        return contract("empty logit row");
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| ((x - max) / tau).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / total).collect())
}

/// Row-wise log-softmax with the row max held constant.
fn log_row_softmax(g: &Graph, z: Var) -> Result<Var> {
    let t = g.value(z);
    let r = t.rows();
    let maxes = Tensor::from_fn([r, 1], |i, _| {
        t.row_slice(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    })?;
    let shifted = g.sub(z, g.constant(maxes))?;
    let e = g.exp(shifted)?;
    let lse = g.log(g.sum_rows(e)?)?;
    Ok(g.sub(shifted, lse)?)
}

fn check_label_sums(t: &Tensor, by_rows: bool, what: &str) -> Result<()> {
    let [r, c] = t.shape();
    let (outer, inner) = if by_rows { (r, c) } else { (c, r) };
    for a in 0..outer {
        let s: f64 = (0..inner)
            .map(|b| if by_rows { t.get(a, b) } else { t.get(b, a) })
            .sum();
        if (s - 1.0).abs() > LABEL_SUM_TOL {
            return contract(format!("{what} labels at {a} sum to {s}, expected 1"));
        }
    }
    Ok(())
}

/// Symmetric soft-label cross-entropy:
/// `−Σ_ij (y^{i2t}_ij log p^{i2t}_ij + y^{t2i}_ij log p^{t2i}_ij)`.
pub fn loss_correspondence(g: &Graph, h: Var, labels: &Labels, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let b = check_square(g, h)?;
    for (l, what) in [(labels.i2t, "i2t"), (labels.t2i, "t2i")] {
        if g.shape(l) != [b, b] {
            return contract(format!("{what} labels shape {:?} vs batch {b}", g.shape(l)));
        }
    }
    check_label_sums(&g.value(labels.i2t), true, "i2t")?;
    check_label_sums(&g.value(labels.t2i), false, "t2i")?;

    let z = g.scale(h, 1.0 / tau)?;
    let log_i2t = log_row_softmax(g, z)?;
    let log_t2i = g.transpose(log_row_softmax(g, g.transpose(z)?)?)?;
    let a = g.sum(g.mul(labels.i2t, log_i2t)?)?;
    let c = g.sum(g.mul(labels.t2i, log_t2i)?)?;
    Ok(g.neg(g.add(a, c)?)?)
}

fn off_diagonal(b: usize, rows: Option<&[bool]>) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(b * b.saturating_sub(1));
    for i in 0..b {
        if rows.is_some_and(|r| !r[i]) {
            continue;
        }
        pairs.extend((0..b).filter(|&j| j != i).map(|j| (i, j)));
    }
    pairs
}

/// `log(1 − softmax(z)[r, c])` for each listed `(r, c)`, as a `n×1` column.
///
/// Evaluated as the log-sum-exp of the row without column `c` minus the
/// log-sum-exp of the whole row, which stays accurate when the excluded
/// entry dominates the row.
fn log_complement_softmax(g: &Graph, z: Var, entries: &[(usize, usize)]) -> Result<Var> {
    let t = g.value(z);
    let [r, c] = t.shape();
    let n = entries.len();
    let row_max = Tensor::from_fn([r, 1], |i, _| {
        t.row_slice(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    })?;
    let row_max = g.constant(row_max);
    let row_lse = g.add(g.log(g.sum_rows(g.exp(g.sub(z, row_max)?)?)?)?, row_max)?;

    let mut idx = Vec::with_capacity(n * (c - 1));
    let mut rest_max = Vec::with_capacity(n);
    for &(i, j) in entries {
        let mut m = f64::NEG_INFINITY;
        for k in (0..c).filter(|&k| k != j) {
            idx.push((i * c + k) as u32);
            m = m.max(t.get(i, k));
        }
        rest_max.push(m);
    }
    let rest = g.gather(z, std::sync::Arc::new(idx), [n, c - 1])?;
    let rest_max = g.constant(Tensor::new([n, 1], rest_max)?);
    let rest_lse = g.add(g.log(g.sum_rows(g.exp(g.sub(rest, rest_max)?)?)?)?, rest_max)?;
    let rows: Vec<usize> = entries.iter().map(|e| e.0).collect();
    Ok(g.sub(rest_lse, g.select_rows(row_lse, &rows)?)?)
}

/// Negative-match loss `−Σ_i Σ_{j≠i} (log(1 − p^{i2t}_ij) + log(1 − p^{t2i}_ij))`.
pub fn loss_noncorrespondence(g: &Graph, h: Var, tau: f64) -> Result<Var> {
    noncorrespondence_inner(g, h, tau, None)
}

/// [`loss_noncorrespondence`] restricted to the terms of rows with
/// `include[i]` set.
pub fn loss_noncorrespondence_rows(g: &Graph, h: Var, tau: f64, include: &[bool]) -> Result<Var> {
    let b = check_square(g, h)?;
    if include.len() != b {
        return contract(format!("row mask of {} for batch {b}", include.len()));
    }
    noncorrespondence_inner(g, h, tau, Some(include))
}

/// Sum of `log(1 − softmax(z)[r, c])` over `entries`: through `log1p(−p)`
/// for small probabilities and through [`log_complement_softmax`] for the
/// rest.
fn sum_log_one_minus(g: &Graph, z: Var, entries: &[(usize, usize)]) -> Result<Option<Var>> {
    let probs = g.row_softmax(z)?;
    let p = g.value(probs);
    let cols = p.cols();
    let (small, large): (Vec<_>, Vec<_>) = entries.iter().partition(|&&(i, j)| p.get(i, j) < 0.5);
    let mut total = None;
    if !small.is_empty() {
        let idx = small.iter().map(|&(i, j)| (i * cols + j) as u32).collect();
        let off = g.gather(probs, std::sync::Arc::new(idx), [1, small.len()])?;
        total = Some(g.sum(g.log1p(g.neg(off)?)?)?);
    }
    if !large.is_empty() {
        let term = g.sum(log_complement_softmax(g, z, &large)?)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total)
}

fn noncorrespondence_inner(g: &Graph, h: Var, tau: f64, rows: Option<&[bool]>) -> Result<Var> {
    check_tau(tau)?;
    let b = check_square(g, h)?;
    let pairs = off_diagonal(b, rows);
    let z = g.scale(h, 1.0 / tau)?;
    // Column softmax at (i, j) is the row softmax of the transpose at (j, i).
    let swapped: Vec<(usize, usize)> = pairs.iter().map(|&(i, j)| (j, i)).collect();
    let mut total = None;
    for term in [
        sum_log_one_minus(g, z, &pairs)?,
        sum_log_one_minus(g, g.transpose(z)?, &swapped)?,
    ]
    .into_iter()
    .flatten()
    {
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    match total {
        Some(t) => Ok(g.neg(t)?),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}

/// Mean-absolute-error baseline `Σ_ij y_ij |1 − p_ij|` in both directions;
/// with one-hot labels this is `Σ_i |1 − p^{i2t}_ii| + |1 − p^{t2i}_ii|`.
pub fn loss_mae(g: &Graph, h: Var, labels: &Labels, tau: f64) -> Result<Var> {
    let b = check_square(g, h)?;
    check_label_sums(&g.value(labels.i2t), true, "i2t")?;
    check_label_sums(&g.value(labels.t2i), false, "t2i")?;
    let p = matching_probs(g, h, tau)?;
    let ones = g.constant(Tensor::ones([b, b])?);
    let mut total = None;
    for (probs, y) in [(p.i2t, labels.i2t), (p.t2i, labels.t2i)] {
        let gap = g.abs(g.sub(ones, probs)?)?;
        let term = g.sum(g.mul(y, gap)?)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("two directions"))
}

/// `w_c·L_c + w_n·L_n`.
pub fn loss_total(g: &Graph, h: Var, labels: &Labels, tau: f64, weights: LossWeights) -> Result<Var> {
    if weights.correspondence < 0.0 || weights.noncorrespondence < 0.0 {
        return contract("loss weights must be non-negative");
    }
    let lc = g.scale(loss_correspondence(g, h, labels, tau)?, weights.correspondence)?;
    let ln = g.scale(loss_noncorrespondence(g, h, tau)?, weights.noncorrespondence)?;
    Ok(g.add(lc, ln)?)
}
