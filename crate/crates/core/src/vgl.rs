//! View grouping loss with hardness-aware attention.
//!
//! For an anchor `q` with positive set `P` (other views of the same group)
//! and negative set `M` (views of other groups), each positive `i` gets an
//! inner fraction
//!
//! ```text
//! f_i = 1 / (gamma_i * sum_{j in M} s(c_qj - c_qi) + 1)
//! gamma_i = 1 / sum_{k in P, k != i} s(c_qk - c_qi)
//! ```
//!
//! with `s` the tempered sigmoid, and the anchor loss is `1 - mean_i f_i`.
//! Everything is evaluated in the log domain (`r_i = gamma_i * A_i` is carried
//! as `ln r_i`) so saturated sigmoids never produce `0 * inf`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are rejected rather than nudged.
pub const MIN_NORM: f64 = 1e-12;

/// Identifies the source image (or patient) a view was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub u32);

/// Feature vectors tagged with the group they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Vec<Vec<f64>>,
    groups: Vec<GroupId>,
}

impl EmbeddingBatch {
    pub fn new(vectors: Vec<Vec<f64>>, groups: Vec<GroupId>) -> Result<Self> {
        if vectors.len() != groups.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} vectors but {} group labels",
                vectors.len(),
                groups.len()
            )));
        }
        if let Some(first) = vectors.first() {
            let dim = first.len();
            if let Some(bad) = vectors.iter().position(|v| v.len() != dim) {
                return Err(Error::ShapeMismatch(format!(
                    "vector {bad} has dimension {}, expected {dim}",
                    vectors[bad].len()
                )));
            }
        }
        for (index, v) in vectors.iter().enumerate() {
            let norm = l2_norm(v);
            if !(norm > MIN_NORM) {
                return Err(Error::ZeroNormVector { index, norm });
            }
        }
        Ok(Self { vectors, groups })
    }

    pub fn from_f32(vectors: &[Vec<f32>], groups: Vec<GroupId>) -> Result<Self> {
        let vectors = vectors
            .iter()
            .map(|v| v.iter().map(|&x| f64::from(x)).collect())
            .collect();
        Self::new(vectors, groups)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn groups(&self) -> &[GroupId] {
        &self.groups
    }

    /// Reorders views so that view `k` of the result is view `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            vectors: perm.iter().map(|&i| self.vectors[i].clone()).collect(),
            groups: perm.iter().map(|&i| self.groups[i]).collect(),
        }
    }
}

/// Pairwise cosine similarities, row-major and symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds a matrix from explicit rows, checking symmetry, the unit
    /// diagonal and the `[-1, 1]` range.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            entries.extend_from_slice(row);
        }
        let m = Self { n, entries };
        for i in 0..n {
            if (m.get(i, i) - 1.0).abs() > 1e-9 {
                return Err(Error::OutOfRange(format!("diagonal entry {i} is {}", m.get(i, i))));
            }
            for j in 0..n {
                let c = m.get(i, j);
                if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&c) {
                    return Err(Error::OutOfRange(format!("c[{i}][{j}] = {c}")));
                }
                if (c - m.get(j, i)).abs() > 1e-12 {
                    return Err(Error::OutOfRange(format!("c[{i}][{j}] != c[{j}][{i}]")));
                }
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VglConfig {
    pub tau: f64,
    pub attention_enabled: bool,
    /// Attention weight used when the anchor has exactly one positive and
    /// the attention denominator is an empty sum.
    pub singleton_gamma: f64,
}

impl Default for VglConfig {
    fn default() -> Self {
        Self { tau: 0.2, attention_enabled: true, singleton_gamma: 1.0 }
    }
}

impl VglConfig {
    pub fn new(tau: f64, attention_enabled: bool) -> Result<Self> {
        let cfg = Self { tau, attention_enabled, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidTemperature(self.tau));
        }
        if !(self.singleton_gamma > 0.0 && self.singleton_gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "singleton_gamma must be positive, got {}",
                self.singleton_gamma
            )));
        }
        Ok(())
    }
}

/// Result of evaluating a batch loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossOutput {
    pub total: f64,
    pub per_anchor: Vec<f64>,
    /// `grad_sims[q][k] = dL_q / dc_qk`, treating row `q` as the anchor's own
    /// copy of the similarities.
    pub grad_sims: Option<Vec<Vec<f64>>>,
    pub grad_embeddings: Option<Vec<Vec<f64>>>,
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!("lengths {} and {}", u.len(), v.len())));
    }
    let nu = l2_norm(u);
    if !(nu > MIN_NORM) {
        return Err(Error::ZeroNormVector { index: 0, norm: nu });
    }
    let nv = l2_norm(v);
    if !(nv > MIN_NORM) {
        return Err(Error::ZeroNormVector { index: 1, norm: nv });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// `1 / (1 + exp(-x / tau))`, branching on the sign of `x` so the
/// exponential never overflows.
pub fn tempered_sigmoid(x: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidTemperature(tau));
    }
    Ok(sigmoid(x / tau))
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln sigmoid(z)`, stable for any finite `z`.
#[inline]
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// `ln(1 + e^x)`.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn similarity_matrix(batch: &EmbeddingBatch) -> SimilarityMatrix {
    let n = batch.len();
    let units: Vec<Vec<f64>> = batch
        .vectors()
        .iter()
        .map(|v| {
            let norm = l2_norm(v);
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        entries[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let c: f64 = units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum();
            let c = c.clamp(-1.0, 1.0);
            entries[i * n + j] = c;
            entries[j * n + i] = c;
        }
    }
    SimilarityMatrix { n, entries }
}

/// One anchor's similarities to its positives and negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSims {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

/// Per-anchor loss and its gradient with respect to each similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorEval {
    pub loss: f64,
    pub grad_positives: Vec<f64>,
    pub grad_negatives: Vec<f64>,
    /// Attention weight applied to each positive.
    pub gammas: Vec<f64>,
    /// Inner fraction `f_i` of each positive.
    pub fractions: Vec<f64>,
}

impl AnchorSims {
    pub fn new(positives: Vec<f64>, negatives: Vec<f64>) -> Self {
        Self { positives, negatives }
    }

    /// Extracts anchor `q`'s row, splitting views by group equality.
    pub fn from_matrix(q: usize, sims: &SimilarityMatrix, groups: &[GroupId]) -> Result<Self> {
        if groups.len() != sims.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} group labels for a {}x{} similarity matrix",
                groups.len(),
                sims.len(),
                sims.len()
            )));
        }
        if q >= sims.len() {
            return Err(Error::OutOfRange(format!("anchor {q} in a batch of {}", sims.len())));
        }
        let (pos, neg) = partition(q, groups);
        let row = sims.row(q);
        Ok(Self {
            positives: pos.iter().map(|&k| row[k]).collect(),
            negatives: neg.iter().map(|&k| row[k]).collect(),
        })
    }

    /// `ln gamma_i` for positive `i`.
    fn log_gamma(&self, i: usize, cfg: &VglConfig) -> f64 {
        if !cfg.attention_enabled {
            return 0.0;
        }
        if self.positives.len() < 2 {
            return cfg.singleton_gamma.ln();
        }
        let si = self.positives[i];
        let tau = cfg.tau;
        let others = self
            .positives
            .iter()
            .enumerate()
            .filter(move |&(k, _)| k != i)
            .map(move |(_, &sk)| log_sigmoid((sk - si) / tau));
        -log_sum_exp(others)
    }

    fn log_negative_mass(&self, i: usize, cfg: &VglConfig) -> f64 {
        let si = self.positives[i];
        let tau = cfg.tau;
        log_sum_exp(self.negatives.iter().map(move |&sj| log_sigmoid((sj - si) / tau)))
    }

    pub fn gamma(&self, i: usize, cfg: &VglConfig) -> f64 {
        self.log_gamma(i, cfg).exp()
    }

    pub fn loss(&self, cfg: &VglConfig) -> f64 {
        self.evaluate(cfg, false).loss
    }

    /// Loss plus closed-form derivatives with respect to every similarity,
    /// including the path through the attention weights.
    pub fn evaluate(&self, cfg: &VglConfig, with_grad: bool) -> AnchorEval {
        let p = self.positives.len();
        let m = self.negatives.len();
        let tau = cfg.tau;
        let mut grad_pos = vec![0.0; if with_grad { p } else { 0 }];
        let mut grad_neg = vec![0.0; if with_grad { m } else { 0 }];
        let mut gammas = Vec::with_capacity(p);
        let mut fractions = Vec::with_capacity(p);
        let mut kept = 0.0;
        let gamma_depends_on_positives = cfg.attention_enabled && p >= 2;

        for i in 0..p {
            let si = self.positives[i];
            let log_gamma = self.log_gamma(i, cfg);
            let log_a = self.log_negative_mass(i, cfg);
            let log_r = log_a + log_gamma;
            // f = 1 / (1 + r); ln f = -softplus(ln r)
            let log_f = -softplus(log_r);
            let f = log_f.exp();
            kept += f;
            gammas.push(log_gamma.exp());
            fractions.push(f);

            if !with_grad || m == 0 {
                continue;
            }
            // dL/dr_i = f_i^2 / P; everything below is exp(log-terms) / tau.
            let log_scale = 2.0 * log_f - (p as f64).ln() - tau.ln();
            for (j, &sj) in self.negatives.iter().enumerate() {
                let x = (sj - si) / tau;
                let g = (log_scale + log_gamma + log_sigmoid(x) + log_sigmoid(-x)).exp();
                grad_neg[j] += g;
                grad_pos[i] -= g;
            }
            if gamma_depends_on_positives {
                for (k, &sk) in self.positives.iter().enumerate() {
                    if k == i {
                        continue;
                    }
                    let y = (sk - si) / tau;
                    let g = (log_scale + log_a + 2.0 * log_gamma + log_sigmoid(y) + log_sigmoid(-y))
                        .exp();
                    grad_pos[k] -= g;
                    grad_pos[i] += g;
                }
            }
        }

        let loss = if p == 0 { 0.0 } else { 1.0 - kept / p as f64 };
        AnchorEval { loss, grad_positives: grad_pos, grad_negatives: grad_neg, gammas, fractions }
    }
}

/// Splits the other views into (same group, different group), by index.
pub fn partition(q: usize, groups: &[GroupId]) -> (Vec<usize>, Vec<usize>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (k, g) in groups.iter().enumerate() {
        if k == q {
            continue;
        }
        if *g == groups[q] {
            pos.push(k);
        } else {
            neg.push(k);
        }
    }
    (pos, neg)
}

/// Attention weight of positive `i` for anchor `q`.
pub fn hardness_attention(
    q: usize,
    i: usize,
    sims: &SimilarityMatrix,
    groups: &[GroupId],
    cfg: &VglConfig,
) -> Result<f64> {
    cfg.validate()?;
    if i == q || i >= groups.len() || q >= groups.len() || groups[i] != groups[q] {
        return Err(Error::NotAPositivePair { anchor: q, candidate: i });
    }
    let (pos, _) = partition(q, groups);
    let slot = pos.iter().position(|&k| k == i).expect("i is a positive of q");
    let row = AnchorSims::from_matrix(q, sims, groups)?;
    Ok(row.gamma(slot, cfg))
}

fn checked_row(
    q: usize,
    sims: &SimilarityMatrix,
    groups: &[GroupId],
    cfg: &VglConfig,
) -> Result<AnchorSims> {
    cfg.validate()?;
    let row = AnchorSims::from_matrix(q, sims, groups)?;
    if row.positives.is_empty() {
        return Err(Error::EmptyPositiveSet { index: q });
    }
    Ok(row)
}

pub fn vgl_anchor(
    q: usize,
    sims: &SimilarityMatrix,
    groups: &[GroupId],
    cfg: &VglConfig,
) -> Result<f64> {
    Ok(checked_row(q, sims, groups, cfg)?.loss(cfg))
}

/// `dL_q / dc_qk` for every `k`; entry `q` is zero.
pub fn vgl_grad_sims(
    q: usize,
    sims: &SimilarityMatrix,
    groups: &[GroupId],
    cfg: &VglConfig,
) -> Result<Vec<f64>> {
    let row = checked_row(q, sims, groups, cfg)?;
    let eval = row.evaluate(cfg, true);
    let (pos, neg) = partition(q, groups);
    let mut grad = vec![0.0; sims.len()];
    for (k, g) in pos.iter().zip(&eval.grad_positives) {
        grad[*k] = *g;
    }
    for (k, g) in neg.iter().zip(&eval.grad_negatives) {
        grad[*k] = *g;
    }
    Ok(grad)
}

fn check_positives(groups: &[GroupId]) -> Result<()> {
    for q in 0..groups.len() {
        if !groups.iter().enumerate().any(|(k, g)| k != q && *g == groups[q]) {
            return Err(Error::EmptyPositiveSet { index: q });
        }
    }
    Ok(())
}

fn batch_eval(batch: &EmbeddingBatch, cfg: &VglConfig, with_grad: bool) -> Result<LossOutput> {
    cfg.validate()?;
    let groups = batch.groups();
    check_positives(groups)?;
    let sims = similarity_matrix(batch);
    let n = batch.len();

    let rows: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|q| {
            let row = AnchorSims::from_matrix(q, &sims, groups).expect("shapes checked");
            let eval = row.evaluate(cfg, with_grad);
            let mut grad = Vec::new();
            if with_grad {
                grad = vec![0.0; n];
                let (pos, neg) = partition(q, groups);
                for (k, g) in pos.iter().zip(&eval.grad_positives) {
                    grad[*k] = *g;
                }
                for (k, g) in neg.iter().zip(&eval.grad_negatives) {
                    grad[*k] = *g;
                }
            }
            (eval.loss, grad)
        })
        .collect();

    // Sequential reduction keeps the total independent of thread scheduling.
    let per_anchor: Vec<f64> = rows.iter().map(|(l, _)| *l).collect();
    let total = per_anchor.iter().sum();
    let mut out = LossOutput { total, per_anchor, ..LossOutput::default() };
    if with_grad {
        let grad_sims: Vec<Vec<f64>> = rows.into_iter().map(|(_, g)| g).collect();
        out.grad_embeddings = Some(embedding_grads(batch, &sims, &grad_sims));
        out.grad_sims = Some(grad_sims);
    }
    Ok(out)
}

/// Total loss over every view as anchor.
pub fn vgl_batch(batch: &EmbeddingBatch, cfg: &VglConfig) -> Result<LossOutput> {
    batch_eval(batch, cfg, false)
}

/// Like [`vgl_batch`] but also fills both gradient fields.
pub fn vgl_batch_with_grad(batch: &EmbeddingBatch, cfg: &VglConfig) -> Result<LossOutput> {
    batch_eval(batch, cfg, true)
}

pub fn vgl_grad_embeddings(batch: &EmbeddingBatch, cfg: &VglConfig) -> Result<Vec<Vec<f64>>> {
    Ok(batch_eval(batch, cfg, true)?.grad_embeddings.expect("requested gradients"))
}

/// Chains per-anchor similarity gradients through the cosine Jacobian.
///
/// `row_grads[q][k]` is the derivative of anchor `q`'s loss with respect to
/// its own copy of `c_qk`; since `c_qk = c_kq`, view `m` receives
/// `row_grads[m][k] + row_grads[k][m]` along `dc_mk / dv_m`.
pub fn embedding_grads(
    batch: &EmbeddingBatch,
    sims: &SimilarityMatrix,
    row_grads: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let n = batch.len();
    let dim = batch.dim();
    let norms: Vec<f64> = batch.vectors().iter().map(|v| l2_norm(v)).collect();
    (0..n)
        .into_par_iter()
        .map(|m| {
            let vm = &batch.vectors()[m];
            let mut grad = vec![0.0; dim];
            let mut self_coef = 0.0;
            for k in 0..n {
                if k == m {
                    continue;
                }
                let w = row_grads[m][k] + row_grads[k][m];
                if w == 0.0 {
                    continue;
                }
                // dc/dv_m = (v_k/|v_k| - c * v_m/|v_m|) / |v_m|
                let a = w / (norms[m] * norms[k]);
                for (g, x) in grad.iter_mut().zip(&batch.vectors()[k]) {
                    *g += a * x;
                }
                self_coef += w * sims.get(m, k);
            }
            let b = self_coef / (norms[m] * norms[m]);
            for (g, x) in grad.iter_mut().zip(vm) {
                *g -= b * x;
            }
            grad
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn groups(ids: &[u32]) -> Vec<GroupId> {
        ids.iter().copied().map(GroupId).collect()
    }

    /// Anchor at index 0 followed by the given positives then negatives.
    fn anchor_matrix(pos: &[f64], neg: &[f64]) -> (SimilarityMatrix, Vec<GroupId>) {
        let row: Vec<f64> = std::iter::once(1.0).chain(pos.iter().copied()).chain(neg.iter().copied()).collect();
        let n = row.len();
        // Entries off the anchor row are never read by the anchor loss.
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| match (i, j) {
                        (0, j) => row[j],
                        (i, 0) => row[i],
                        (i, j) if i == j => 1.0,
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();
        let mut ids = vec![0; 1 + pos.len()];
        ids.extend(std::iter::repeat_n(1, neg.len()));
        (SimilarityMatrix::from_rows(&rows).unwrap(), groups(&ids))
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let err = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::ZeroNormVector { index: 0, .. }));
        let err = cosine_similarity(&[1.0, 0.0], &[1e-13, 0.0]).unwrap_err();
        assert!(matches!(err, Error::ZeroNormVector { index: 1, .. }));
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(tempered_sigmoid(0.0, 0.2).unwrap(), 0.5);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((tempered_sigmoid(0.2, 0.2).unwrap() - expected).abs() < 1e-15);
        assert!((tempered_sigmoid(0.2, 0.2).unwrap() - 0.73106).abs() < 1e-5);
        assert!((tempered_sigmoid(10.0, 0.2).unwrap() - 1.0).abs() < 1e-15);
        assert!(tempered_sigmoid(-1000.0, 1e-3).unwrap() >= 0.0);
        assert!(tempered_sigmoid(1000.0, 1e-3).unwrap().is_finite());
        assert!(matches!(tempered_sigmoid(1.0, 0.0), Err(Error::InvalidTemperature(_))));
        assert!(matches!(tempered_sigmoid(1.0, -0.1), Err(Error::InvalidTemperature(_))));
    }

    #[test]
    fn similarity_matrix_examples() {
        let eye = EmbeddingBatch::new(
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            groups(&[0, 1, 2]),
        )
        .unwrap();
        let m = similarity_matrix(&eye);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        let dup = EmbeddingBatch::new(vec![vec![0.3, -0.4], vec![0.3, -0.4]], groups(&[0, 0])).unwrap();
        let m = similarity_matrix(&dup);
        for i in 0..2 {
            for j in 0..2 {
                assert!((m.get(i, j) - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn batch_rejects_zero_norm_with_index() {
        let err = EmbeddingBatch::new(vec![vec![1.0], vec![0.0]], groups(&[0, 0])).unwrap_err();
        assert!(matches!(err, Error::ZeroNormVector { index: 1, .. }));
    }

    #[test]
    fn attention_examples() {
        let cfg = VglConfig::default();
        // q=0, i=1 at 0.5, one other positive at 0.5
        let (m, g) = anchor_matrix(&[0.5, 0.5], &[0.1]);
        assert!((hardness_attention(0, 1, &m, &g, &cfg).unwrap() - 2.0).abs() < 1e-12);

        let (m, g) = anchor_matrix(&[0.5, 0.9, 0.1], &[0.0]);
        assert!((hardness_attention(0, 1, &m, &g, &cfg).unwrap() - 1.0).abs() < 1e-12);

        let (m, g) = anchor_matrix(&[0.9, 0.5, 0.1], &[0.0]);
        let s1 = 1.0 / (1.0 + 2f64.exp());
        let s2 = 1.0 / (1.0 + 4f64.exp());
        let gamma = hardness_attention(0, 1, &m, &g, &cfg).unwrap();
        assert!((gamma - 1.0 / (s1 + s2)).abs() < 1e-12);
        assert!((gamma - 7.289).abs() < 1e-3);
    }

    #[test]
    fn attention_singleton_and_errors() {
        let cfg = VglConfig { singleton_gamma: 1.0, ..VglConfig::default() };
        let (m, g) = anchor_matrix(&[0.3], &[0.1, 0.2]);
        assert_eq!(hardness_attention(0, 1, &m, &g, &cfg).unwrap(), 1.0);
        let cfg = VglConfig { singleton_gamma: 2.5, ..cfg };
        assert!((hardness_attention(0, 1, &m, &g, &cfg).unwrap() - 2.5).abs() < 1e-15);
        assert!(matches!(
            hardness_attention(0, 2, &m, &g, &cfg),
            Err(Error::NotAPositivePair { anchor: 0, candidate: 2 })
        ));
        assert!(matches!(
            hardness_attention(0, 0, &m, &g, &cfg),
            Err(Error::NotAPositivePair { .. })
        ));
    }

    #[test]
    fn anchor_without_negatives_is_zero() {
        let (m, g) = anchor_matrix(&[0.2, 0.7, 0.4], &[]);
        assert_eq!(vgl_anchor(0, &m, &g, &VglConfig::default()).unwrap(), 0.0);
        let grads = vgl_grad_sims(0, &m, &g, &VglConfig::default()).unwrap();
        assert!(grads.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn anchor_equal_similarity_closed_form() {
        let (m, g) = anchor_matrix(&[0.4, 0.4], &[0.4, 0.4]);
        let l = vgl_anchor(0, &m, &g, &VglConfig::default()).unwrap();
        assert!((l - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn anchor_worked_value() {
        let (m, g) = anchor_matrix(&[0.9, 0.5], &[0.1]);
        let cfg = VglConfig::default();
        let row = AnchorSims::from_matrix(0, &m, &g).unwrap();
        let eval = row.evaluate(&cfg, false);
        assert!((eval.gammas[0] - 8.38906).abs() < 1e-5);
        assert!((eval.gammas[1] - 1.13534).abs() < 1e-5);
        assert!((eval.fractions[0] - 0.86890).abs() < 1e-5);
        assert!((eval.fractions[1] - 0.88080).abs() < 1e-5);
        assert!((vgl_anchor(0, &m, &g, &cfg).unwrap() - 0.12515).abs() < 1e-4);
    }

    #[test]
    fn anchor_requires_positive() {
        let (m, g) = anchor_matrix(&[], &[0.1, 0.2]);
        assert!(matches!(
            vgl_anchor(0, &m, &g, &VglConfig::default()),
            Err(Error::EmptyPositiveSet { index: 0 })
        ));
    }

    #[test]
    fn batch_orthonormal_example() {
        let vectors = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let batch = EmbeddingBatch::new(vectors, groups(&[0, 0, 1, 1])).unwrap();
        let out = vgl_batch(&batch, &VglConfig::default()).unwrap();
        for l in &out.per_anchor {
            assert!((l - 0.5).abs() < 1e-12);
        }
        assert!((out.total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn batch_reports_offending_view() {
        let batch =
            EmbeddingBatch::new(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], groups(&[0, 0, 1]))
                .unwrap();
        assert!(matches!(
            vgl_batch(&batch, &VglConfig::default()),
            Err(Error::EmptyPositiveSet { index: 2 })
        ));
    }

    #[test]
    fn symmetric_negatives_get_equal_gradients() {
        let (m, g) = anchor_matrix(&[0.8, 0.6], &[0.3, 0.3]);
        let grad = vgl_grad_sims(0, &m, &g, &VglConfig::default()).unwrap();
        assert_eq!(grad[3], grad[4]);
        assert!(grad[3] > 0.0);
    }

    #[test]
    fn saturated_positive_has_vanishing_gradient() {
        // The positive at 5.0 sits far above everything else at tau = 0.2.
        // Cosine rows cap the gap at 2, so this uses the unbounded row form.
        let row = AnchorSims::new(vec![5.0, -5.0], vec![-4.0, -5.0]);
        for attention_enabled in [false, true] {
            let cfg = VglConfig { attention_enabled, ..VglConfig::default() };
            let eval = row.evaluate(&cfg, true);
            assert!(eval.grad_positives[0].abs() < 1e-8, "{attention_enabled}: {}", eval.grad_positives[0]);
        }

        // At the cosine bound the gradient is small but not below 1e-8.
        let cfg = VglConfig { attention_enabled: false, ..VglConfig::default() };
        let (m, g) = anchor_matrix(&[0.99, -0.99], &[-0.99, -0.99]);
        let grad = vgl_grad_sims(0, &m, &g, &cfg).unwrap();
        assert!(grad[1].abs() < 1e-3);
    }

    #[test]
    fn extreme_temperatures_stay_finite() {
        let cfg = VglConfig { tau: 1e-4, ..VglConfig::default() };
        let row = AnchorSims::new(vec![1.0, 0.99, -1.0], vec![-1.0, 1.0]);
        let eval = row.evaluate(&cfg, true);
        assert!(eval.loss.is_finite());
        assert!((0.0..1.0).contains(&eval.loss));
        assert!(eval.grad_positives.iter().chain(&eval.grad_negatives).all(|g| g.is_finite()));
    }

    #[test]
    fn duplicate_views_get_identical_gradients() {
        let v = vec![0.3, -0.2, 0.9];
        let batch = EmbeddingBatch::new(
            vec![v.clone(), v.clone(), vec![0.1, 0.8, 0.1], vec![0.5, 0.5, -0.4]],
            groups(&[0, 0, 1, 1]),
        )
        .unwrap();
        let grads = vgl_grad_embeddings(&batch, &VglConfig::default()).unwrap();
        for (a, b) in grads[0].iter().zip(&grads[1]) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
