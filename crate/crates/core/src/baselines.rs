//! Reference losses: the triplet loss and a single-positive softmax
//! contrastive (NCE) loss.
//!
//! Both use one designated positive per anchor, the first other view of the
//! same group by ascending index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vgl::{
    cosine_similarity, embedding_grads, l2_norm, partition, similarity_matrix, EmbeddingBatch,
    GroupId, LossOutput, SimilarityMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Euclidean,
    #[default]
    OneMinusCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletConfig {
    pub margin: f64,
    pub distance: Distance,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { margin: 0.5, distance: Distance::OneMinusCosine }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidConfig(format!("triplet margin {} must be >= 0", self.margin)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NceConfig {
    pub temperature: f64,
}

impl Default for NceConfig {
    fn default() -> Self {
        Self { temperature: 0.2 }
    }
}

impl NceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidTemperature(self.temperature));
        }
        Ok(())
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn distance(a: &[f64], b: &[f64], kind: Distance) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("lengths {} and {}", a.len(), b.len())));
    }
    match kind {
        Distance::Euclidean => Ok(euclidean(a, b)),
        Distance::OneMinusCosine => Ok(1.0 - cosine_similarity(a, b)?),
    }
}

/// `max(0, m + d(q, ps) - d(q, ns))`.
pub fn triplet_loss(q: &[f64], ps: &[f64], ns: &[f64], cfg: &TripletConfig) -> Result<f64> {
    cfg.validate()?;
    let dp = distance(q, ps, cfg.distance)?;
    let dn = distance(q, ns, cfg.distance)?;
    Ok(triplet_from_distances(dp, dn, cfg.margin))
}

pub fn triplet_from_distances(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (margin + d_pos - d_neg).max(0.0)
}

fn designated_positive(q: usize, groups: &[GroupId]) -> Result<(usize, Vec<usize>)> {
    let (pos, neg) = partition(q, groups);
    let p = *pos.first().ok_or(Error::EmptyPositiveSet { index: q })?;
    if neg.is_empty() {
        return Err(Error::EmptyNegativeSet { index: q });
    }
    Ok((p, neg))
}

/// Softmax cross-entropy of the designated positive against all negatives.
pub fn nce_loss(
    q: usize,
    sims: &SimilarityMatrix,
    groups: &[GroupId],
    cfg: &NceConfig,
) -> Result<f64> {
    cfg.validate()?;
    if groups.len() != sims.len() || q >= groups.len() {
        return Err(Error::ShapeMismatch(format!(
            "anchor {q}, {} groups, {} similarity rows",
            groups.len(),
            sims.len()
        )));
    }
    let (p, neg) = designated_positive(q, groups)?;
    Ok(nce_row(q, p, &neg, sims, cfg.temperature).0)
}

/// Loss and `dL/dc_qk` (indexed by view) for one anchor.
fn nce_row(q: usize, p: usize, neg: &[usize], sims: &SimilarityMatrix, t: f64) -> (f64, Vec<(usize, f64)>) {
    let logits: Vec<(usize, f64)> =
        std::iter::once(p).chain(neg.iter().copied()).map(|k| (k, sims.get(q, k) / t)).collect();
    let max = logits.iter().map(|(_, z)| *z).fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|(_, z)| (z - max).exp()).sum();
    let log_denom = max + denom.ln();
    let loss = log_denom - logits[0].1;
    let grads = logits
        .iter()
        .enumerate()
        .map(|(slot, &(k, z))| {
            let prob = (z - log_denom).exp();
            let target = if slot == 0 { 1.0 } else { 0.0 };
            (k, (prob - target) / t)
        })
        .collect();
    (loss.max(0.0), grads)
}

pub fn nce_batch(batch: &EmbeddingBatch, cfg: &NceConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let groups = batch.groups();
    let n = batch.len();
    let sims = similarity_matrix(batch);
    let mut per_anchor = Vec::with_capacity(n);
    let mut row_grads = vec![vec![0.0; n]; n];
    for q in 0..n {
        let (p, neg) = designated_positive(q, groups)?;
        let (loss, grads) = nce_row(q, p, &neg, &sims, cfg.temperature);
        per_anchor.push(loss);
        for (k, g) in grads {
            row_grads[q][k] = g;
        }
    }
    let total = per_anchor.iter().sum();
    let grad_embeddings = embedding_grads(batch, &sims, &row_grads);
    Ok(LossOutput {
        total,
        per_anchor,
        grad_sims: Some(row_grads),
        grad_embeddings: Some(grad_embeddings),
    })
}

/// Triplet loss averaged over all negatives of each anchor, summed over
/// anchors.
pub fn triplet_batch(batch: &EmbeddingBatch, cfg: &TripletConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let groups = batch.groups();
    let n = batch.len();
    let vectors = batch.vectors();
    let mut per_anchor = Vec::with_capacity(n);

    match cfg.distance {
        Distance::OneMinusCosine => {
            let sims = similarity_matrix(batch);
            let mut row_grads = vec![vec![0.0; n]; n];
            for q in 0..n {
                let (p, neg) = designated_positive(q, groups)?;
                let d_pos = 1.0 - sims.get(q, p);
                let scale = 1.0 / neg.len() as f64;
                let mut loss = 0.0;
                for &j in &neg {
                    let term = triplet_from_distances(d_pos, 1.0 - sims.get(q, j), cfg.margin);
                    loss += term * scale;
                    if term > 0.0 {
                        // d(1 - c)/dc = -1
                        row_grads[q][p] -= scale;
                        row_grads[q][j] += scale;
                    }
                }
                per_anchor.push(loss);
            }
            let grad_embeddings = embedding_grads(batch, &sims, &row_grads);
            let total = per_anchor.iter().sum();
            Ok(LossOutput {
                total,
                per_anchor,
                grad_sims: Some(row_grads),
                grad_embeddings: Some(grad_embeddings),
            })
        }
        Distance::Euclidean => {
            let dim = batch.dim();
            let mut grads = vec![vec![0.0; dim]; n];
            // Gradient of |a - b| w.r.t. a; zero at coincidence.
            let unit_diff = |a: &[f64], b: &[f64]| -> Vec<f64> {
                let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                let norm = l2_norm(&diff);
                if norm == 0.0 {
                    vec![0.0; diff.len()]
                } else {
                    diff.into_iter().map(|x| x / norm).collect()
                }
            };
            for q in 0..n {
                let (p, neg) = designated_positive(q, groups)?;
                let d_pos = euclidean(&vectors[q], &vectors[p]);
                let u_pos = unit_diff(&vectors[q], &vectors[p]);
                let scale = 1.0 / neg.len() as f64;
                let mut loss = 0.0;
                for &j in &neg {
                    let d_neg = euclidean(&vectors[q], &vectors[j]);
                    let term = triplet_from_distances(d_pos, d_neg, cfg.margin);
                    loss += term * scale;
                    if term > 0.0 {
                        let u_neg = unit_diff(&vectors[q], &vectors[j]);
                        for d in 0..dim {
                            grads[q][d] += scale * (u_pos[d] - u_neg[d]);
                            grads[p][d] -= scale * u_pos[d];
                            grads[j][d] += scale * u_neg[d];
                        }
                    }
                }
                per_anchor.push(loss);
            }
            let total = per_anchor.iter().sum();
            Ok(LossOutput { total, per_anchor, grad_sims: None, grad_embeddings: Some(grads) })
        }
    }
}
