//! Frozen-embedding evaluation: view retrieval and linear probing.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{build_enlarged_batch, AugmentationSpec};
use crate::encoder::{forward, EncoderParams, Scalar};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::vgl::{l2_norm, similarity_matrix, EmbeddingBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k: usize,
    pub precision_at_k: f64,
    pub chance_level: f64,
    pub num_queries: usize,
}

/// Every view queries the rest of the batch; neighbors are ranked by cosine
/// similarity with ties going to the lower index.
pub fn knn_view_retrieval(batch: &EmbeddingBatch, k: usize) -> Result<RetrievalReport> {
    let n = batch.len();
    let groups = batch.groups();
    let sizes: Vec<usize> = groups.iter().map(|g| groups.iter().filter(|h| *h == g).count()).collect();
    if let Some(index) = sizes.iter().position(|&s| s < 2) {
        return Err(Error::EmptyPositiveSet { index });
    }
    if k == 0 {
        return Err(Error::OutOfRange("k must be at least 1".into()));
    }
    if k > n - 1 {
        return Err(Error::KTooLarge { k, available: n - 1 });
    }
    let sims = similarity_matrix(batch);
    let hits: Vec<usize> = (0..n)
        .into_par_iter()
        .map(|q| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != q).collect();
            others.sort_by(|&a, &b| sims.get(q, b).total_cmp(&sims.get(q, a)).then(a.cmp(&b)));
            others[..k].iter().filter(|&&j| groups[j] == groups[q]).count()
        })
        .collect();
    let precision = hits.iter().sum::<usize>() as f64 / (n * k) as f64;
    let chance = sizes.iter().map(|&s| (s - 1) as f64).sum::<f64>() / (n * (n - 1)) as f64;
    Ok(RetrievalReport { k, precision_at_k: precision, chance_level: chance, num_queries: n })
}

/// Embeds images in fixed-size chunks to bound activation memory.
pub fn embed_images<T: Scalar>(params: &EncoderParams<T>, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(256) {
        out.extend(forward(params, chunk)?.0);
    }
    Ok(out)
}

/// Augments each source `n_views` times and measures how often a view's
/// nearest neighbors are views of the same source.
pub fn augmented_view_retrieval<T: Scalar>(
    params: &EncoderParams<T>,
    sources: &[Image],
    n_views: usize,
    spec: &AugmentationSpec,
    seed: u64,
    k: usize,
) -> Result<RetrievalReport> {
    let batch = build_enlarged_batch(sources, n_views, spec, seed)?;
    let emb = embed_images(params, &batch.views)?;
    knn_view_retrieval(&EmbeddingBatch::new(emb, batch.groups)?, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub steps: usize,
    pub lr: f64,
}

fn unit_features(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|v| {
            let n = l2_norm(v).max(1e-12);
            v.iter().map(|a| a / n).collect()
        })
        .collect()
}

/// Softmax regression on L2-normalized embeddings, trained by full-batch
/// gradient descent from zero weights; returns test accuracy.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[u32],
    test_x: &[Vec<f64>],
    test_y: &[u32],
    steps: usize,
    lr: f64,
) -> Result<ProbeReport> {
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::ShapeMismatch("features and labels differ in length".into()));
    }
    if train_x.is_empty() || test_x.is_empty() {
        return Err(Error::ShapeMismatch("probe needs non-empty train and test sets".into()));
    }
    let classes: BTreeSet<u32> = train_y.iter().copied().collect();
    let test_classes: BTreeSet<u32> = test_y.iter().copied().collect();
    if classes != test_classes {
        return Err(Error::LabelMismatch(format!("train labels {classes:?}, test labels {test_classes:?}")));
    }
    let dim = train_x[0].len();
    if train_x.iter().chain(test_x).any(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch("embeddings differ in dimension".into()));
    }
    let classes: Vec<u32> = classes.into_iter().collect();
    let index = |y: u32| classes.binary_search(&y).expect("label in class set");
    let c = classes.len();
    let xs = unit_features(train_x);
    let ys: Vec<usize> = train_y.iter().map(|&y| index(y)).collect();

    // Row r of `w` holds class r's weights followed by its bias.
    let mut w = vec![vec![0.0; dim + 1]; c];
    let logits = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter().map(|row| row[dim] + row[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect()
    };
    for _ in 0..steps {
        let mut grad = vec![vec![0.0; dim + 1]; c];
        for (x, &y) in xs.iter().zip(&ys) {
            let z = logits(&w, x);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for (r, g) in grad.iter_mut().enumerate() {
                let d = e[r] / s - if r == y { 1.0 } else { 0.0 };
                for (gi, xi) in g[..dim].iter_mut().zip(x) {
                    *gi += d * xi;
                }
                g[dim] += d;
            }
        }
        let scale = lr / xs.len() as f64;
        for (row, g) in w.iter_mut().zip(&grad) {
            for (a, b) in row.iter_mut().zip(g) {
                *a -= scale * b;
            }
        }
    }

    let correct = unit_features(test_x)
        .iter()
        .zip(test_y)
        .filter(|(x, &y)| {
            let z = logits(&w, x);
            // First maximum wins, so an untrained probe predicts class 0.
            let pred = z.iter().enumerate().fold(0, |best, (i, v)| if *v > z[best] { i } else { best });
            pred == index(y)
        })
        .count();
    Ok(ProbeReport {
        accuracy: correct as f64 / test_x.len() as f64,
        num_classes: c,
        train_size: train_x.len(),
        test_size: test_x.len(),
        steps,
        lr,
    })
}
