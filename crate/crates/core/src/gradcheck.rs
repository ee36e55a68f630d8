//! Central finite-difference checks for every analytic gradient.
//!
//! Relative error of one instance is `|a - n| / max(|a|, |n|, FLOOR)` over
//! the whole gradient vector `a` against the numeric estimate `n`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::baselines::{nce_batch, triplet_batch, NceConfig, TripletConfig};
use crate::encoder::{backward, forward_inputs, EncoderConfig, EncoderParams, Scalar};
use crate::error::Result;
use crate::rng::{self, Domain, Stream};
use crate::vgl::{l2_norm, similarity_matrix, vgl_batch, vgl_batch_with_grad, AnchorSims, EmbeddingBatch, GroupId, VglConfig};

/// Lower bound on the denominator of the relative error.
pub const FLOOR: f64 = 1e-10;

/// Tolerances for the similarity, embedding, baseline and end-to-end checks.
pub const TOL_SIMS: f64 = 1e-6;
pub const TOL_EMBEDDINGS: f64 = 1e-5;
pub const TOL_BASELINES: f64 = 1e-5;
pub const TOL_ENCODER_F32: f64 = 1e-3;
pub const TOL_ENCODER_F64: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, errors: &[f64], tolerance: f64) -> Self {
        let max_rel_err = errors.iter().copied().fold(0.0, f64::max);
        let passed = errors.iter().all(|e| e.is_finite()) && max_rel_err < tolerance;
        Self { name: name.to_string(), instances: errors.len(), max_rel_err, tolerance, passed }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: max rel err {:.3e} over {} instances (tol {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.instances,
            self.tolerance
        )
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    l2_norm(&diff) / l2_norm(analytic).max(l2_norm(numeric)).max(FLOOR)
}

fn central<F: Fn(f64) -> f64>(x: f64, h: f64, f: F) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `groups` groups of `views` views each; vectors scatter around a random
/// per-group center.
pub fn random_instance(rng: &mut Stream, groups: usize, views: usize, dim: usize) -> EmbeddingBatch {
    let mut vectors = Vec::with_capacity(groups * views);
    let mut ids = Vec::with_capacity(groups * views);
    for g in 0..groups {
        let center: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..views {
            vectors.push(center.iter().map(|c| c + 0.7 * rng.sample::<f64, _>(StandardNormal)).collect());
            ids.push(GroupId(g as u32));
        }
    }
    EmbeddingBatch::new(vectors, ids).expect("gaussian vectors have nonzero norm")
}

fn instance_config(i: usize) -> VglConfig {
    let taus = [0.1, 0.2, 0.5];
    VglConfig { tau: taus[i % 3], attention_enabled: i % 2 == 0, ..VglConfig::default() }
}

/// Similarity gradients of every anchor row.
pub fn check_vgl_sims(seed: u64, instances: usize) -> Result<CheckResult> {
    let h = 1e-6;
    let mut errors = Vec::with_capacity(instances);
    for i in 0..instances {
        let batch = random_instance(&mut rng::stream(seed, Domain::Test, 1, i as u64), 4, 3, 8);
        let cfg = instance_config(i);
        let sims = similarity_matrix(&batch);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for q in 0..batch.len() {
            let row = AnchorSims::from_matrix(q, &sims, batch.groups())?;
            let eval = row.evaluate(&cfg, true);
            analytic.extend(&eval.grad_positives);
            analytic.extend(&eval.grad_negatives);
            for k in 0..row.positives.len() {
                numeric.push(central(row.positives[k], h, |x| {
                    let mut r = row.clone();
                    r.positives[k] = x;
                    r.loss(&cfg)
                }));
            }
            for k in 0..row.negatives.len() {
                numeric.push(central(row.negatives[k], h, |x| {
                    let mut r = row.clone();
                    r.negatives[k] = x;
                    r.loss(&cfg)
                }));
            }
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(CheckResult::new("vgl dL/dc", &errors, TOL_SIMS))
}

/// Numeric gradient of `loss` with respect to every embedding coordinate.
fn numeric_embedding_grad<F>(batch: &EmbeddingBatch, h: f64, loss: F) -> Result<Vec<f64>>
where
    F: Fn(&EmbeddingBatch) -> Result<f64>,
{
    let mut out = Vec::with_capacity(batch.len() * batch.dim());
    for m in 0..batch.len() {
        for d in 0..batch.dim() {
            let at = |x: f64| -> Result<f64> {
                let mut vectors = batch.vectors().to_vec();
                vectors[m][d] = x;
                loss(&EmbeddingBatch::new(vectors, batch.groups().to_vec())?)
            };
            let x = batch.vectors()[m][d];
            out.push((at(x + h)? - at(x - h)?) / (2.0 * h));
        }
    }
    Ok(out)
}

fn check_embedding_loss<L, G>(name: &str, seed: u64, stream: u64, instances: usize, tol: f64, loss: L, grad: G) -> Result<CheckResult>
where
    L: Fn(&EmbeddingBatch, usize) -> Result<f64>,
    G: Fn(&EmbeddingBatch, usize) -> Result<Vec<Vec<f64>>>,
{
    let mut errors = Vec::with_capacity(instances);
    for i in 0..instances {
        let batch = random_instance(&mut rng::stream(seed, Domain::Test, stream, i as u64), 4, 3, 8);
        let analytic: Vec<f64> = grad(&batch, i)?.concat();
        let numeric = numeric_embedding_grad(&batch, 1e-6, |b| loss(b, i))?;
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(CheckResult::new(name, &errors, tol))
}

pub fn check_vgl_embeddings(seed: u64, instances: usize) -> Result<CheckResult> {
    check_embedding_loss(
        "vgl dL/dv",
        seed,
        2,
        instances,
        TOL_EMBEDDINGS,
        |b, i| Ok(vgl_batch(b, &instance_config(i))?.total),
        |b, i| Ok(vgl_batch_with_grad(b, &instance_config(i))?.grad_embeddings.expect("requested")),
    )
}

pub fn check_triplet(seed: u64, instances: usize) -> Result<CheckResult> {
    let cfg = TripletConfig::default();
    check_embedding_loss(
        "triplet dL/dv",
        seed,
        3,
        instances,
        TOL_BASELINES,
        |b, _| Ok(triplet_batch(b, &cfg)?.total),
        |b, _| Ok(triplet_batch(b, &cfg)?.grad_embeddings.expect("requested")),
    )
}

pub fn check_nce(seed: u64, instances: usize) -> Result<CheckResult> {
    let cfg = NceConfig::default();
    check_embedding_loss(
        "nce dL/dv",
        seed,
        4,
        instances,
        TOL_BASELINES,
        |b, _| Ok(nce_batch(b, &cfg)?.total),
        |b, _| Ok(nce_batch(b, &cfg)?.grad_embeddings.expect("requested")),
    )
}

/// Two conv stages on 8x8 inputs.
pub fn small_encoder_config() -> EncoderConfig {
    EncoderConfig { input_size: 8, conv_channels: vec![4, 6], hidden_dim: 12, embed_dim: 8, ..EncoderConfig::default() }
}

/// VGL loss of a batch of raw inputs through the encoder.
fn encoder_loss<T: Scalar>(params: &EncoderParams<T>, inputs: &[Vec<T>], groups: &[GroupId], cfg: &VglConfig) -> Result<f64> {
    let (emb, _) = forward_inputs(params, inputs.to_vec())?;
    Ok(vgl_batch(&EmbeddingBatch::new(emb, groups.to_vec())?, cfg)?.total)
}

/// Loss through the encoder against `probes` randomly chosen parameters per
/// instance. The analytic gradient runs in `T`; the numeric oracle always
/// runs in 64-bit on the same weights.
pub fn check_encoder<T: Scalar>(seed: u64, instances: usize, probes: usize, tol: f64) -> Result<CheckResult> {
    let cfg = VglConfig::default();
    let groups: Vec<GroupId> = (0..6).map(|k| GroupId(k / 2)).collect();
    let h = 1e-6;
    let mut errors = Vec::with_capacity(instances);
    for i in 0..instances {
        let mut rng = rng::stream(seed, Domain::Test, 5, i as u64);
        let params = EncoderParams::<T>::init(small_encoder_config(), rng.random())?;
        let size = 3 * 8 * 8;
        let inputs: Vec<Vec<T>> = (0..groups.len())
            .map(|_| (0..size).map(|_| T::of(rng.sample(StandardNormal))).collect())
            .collect();
        let inputs64: Vec<Vec<f64>> = inputs.iter().map(|v| v.iter().map(|x| x.as_f64()).collect()).collect();

        let (emb, cache) = forward_inputs(&params, inputs)?;
        let out = vgl_batch_with_grad(&EmbeddingBatch::new(emb, groups.clone())?, &cfg)?;
        let grads = backward(&params, &cache, out.grad_embeddings.as_ref().expect("requested"))?;

        let oracle: EncoderParams<f64> = params.cast();
        let mut analytic = Vec::with_capacity(probes);
        let mut numeric = Vec::with_capacity(probes);
        for _ in 0..probes {
            let t = rng.random_range(0..oracle.tensors().len());
            let idx = rng.random_range(0..oracle.tensors()[t].data.len());
            analytic.push(grads.tensors[t][idx].as_f64());
            let at = |delta: f64| -> Result<f64> {
                let mut p = oracle.clone();
                p.tensor_data_mut(t)[idx] += delta;
                encoder_loss(&p, &inputs64, &groups, &cfg)
            };
            numeric.push((at(h)? - at(-h)?) / (2.0 * h));
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    let bits = std::mem::size_of::<T>() * 8;
    Ok(CheckResult::new(&format!("encoder end-to-end ({bits}-bit)"), &errors, tol))
}

/// Every check at its pinned tolerance.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_vgl_sims(seed, 100)?,
        check_vgl_embeddings(seed, 100)?,
        check_triplet(seed, 100)?,
        check_nce(seed, 100)?,
        check_encoder::<f32>(seed, 20, 2, TOL_ENCODER_F32)?,
        check_encoder::<f64>(seed, 20, 2, TOL_ENCODER_F64)?,
    ])
}
