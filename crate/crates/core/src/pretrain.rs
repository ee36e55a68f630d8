//! End-to-end pretraining: sample sources, augment each N times, embed,
//! apply the loss, backpropagate and update.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{build_enlarged_batch, shuffle_batch, AugmentationSpec, EnlargedBatch};
use crate::baselines::{nce_batch, triplet_batch, NceConfig, TripletConfig};
use crate::checkpoint::Checkpoint;
use crate::encoder::{backward, forward, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{cosine_lr, sgd_momentum_step, OptimizerState};
use crate::rng::{self, Domain};
use crate::synth::load_dataset;
use crate::vgl::{vgl_batch_with_grad, EmbeddingBatch, LossOutput, VglConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Vgl,
    Triplet,
    Nce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub manifest: Option<PathBuf>,
    pub batch_size: usize,
    pub n_aug: usize,
    /// Temperature of the VGL sigmoid, and of the softmax for `nce`.
    pub tau: f64,
    pub attention_enabled: bool,
    pub loss: LossKind,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub seed: u64,
    pub augmentation: AugmentationSpec,
    pub encoder: EncoderConfig,
    pub triplet: TripletConfig,
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    /// When false the `seconds` column is written as 0 so metrics files are
    /// reproducible byte for byte.
    pub record_wall_clock: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            batch_size: 32,
            n_aug: 20,
            tau: 0.2,
            attention_enabled: true,
            loss: LossKind::Vgl,
            epochs: 240,
            base_lr: 1e-3,
            lr_min: 0.0,
            momentum: 0.9,
            seed: 0,
            augmentation: AugmentationSpec::default(),
            encoder: EncoderConfig::default(),
            triplet: TripletConfig::default(),
            checkpoint_path: None,
            metrics_path: None,
            record_wall_clock: true,
        }
    }
}

impl PretrainConfig {
    /// Small-batch preset that trains on one CPU in minutes.
    pub fn desk() -> Self {
        Self { batch_size: 8, n_aug: 6, epochs: 50, base_lr: DESK_BASE_LR, ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.n_aug == 1 {
            return Err(Error::InvalidN(1));
        }
        self.vgl_config().validate()?;
        self.triplet.validate()?;
        self.augmentation.validate()?;
        self.encoder.validate()?;
        if self.augmentation.output_size != self.encoder.input_size {
            return Err(Error::InvalidConfig(format!(
                "augmentation output {} does not match encoder input {}",
                self.augmentation.output_size, self.encoder.input_size
            )));
        }
        Ok(())
    }

    pub fn vgl_config(&self) -> VglConfig {
        VglConfig { tau: self.tau, attention_enabled: self.attention_enabled, ..VglConfig::default() }
    }
}

/// Learning rate of the desk preset. Rates of 0.01 and above degrade the
/// random-init features before they improve them on the synthetic set.
pub const DESK_BASE_LR: f64 = 0.002;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub rows: Vec<EpochMetrics>,
}

pub const METRICS_HEADER: &str = "epoch,loss,lr,seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.loss, self.lr, self.seconds)
    }
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: RunMetrics,
}

/// Evaluates the configured loss with embedding gradients.
pub fn batch_loss(cfg: &PretrainConfig, batch: &EmbeddingBatch) -> Result<LossOutput> {
    match cfg.loss {
        LossKind::Vgl => vgl_batch_with_grad(batch, &cfg.vgl_config()),
        LossKind::Triplet => triplet_batch(batch, &cfg.triplet),
        LossKind::Nce => nce_batch(batch, &NceConfig { temperature: cfg.tau }),
    }
}

/// Every anchor must see exactly N-1 positives (1 when N = 0).
fn check_group_integrity(batch: &EnlargedBatch, n_aug: usize) {
    let expected = if n_aug == 0 { 2 } else { n_aug };
    for (group, count) in batch.group_counts() {
        debug_assert_eq!(count, expected, "group {} has {count} views after shuffling", group.0);
    }
}

struct MetricsSink {
    writer: Option<BufWriter<File>>,
    path: PathBuf,
}

impl MetricsSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self { writer: None, path: PathBuf::new() });
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut sink = Self { writer: Some(BufWriter::new(file)), path: path.to_path_buf() };
        sink.line(METRICS_HEADER)?;
        Ok(sink)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        if let Some(w) = &mut self.writer {
            writeln!(w, "{text}").and_then(|_| w.flush()).map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Loads the manifest named in `cfg` and trains on its images.
pub fn pretrain_run(cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    let manifest = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("pretrain needs a dataset manifest path".into()))?;
    let (_, images) = load_dataset(manifest)?;
    pretrain_on_images(cfg, &images)
}

/// Trains on in-memory sources. Writes the checkpoint and metrics files
/// named in `cfg`, if any.
pub fn pretrain_on_images(cfg: &PretrainConfig, sources: &[Image]) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if sources.len() < cfg.batch_size {
        return Err(Error::DatasetTooSmall { available: sources.len(), required: cfg.batch_size });
    }
    let mut params = EncoderParams::<f32>::init(cfg.encoder.clone(), rng::mix(cfg.seed, Domain::Init as u64))?;
    let mut state = OptimizerState::new(&params, cfg.momentum, cfg.base_lr, cfg.lr_min, cfg.epochs.max(1))?;
    let mut sink = MetricsSink::open(cfg.metrics_path.as_deref())?;
    let mut metrics = RunMetrics::default();
    let steps = sources.len() / cfg.batch_size;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, &state)?;
        let mut order: Vec<usize> = (0..sources.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, Domain::EpochOrder, epoch as u64, 0));
        let mut loss_sum = 0.0;

        for step in 0..steps {
            let chunk: Vec<Image> =
                order[step * cfg.batch_size..(step + 1) * cfg.batch_size].iter().map(|&i| sources[i].clone()).collect();
            let master = rng::mix(cfg.seed, rng::mix(epoch as u64, step as u64));
            let batch = build_enlarged_batch(&chunk, cfg.n_aug, &cfg.augmentation, master)?;
            let batch = shuffle_batch(&batch, &mut rng::stream(cfg.seed, Domain::Shuffle, epoch as u64, step as u64));
            check_group_integrity(&batch, cfg.n_aug);

            let (embeddings, cache) = forward(&params, &batch.views)?;
            let emb = EmbeddingBatch::new(embeddings, batch.groups.clone())?;
            let out = batch_loss(cfg, &emb)?;
            let grads = out.grad_embeddings.as_ref().expect("training losses return embedding gradients");
            if !out.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            let param_grads = backward(&params, &cache, grads)?;
            sgd_momentum_step(&mut params, &param_grads, &mut state, lr)?;
            if !params.all_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            loss_sum += out.total;
        }

        let seconds = if cfg.record_wall_clock { started.elapsed().as_secs_f64() } else { 0.0 };
        let row = EpochMetrics { epoch, loss: loss_sum / steps as f64, lr, seconds };
        sink.line(&row.csv_row())?;
        metrics.rows.push(row);
    }

    let checkpoint = Checkpoint { params, state };
    if let Some(path) = &cfg.checkpoint_path {
        std::fs::write(path, checkpoint.encode()).map_err(|e| Error::io(path, e))?;
    }
    Ok(PretrainOutcome { checkpoint, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthetic_images, SynthConfig};

    fn tiny_cfg() -> PretrainConfig {
        PretrainConfig {
            batch_size: 2,
            n_aug: 2,
            epochs: 2,
            base_lr: 0.01,
            augmentation: AugmentationSpec { output_size: 16, ..AugmentationSpec::default() },
            encoder: EncoderConfig {
                input_size: 16,
                conv_channels: vec![4, 8],
                hidden_dim: 16,
                embed_dim: 8,
                ..EncoderConfig::default()
            },
            record_wall_clock: false,
            ..PretrainConfig::default()
        }
    }

    fn sources(n: usize) -> Vec<Image> {
        let cfg = SynthConfig { num_sources: n, num_classes: 1, image_size: 16, ..SynthConfig::default() };
        synthetic_images(&cfg).unwrap().0
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(PretrainConfig::from_json(r#"{"batch_size": 4, "bogus": 1}"#).is_err());
        let cfg = PretrainConfig::from_json(r#"{"batch_size": 4, "n_aug": 0}"#).unwrap();
        assert_eq!((cfg.batch_size, cfg.n_aug, cfg.epochs), (4, 0, 240));
        assert_eq!(PretrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn too_few_sources() {
        let cfg = tiny_cfg();
        let err = pretrain_on_images(&cfg, &sources(1)).unwrap_err();
        assert!(matches!(err, Error::DatasetTooSmall { available: 1, required: 2 }));
    }

    #[test]
    fn n_one_is_rejected() {
        let cfg = PretrainConfig { n_aug: 1, ..tiny_cfg() };
        assert!(matches!(pretrain_on_images(&cfg, &sources(4)), Err(Error::InvalidN(1))));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = PretrainConfig { epochs: 0, ..tiny_cfg() };
        let out = pretrain_on_images(&cfg, &sources(4)).unwrap();
        assert!(out.metrics.rows.is_empty());
        let init = EncoderParams::<f32>::init(cfg.encoder.clone(), rng::mix(cfg.seed, Domain::Init as u64)).unwrap();
        assert_eq!(out.checkpoint.params, init);
    }

    #[test]
    fn every_loss_trains_and_reports_metrics() {
        for loss in [LossKind::Vgl, LossKind::Triplet, LossKind::Nce] {
            let cfg = PretrainConfig { loss, ..tiny_cfg() };
            let out = pretrain_on_images(&cfg, &sources(5)).unwrap();
            assert_eq!(out.metrics.rows.len(), 2);
            assert!(out.metrics.rows.iter().all(|r| r.loss.is_finite() && r.seconds == 0.0));
            assert!(out.metrics.to_csv().starts_with("epoch,loss,lr,seconds\n0,"));
        }
    }
}
