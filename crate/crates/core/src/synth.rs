//! Synthetic lesion-like images and dataset manifests.
//!
//! Each image is a textured skin-tone background with one or more
//! irregular elliptical blobs. The blob color comes from the image's
//! class; everything else (position, size, outline, background) is drawn
//! per source, so two sources of the same class still look different.

use std::collections::HashSet;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Domain, Stream};
use crate::vgl::GroupId;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_sources: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Blob color per class; classes past the end get generated hues.
    pub palette: Vec<[u8; 3]>,
    /// Inclusive range of blobs per image.
    pub blob_count: [usize; 2],
    /// Peak amplitude of the background texture, in 8-bit levels.
    pub texture_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_sources: 200,
            num_classes: 3,
            image_size: 32,
            seed: 0,
            palette: vec![[92, 51, 33], [168, 48, 58], [70, 72, 110]],
            blob_count: [1, 3],
            texture_amplitude: 14.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be at least 1".into()));
        }
        if self.num_classes > self.num_sources {
            return Err(Error::InvalidConfig(format!(
                "num_classes ({}) exceeds num_sources ({})",
                self.num_classes, self.num_sources
            )));
        }
        if self.image_size < 4 {
            return Err(Error::InvalidConfig("image_size must be at least 4".into()));
        }
        if self.blob_count[0] == 0 || self.blob_count[0] > self.blob_count[1] {
            return Err(Error::InvalidConfig("blob_count must be [lo, hi] with 1 <= lo <= hi".into()));
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_amplitude.is_finite()) {
            return Err(Error::InvalidConfig("texture_amplitude must be >= 0".into()));
        }
        Ok(())
    }

    fn class_color(&self, class: usize) -> [f64; 3] {
        if let Some(c) = self.palette.get(class) {
            return c.map(f64::from);
        }
        // Golden-angle hues at moderate saturation and value.
        let h = (class as f64 * 0.381_966) % 1.0 * 6.0;
        let (s, v) = (0.6, 0.55);
        let f = h.fract();
        let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
        let rgb = match h as u32 {
            0 => [v, t, p],
            1 => [q, v, p],
            2 => [p, v, t],
            3 => [p, q, v],
            4 => [t, p, v],
            _ => [v, p, q],
        };
        rgb.map(|x| x * 255.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub class_id: u32,
    pub source_id: GroupId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub image_size: usize,
    pub num_classes: usize,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.check_ids()?;
        Ok(m)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.source_id) {
                return Err(Error::InvalidConfig(format!("duplicate source_id {}", e.source_id.0)));
            }
            if e.class_id as usize >= self.num_classes {
                return Err(Error::InvalidConfig(format!(
                    "class_id {} outside 0..{}",
                    e.class_id, self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for e in &self.entries {
            counts[e.class_id as usize] += 1;
        }
        counts
    }

    /// Loads every image, resolving relative paths against `base_dir`, and
    /// checks each against the declared size.
    pub fn load_images(&self, base_dir: &Path) -> Result<Vec<Image>> {
        self.entries
            .iter()
            .map(|e| {
                let path = base_dir.join(&e.path);
                let img = Image::read_ppm(&path)?;
                if img.width() != self.image_size || img.height() != self.image_size {
                    return Err(Error::MalformedImage {
                        path: Some(path),
                        reason: format!(
                            "{}x{} image in a {}x{} dataset",
                            img.width(),
                            img.height(),
                            self.image_size,
                            self.image_size
                        ),
                    });
                }
                Ok(img)
            })
            .collect()
    }
}

/// Reads a manifest file and its images.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<Image>)> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let images = manifest.load_images(base)?;
    Ok((manifest, images))
}

fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    /// `(amplitude, phase)` of boundary harmonics 2..=5.
    wobble: Vec<(f64, f64)>,
    color: [f64; 3],
}

impl Blob {
    /// Normalized radius: below 1 inside the blob.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let theta = v.atan2(u);
        let edge = 1.0
            + self
                .wobble
                .iter()
                .enumerate()
                .map(|(k, (a, p))| a * ((k as f64 + 2.0) * theta + p).sin())
                .sum::<f64>();
        (u * u + v * v).sqrt() / edge
    }
}

/// Renders source `index` of the dataset.
pub fn render_source(cfg: &SynthConfig, index: usize) -> Image {
    let mut rng = rng::stream(cfg.seed, Domain::Synth, index as u64, 0);
    let size = cfg.image_size as f64;
    let class = index % cfg.num_classes;

    let skin = [uniform(&mut rng, 200.0, 235.0), uniform(&mut rng, 150.0, 185.0), uniform(&mut rng, 120.0, 160.0)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = uniform(&mut rng, 0.5, 3.0) * TAU / size;
            let dir = uniform(&mut rng, 0.0, TAU);
            (freq * dir.cos(), freq * dir.sin(), uniform(&mut rng, 0.0, TAU), uniform(&mut rng, 0.3, 1.0))
        })
        .collect();
    let wave_norm: f64 = waves.iter().map(|w| w.3).sum();

    let count = rng.random_range(cfg.blob_count[0]..=cfg.blob_count[1]);
    let base = cfg.class_color(class);
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let shade = uniform(&mut rng, 0.85, 1.15);
            Blob {
                cx: uniform(&mut rng, 0.3, 0.7) * size,
                cy: uniform(&mut rng, 0.3, 0.7) * size,
                rx: uniform(&mut rng, 0.12, 0.3) * size,
                ry: uniform(&mut rng, 0.12, 0.3) * size,
                angle: uniform(&mut rng, 0.0, TAU),
                wobble: (0..4).map(|_| (uniform(&mut rng, 0.0, 0.12), uniform(&mut rng, 0.0, TAU))).collect(),
                color: base.map(|c| (c * shade + uniform(&mut rng, -12.0, 12.0)).clamp(0.0, 255.0)),
            }
        })
        .collect();

    let mut img = Image::filled(cfg.image_size, cfg.image_size, [0, 0, 0]);
    for y in 0..cfg.image_size {
        for x in 0..cfg.image_size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let tex = waves.iter().map(|(kx, ky, p, a)| a * (kx * fx + ky * fy + p).sin()).sum::<f64>() / wave_norm;
            let grain = uniform(&mut rng, -1.0, 1.0) * 0.3;
            let t = cfg.texture_amplitude * (tex + grain);
            let mut px = skin.map(|c| c + t);
            for blob in &blobs {
                let rho = blob.rho(fx, fy);
                // Soft edge over roughly one pixel, darker core.
                let alpha = ((1.0 - rho) * blob.rx.min(blob.ry)).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    let core = 0.75 + 0.25 * rho.min(1.0);
                    for c in 0..3 {
                        px[c] = (1.0 - alpha) * px[c] + alpha * (blob.color[c] * core + 0.3 * t);
                    }
                }
            }
            img.set(x, y, px.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    img
}

/// Renders `cfg.num_sources` images into `out_dir` and writes the manifest
/// next to them. Classes are assigned round-robin.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let width = cfg.num_sources.saturating_sub(1).to_string().len().max(4);
    let mut entries = Vec::with_capacity(cfg.num_sources);
    for i in 0..cfg.num_sources {
        let name = PathBuf::from(format!("img_{i:0width$}.ppm"));
        render_source(cfg, i).write_ppm(&out_dir.join(&name))?;
        entries.push(ManifestEntry { path: name, class_id: (i % cfg.num_classes) as u32, source_id: GroupId(i as u32) });
    }
    let manifest = DatasetManifest { entries, image_size: cfg.image_size, num_classes: cfg.num_classes };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// In-memory dataset: `(images, class labels)`.
pub fn synthetic_images(cfg: &SynthConfig) -> Result<(Vec<Image>, Vec<u32>)> {
    cfg.validate()?;
    let images = (0..cfg.num_sources).map(|i| render_source(cfg, i)).collect();
    let labels = (0..cfg.num_sources).map(|i| (i % cfg.num_classes) as u32).collect();
    Ok((images, labels))
}
