//! Stochastic view generation and enlarged-batch construction.
//!
//! Each view draws from its own counter-based stream addressed by
//! `(master_seed, source_index, view_index)`, so a batch is a pure function
//! of its inputs regardless of how views are scheduled across threads.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{FloatImage, Image};
use crate::rng::{self, Domain, Stream};
use crate::vgl::GroupId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    /// Crop area as a fraction of the source area.
    pub crop_scale_range: [f64; 2],
    pub flip_probability: f64,
    pub rotation_max_degrees: f64,
    /// Maximum fractional change of brightness, contrast and saturation.
    pub color_jitter_strength: f64,
    pub blur_probability: f64,
    pub blur_sigma_range: [f64; 2],
    pub output_size: usize,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            crop_scale_range: [0.3, 1.0],
            flip_probability: 0.5,
            rotation_max_degrees: 45.0,
            color_jitter_strength: 0.4,
            blur_probability: 0.5,
            blur_sigma_range: [0.1, 2.0],
            output_size: 32,
        }
    }
}

impl AugmentationSpec {
    /// A spec that only resizes.
    pub fn identity(output_size: usize) -> Self {
        Self {
            crop_scale_range: [1.0, 1.0],
            flip_probability: 0.0,
            rotation_max_degrees: 0.0,
            color_jitter_strength: 0.0,
            blur_probability: 0.0,
            blur_sigma_range: [1.0, 1.0],
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let [lo, hi] = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop_scale_range {:?} must satisfy 0 < lo <= hi <= 1", self.crop_scale_range));
        }
        for (name, p) in [("flip_probability", self.flip_probability), ("blur_probability", self.blur_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.rotation_max_degrees >= 0.0 && self.rotation_max_degrees.is_finite()) {
            return bad(format!("rotation_max_degrees {} must be >= 0", self.rotation_max_degrees));
        }
        if !(self.color_jitter_strength >= 0.0 && self.color_jitter_strength.is_finite()) {
            return bad(format!("color_jitter_strength {} must be >= 0", self.color_jitter_strength));
        }
        let [slo, shi] = self.blur_sigma_range;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return bad(format!("blur_sigma_range {:?} must satisfy 0 < lo <= hi", self.blur_sigma_range));
        }
        if self.output_size == 0 {
            return bad("output_size must be positive".into());
        }
        Ok(())
    }
}

/// Parameters actually sampled for one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ViewRecord {
    pub source_index: usize,
    pub view_index: usize,
    /// Crop window `[x, y, width, height]` in source pixels.
    pub crop: [usize; 4],
    pub flipped: bool,
    pub rotation_degrees: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnlargedBatch {
    pub views: Vec<Image>,
    pub groups: Vec<GroupId>,
    pub provenance: Vec<ViewRecord>,
}

impl EnlargedBatch {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// View `k` of the result is view `perm[k]` of `self`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if perm.len() != self.len() {
            return Err(Error::ShapeMismatch(format!("permutation of length {} for {} views", perm.len(), self.len())));
        }
        for &i in perm {
            if i >= self.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::ShapeMismatch("not a permutation".into()));
            }
        }
        Ok(Self {
            views: perm.iter().map(|&i| self.views[i].clone()).collect(),
            groups: perm.iter().map(|&i| self.groups[i]).collect(),
            provenance: perm.iter().map(|&i| self.provenance[i].clone()).collect(),
        })
    }

    /// Multiplicity of every group id, sorted by id.
    pub fn group_counts(&self) -> Vec<(GroupId, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for g in &self.groups {
            *counts.entry(*g).or_insert(0usize) += 1;
        }
        counts.into_iter().collect()
    }
}

/// Reflects `x` into `[0, n - 1]` (mirror without edge repeat).
fn reflect(x: f32, n: usize) -> f32 {
    if n == 1 {
        return 0.0;
    }
    let max = (n - 1) as f32;
    let period = 2.0 * max;
    let mut r = x.abs() % period;
    if r > max {
        r = period - r;
    }
    r
}

fn reflect_index(i: isize, n: usize) -> usize {
    reflect(i as f32, n) as usize
}

fn bilinear(img: &FloatImage, x: f32, y: f32) -> [f32; 3] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = img.at(x0, y0, c) * (1.0 - fx) + img.at(x1, y0, c) * fx;
        let bottom = img.at(x0, y1, c) * (1.0 - fx) + img.at(x1, y1, c) * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
    out
}

/// Resamples the crop window onto a `size x size` grid with pixel-center
/// alignment; a full-frame crop at the same size is an exact copy.
fn crop_resize(img: &FloatImage, crop: [usize; 4], size: usize) -> FloatImage {
    let [x0, y0, cw, ch] = crop;
    let sx = cw as f32 / size as f32;
    let sy = ch as f32 / size as f32;
    let mut out = FloatImage::zeros(size, size);
    for dy in 0..size {
        let y = (y0 as f32 + (dy as f32 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f32);
        for dx in 0..size {
            let x = (x0 as f32 + (dx as f32 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f32);
            let px = bilinear(img, x, y);
            let i = (dy * size + dx) * 3;
            out.data[i..i + 3].copy_from_slice(&px);
        }
    }
    out
}

fn flip(img: &FloatImage) -> FloatImage {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let src = (y * img.width + x) * 3;
            let dst = (y * img.width + (img.width - 1 - x)) * 3;
            out.data[dst..dst + 3].copy_from_slice(&img.data[src..src + 3]);
        }
    }
    out
}

fn rotate(img: &FloatImage, degrees: f64) -> FloatImage {
    let theta = degrees.to_radians();
    let (sin, cos) = (theta.sin() as f32, theta.cos() as f32);
    let cx = (img.width as f32 - 1.0) / 2.0;
    let cy = (img.height as f32 - 1.0) / 2.0;
    let mut out = FloatImage::zeros(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            // Inverse mapping: destination -> source.
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let px = bilinear(img, reflect(sx, img.width), reflect(sy, img.height));
            let i = (y * img.width + x) * 3;
            out.data[i..i + 3].copy_from_slice(&px);
        }
    }
    out
}

fn clamp_pixels(img: &mut FloatImage) {
    for v in &mut img.data {
        *v = v.clamp(0.0, 255.0);
    }
}

fn luma(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn jitter(img: &mut FloatImage, brightness: f32, contrast: f32, saturation: f32) {
    for v in &mut img.data {
        *v *= brightness;
    }
    clamp_pixels(img);

    let mean = img.data.chunks_exact(3).map(luma).sum::<f32>() / (img.width * img.height) as f32;
    for v in &mut img.data {
        *v = (*v - mean) * contrast + mean;
    }
    clamp_pixels(img);

    for px in img.data.chunks_exact_mut(3) {
        let gray = luma(px);
        for v in px.iter_mut() {
            *v = (*v - gray) * saturation + gray;
        }
    }
    clamp_pixels(img);
}

fn gaussian_blur(img: &FloatImage, sigma: f64) -> FloatImage {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let weights: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let norm: f32 = weights.iter().sum();
    let weights: Vec<f32> = weights.into_iter().map(|w| w / norm).collect();
    let (w, h) = (img.width, img.height);

    let mut horizontal = FloatImage::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (k, wt) in weights.iter().enumerate() {
                let sx = reflect_index(x as isize + k as isize - radius, w);
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += wt * img.at(sx, y, c);
                }
            }
            let i = (y * w + x) * 3;
            horizontal.data[i..i + 3].copy_from_slice(&acc);
        }
    }
    let mut out = FloatImage::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (k, wt) in weights.iter().enumerate() {
                let sy = reflect_index(y as isize + k as isize - radius, h);
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += wt * horizontal.at(x, sy, c);
                }
            }
            let i = (y * w + x) * 3;
            out.data[i..i + 3].copy_from_slice(&acc);
        }
    }
    out
}

fn sample_crop(width: usize, height: usize, [lo, hi]: [f64; 2], rng: &mut Stream) -> [usize; 4] {
    let area = (width * height) as f64;
    let (log_lo, log_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let ratio = rng.random_range(log_lo..=log_hi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= width && ch <= height {
            let x = rng.random_range(0..=width - cw);
            let y = rng.random_range(0..=height - ch);
            return [x, y, cw, ch];
        }
    }
    [0, 0, width, height]
}

fn check_size(img: &Image, output_size: usize) -> Result<()> {
    if img.width() < output_size || img.height() < output_size {
        return Err(Error::ImageTooSmall { width: img.width(), height: img.height(), output_size });
    }
    Ok(())
}

/// Resamples the whole image to `size` x `size` without augmentation.
pub fn resize(img: &Image, size: usize) -> Result<Image> {
    check_size(img, size)?;
    let full = [0, 0, img.width(), img.height()];
    Ok(crop_resize(&FloatImage::from_image(img), full, size).to_image())
}

/// Random crop + resize, horizontal flip, rotation, color jitter and
/// optional Gaussian blur, in that order.
pub fn augment_view(img: &Image, spec: &AugmentationSpec, rng: &mut Stream) -> Result<Image> {
    augment_with_record(img, spec, rng).map(|(view, _)| view)
}

pub fn augment_with_record(img: &Image, spec: &AugmentationSpec, rng: &mut Stream) -> Result<(Image, ViewRecord)> {
    spec.validate()?;
    check_size(img, spec.output_size)?;
    let mut record = ViewRecord::default();
    let src = FloatImage::from_image(img);

    record.crop = sample_crop(img.width(), img.height(), spec.crop_scale_range, rng);
    let mut work = crop_resize(&src, record.crop, spec.output_size);

    record.flipped = rng.random::<f64>() < spec.flip_probability;
    if record.flipped {
        work = flip(&work);
    }

    if spec.rotation_max_degrees > 0.0 {
        let m = spec.rotation_max_degrees;
        record.rotation_degrees = rng.random_range(-m..=m);
        work = rotate(&work, record.rotation_degrees);
    }

    let s = spec.color_jitter_strength;
    if s > 0.0 {
        let lo = (1.0 - s).max(0.0);
        let hi = 1.0 + s;
        record.brightness = rng.random_range(lo..=hi);
        record.contrast = rng.random_range(lo..=hi);
        record.saturation = rng.random_range(lo..=hi);
        jitter(&mut work, record.brightness as f32, record.contrast as f32, record.saturation as f32);
    } else {
        record.brightness = 1.0;
        record.contrast = 1.0;
        record.saturation = 1.0;
    }

    if rng.random::<f64>() < spec.blur_probability {
        let [lo, hi] = spec.blur_sigma_range;
        let sigma = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        record.blur_sigma = Some(sigma);
        work = gaussian_blur(&work, sigma);
    }

    Ok((work.to_image(), record))
}

/// Augments every source `n` times (`n >= 2`), or duplicates each source
/// unaugmented when `n == 0`. View `k` belongs to group `k / n` (`k / 2` for
/// `n == 0`).
pub fn build_enlarged_batch(
    sources: &[Image],
    n: usize,
    spec: &AugmentationSpec,
    master_seed: u64,
) -> Result<EnlargedBatch> {
    if n == 1 {
        return Err(Error::InvalidN(n));
    }
    if sources.is_empty() {
        return Err(Error::InvalidConfig("enlarged batch needs at least one source".into()));
    }
    spec.validate()?;
    for img in sources {
        check_size(img, spec.output_size)?;
    }
    let per_source = if n == 0 { 2 } else { n };
    let total = sources.len() * per_source;

    let built: Vec<(Image, ViewRecord)> = (0..total)
        .into_par_iter()
        .map(|k| {
            let (s, v) = (k / per_source, k % per_source);
            let img = &sources[s];
            if n == 0 {
                let full = [0, 0, img.width(), img.height()];
                let view = crop_resize(&FloatImage::from_image(img), full, spec.output_size).to_image();
                let record = ViewRecord {
                    source_index: s,
                    view_index: v,
                    crop: full,
                    brightness: 1.0,
                    contrast: 1.0,
                    saturation: 1.0,
                    ..ViewRecord::default()
                };
                return Ok((view, record));
            }
            let mut stream = rng::stream(master_seed, Domain::Augment, s as u64, v as u64);
            let (view, mut record) = augment_with_record(img, spec, &mut stream)?;
            record.source_index = s;
            record.view_index = v;
            Ok((view, record))
        })
        .collect::<Result<_>>()?;

    let (views, provenance): (Vec<_>, Vec<_>) = built.into_iter().unzip();
    let groups = (0..total).map(|k| GroupId((k / per_source) as u32)).collect();
    Ok(EnlargedBatch { views, groups, provenance })
}

/// Applies one uniform random permutation to views, groups and provenance.
pub fn shuffle_batch(batch: &EnlargedBatch, rng: &mut Stream) -> EnlargedBatch {
    let mut perm: Vec<usize> = (0..batch.len()).collect();
    perm.shuffle(rng);
    batch.permute(&perm).expect("shuffled indices form a permutation")
}
