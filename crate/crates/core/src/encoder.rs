//! A small convolutional encoder with a two-layer projection head and
//! hand-written backpropagation.
//!
//! Architecture: `conv(3x3, stride 2, pad 1) + ReLU` stages, global average
//! pooling, then `Linear -> ReLU -> Linear` producing the embedding. The
//! encoder is generic over the float type so gradient checks can run in
//! both 32- and 64-bit arithmetic; training uses `f32`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Domain};

pub trait Scalar: Float + Sum + Debug + Default + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Per-channel standardization applied to `[0, 1]` pixels.
pub const CHANNEL_MEAN: f64 = 0.5;
pub const CHANNEL_STD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    /// Output channels of each conv stage; input has 3 channels.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// ReLU between the two projection layers.
    pub head_relu: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            conv_channels: vec![16, 32, 64],
            kernel: 3,
            stride: 2,
            padding: 1,
            hidden_dim: 128,
            embed_dim: 128,
            head_relu: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("encoder: {m}")));
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("conv_channels must be non-empty and positive");
        }
        if self.kernel == 0 || self.stride == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return bad("kernel, stride and layer widths must be positive");
        }
        let mut size = self.input_size;
        for _ in &self.conv_channels {
            if size + 2 * self.padding < self.kernel {
                return bad("input too small for the conv stack");
            }
            size = conv_out(size, self.kernel, self.stride, self.padding);
        }
        Ok(())
    }

    /// Spatial side after each conv stage.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_size];
        for _ in &self.conv_channels {
            let last = *sizes.last().expect("non-empty");
            sizes.push(conv_out(last, self.kernel, self.stride, self.padding));
        }
        sizes
    }

    /// `(name, shape)` of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, &cout) in self.conv_channels.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![cout, cin, self.kernel, self.kernel]));
            out.push((format!("conv{i}.bias"), vec![cout]));
            cin = cout;
        }
        out.push(("head.0.weight".into(), vec![self.hidden_dim, cin]));
        out.push(("head.0.bias".into(), vec![self.hidden_dim]));
        out.push(("head.1.weight".into(), vec![self.embed_dim, self.hidden_dim]));
        out.push(("head.1.bias".into(), vec![self.embed_dim]));
        out
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

#[derive(Debug, Clone)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Encoder and projection-head weights.
#[derive(Debug, Clone)]
pub struct EncoderParams<T> {
    config: EncoderConfig,
    tensors: Vec<Tensor<T>>,
    /// Bumped on every update; ties activation caches to the weights they
    /// were computed with.
    version: u64,
}

impl<T: Scalar> PartialEq for EncoderParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.data.len() == b.data.len()
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

impl<T: Scalar> EncoderParams<T> {
    /// He-normal weights, zero biases.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .enumerate()
            .map(|(idx, (name, shape))| {
                let len = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![T::zero(); len]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    let mut stream = rng::stream(seed, Domain::Init, idx as u64, 0);
                    (0..len).map(|_| T::of(normal.sample(&mut stream))).collect()
                };
                Tensor { name, shape, data }
            })
            .collect();
        Ok(Self { config, tensors, version: 0 })
    }

    /// Rebuilds parameters from tensors, checking them against `config`.
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::ShapeMismatch(format!("{} tensors, layout has {}", tensors.len(), layout.len())));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!("tensor {} {:?} does not match {name} {shape:?}", t.name, t.shape)));
            }
        }
        Ok(Self { config, tensors, version: 0 })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Mutable access to tensor data; invalidates outstanding caches.
    pub fn tensor_data_mut(&mut self, index: usize) -> &mut [T] {
        self.version += 1;
        &mut self.tensors[index].data
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|x| U::of(x.as_f64())).collect(),
                })
                .collect(),
            version: 0,
        }
    }

    fn conv_weight(&self, layer: usize) -> &[T] {
        &self.tensors[2 * layer].data
    }

    fn conv_bias(&self, layer: usize) -> &[T] {
        &self.tensors[2 * layer + 1].data
    }

    fn head(&self, layer: usize) -> (&[T], &[T]) {
        let base = 2 * self.config.conv_channels.len() + 2 * layer;
        (&self.tensors[base].data, &self.tensors[base + 1].data)
    }
}

/// Gradients with the same layout as [`EncoderParams`] tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(params: &EncoderParams<T>) -> Self {
        Self { tensors: params.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect() }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
    }
}

#[derive(Debug, Clone)]
struct ViewCache<T> {
    /// Input to each conv stage; the last entry is the final conv output
    /// (post-ReLU).
    stages: Vec<Vec<T>>,
    pooled: Vec<T>,
    /// First projection layer output (post-activation).
    hidden: Vec<T>,
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ActivationCache<T> {
    version: u64,
    views: Vec<ViewCache<T>>,
}

impl<T> ActivationCache<T> {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Converts an image to standardized channel-major input.
pub fn image_to_input<T: Scalar>(img: &Image) -> Vec<T> {
    let (w, h) = (img.width(), img.height());
    let mut out = vec![T::zero(); 3 * w * h];
    for (p, px) in img.pixels().chunks_exact(3).enumerate() {
        for c in 0..3 {
            let v = (f64::from(px[c]) / 255.0 - CHANNEL_MEAN) / CHANNEL_STD;
            out[c * w * h + p] = T::of(v);
        }
    }
    out
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    size_in: usize,
    size_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new(config: &EncoderConfig, layer: usize) -> Self {
        let sizes = config.spatial_sizes();
        Self {
            cin: if layer == 0 { 3 } else { config.conv_channels[layer - 1] },
            cout: config.conv_channels[layer],
            size_in: sizes[layer],
            size_out: sizes[layer + 1],
            kernel: config.kernel,
            stride: config.stride,
            padding: config.padding,
        }
    }

    /// Output positions `o` along one axis whose tap `k` lands inside the
    /// input, paired with that input coordinate.
    fn taps(&self, k: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.size_out).filter_map(move |o| {
            let i = (o * self.stride + k).checked_sub(self.padding)?;
            (i < self.size_in).then_some((o, i))
        })
    }
}

fn conv_forward<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (si, so, k) = (g.size_in, g.size_out, g.kernel);
    let mut out = vec![T::zero(); g.cout * so * so];
    for o in 0..g.cout {
        let plane = &mut out[o * so * so..(o + 1) * so * so];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..g.cin {
            let src = &input[c * si * si..(c + 1) * si * si];
            for ky in 0..k {
                for kx in 0..k {
                    let w = weight[((o * g.cin + c) * k + ky) * k + kx];
                    for (oy, iy) in g.taps(ky) {
                        let row_out = &mut plane[oy * so..(oy + 1) * so];
                        let row_in = &src[iy * si..(iy + 1) * si];
                        for (ox, ix) in g.taps(kx) {
                            row_out[ox] = row_out[ox] + w * row_in[ix];
                        }
                    }
                }
            }
        }
    }
    for v in &mut out {
        *v = v.max(T::zero());
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient
/// (skipped when `need_input` is false). `grad_out` is w.r.t. the post-ReLU
/// output; `output` is used for the ReLU mask.
#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    output: &[T],
    grad_out: &[T],
    weight: &[T],
    grad_w: &mut [T],
    grad_b: &mut [T],
    need_input: bool,
) -> Vec<T> {
    let (si, so, k) = (g.size_in, g.size_out, g.kernel);
    let pre: Vec<T> = grad_out
        .iter()
        .zip(output)
        .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
        .collect();
    let mut grad_in = if need_input { vec![T::zero(); g.cin * si * si] } else { Vec::new() };
    for o in 0..g.cout {
        let dplane = &pre[o * so * so..(o + 1) * so * so];
        grad_b[o] = grad_b[o] + dplane.iter().copied().sum::<T>();
        for c in 0..g.cin {
            let src = &input[c * si * si..(c + 1) * si * si];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * g.cin + c) * k + ky) * k + kx;
                    let w = weight[widx];
                    let mut acc = T::zero();
                    for (oy, iy) in g.taps(ky) {
                        let drow = &dplane[oy * so..(oy + 1) * so];
                        let row_in = &src[iy * si..(iy + 1) * si];
                        for (ox, ix) in g.taps(kx) {
                            acc = acc + drow[ox] * row_in[ix];
                        }
                        if need_input {
                            let gin = &mut grad_in[c * si * si + iy * si..c * si * si + (iy + 1) * si];
                            for (ox, ix) in g.taps(kx) {
                                gin[ix] = gin[ix] + w * drow[ox];
                            }
                        }
                    }
                    grad_w[widx] = grad_w[widx] + acc;
                }
            }
        }
    }
    grad_in
}

fn linear<T: Scalar>(weight: &[T], bias: &[T], x: &[T], relu: bool) -> Vec<T> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(r, &b)| {
            let row = &weight[r * n_in..(r + 1) * n_in];
            let v = row.iter().zip(x).fold(b, |acc, (&w, &xi)| acc + w * xi);
            if relu {
                v.max(T::zero())
            } else {
                v
            }
        })
        .collect()
}

fn forward_view<T: Scalar>(params: &EncoderParams<T>, input: Vec<T>) -> (Vec<T>, ViewCache<T>) {
    let cfg = &params.config;
    let mut stages = vec![input];
    for layer in 0..cfg.conv_channels.len() {
        let g = ConvGeom::new(cfg, layer);
        let out = conv_forward(&g, stages.last().expect("non-empty"), params.conv_weight(layer), params.conv_bias(layer));
        stages.push(out);
    }
    let last = stages.last().expect("non-empty");
    let channels = *cfg.conv_channels.last().expect("validated");
    let area = last.len() / channels;
    let inv_area = T::of(1.0 / area as f64);
    let pooled: Vec<T> =
        last.chunks_exact(area).map(|plane| plane.iter().copied().sum::<T>() * inv_area).collect();
    let (w0, b0) = params.head(0);
    let hidden = linear(w0, b0, &pooled, cfg.head_relu);
    let (w1, b1) = params.head(1);
    let out = linear(w1, b1, &hidden, false);
    (out, ViewCache { stages, pooled, hidden })
}

/// Embeds standardized channel-major inputs.
pub fn forward_inputs<T: Scalar>(
    params: &EncoderParams<T>,
    inputs: Vec<Vec<T>>,
) -> Result<(Vec<Vec<f64>>, ActivationCache<T>)> {
    let s = params.config.input_size;
    if let Some(bad) = inputs.iter().position(|x| x.len() != 3 * s * s) {
        return Err(Error::ShapeMismatch(format!(
            "input {bad} has {} values, encoder expects 3x{s}x{s}",
            inputs[bad].len()
        )));
    }
    let (outs, views): (Vec<_>, Vec<_>) = inputs.into_par_iter().map(|x| forward_view(params, x)).unzip();
    let embeddings = outs.into_iter().map(|v| v.into_iter().map(Scalar::as_f64).collect()).collect();
    Ok((embeddings, ActivationCache { version: params.version, views }))
}

/// Embeds a batch of views; one `embed_dim` vector per view.
pub fn forward<T: Scalar>(params: &EncoderParams<T>, views: &[Image]) -> Result<(Vec<Vec<f64>>, ActivationCache<T>)> {
    let s = params.config.input_size;
    if let Some(bad) = views.iter().position(|v| v.width() != s || v.height() != s) {
        return Err(Error::ShapeMismatch(format!(
            "view {bad} is {}x{}, encoder expects {s}x{s}",
            views[bad].width(),
            views[bad].height()
        )));
    }
    forward_inputs(params, views.iter().map(image_to_input).collect())
}

fn backward_view<T: Scalar>(params: &EncoderParams<T>, cache: &ViewCache<T>, grad_out: &[T]) -> ParamGrads<T> {
    let cfg = &params.config;
    let mut grads = ParamGrads::zeros_like(params);
    let n_conv = cfg.conv_channels.len();
    let head_base = 2 * n_conv;

    // Second projection layer.
    let (w1, _) = params.head(1);
    let hdim = cfg.hidden_dim;
    let mut grad_hidden = vec![T::zero(); hdim];
    for (r, &d) in grad_out.iter().enumerate() {
        grads.tensors[head_base + 3][r] = d;
        let gw = &mut grads.tensors[head_base + 2][r * hdim..(r + 1) * hdim];
        for (g, &h) in gw.iter_mut().zip(&cache.hidden) {
            *g = d * h;
        }
        for (gh, &w) in grad_hidden.iter_mut().zip(&w1[r * hdim..(r + 1) * hdim]) {
            *gh = *gh + d * w;
        }
    }
    if cfg.head_relu {
        for (gh, &h) in grad_hidden.iter_mut().zip(&cache.hidden) {
            if h <= T::zero() {
                *gh = T::zero();
            }
        }
    }

    // First projection layer.
    let (w0, _) = params.head(0);
    let pdim = cache.pooled.len();
    let mut grad_pooled = vec![T::zero(); pdim];
    for (r, &d) in grad_hidden.iter().enumerate() {
        grads.tensors[head_base + 1][r] = d;
        let gw = &mut grads.tensors[head_base][r * pdim..(r + 1) * pdim];
        for (g, &p) in gw.iter_mut().zip(&cache.pooled) {
            *g = d * p;
        }
        for (gp, &w) in grad_pooled.iter_mut().zip(&w0[r * pdim..(r + 1) * pdim]) {
            *gp = *gp + d * w;
        }
    }

    // Global average pool.
    let last = cache.stages.last().expect("non-empty");
    let area = last.len() / pdim;
    let inv_area = T::of(1.0 / area as f64);
    let mut grad_act: Vec<T> = grad_pooled.iter().flat_map(|&g| std::iter::repeat_n(g * inv_area, area)).collect();

    for layer in (0..n_conv).rev() {
        let g = ConvGeom::new(cfg, layer);
        let (left, right) = grads.tensors.split_at_mut(2 * layer + 1);
        grad_act = conv_backward(
            &g,
            &cache.stages[layer],
            &cache.stages[layer + 1],
            &grad_act,
            params.conv_weight(layer),
            &mut left[2 * layer],
            &mut right[0],
            layer > 0,
        );
    }
    grads
}

/// Reverse-mode gradients of `sum_k <grad_embeddings[k], embedding_k>` with
/// respect to every parameter.
pub fn backward<T: Scalar>(
    params: &EncoderParams<T>,
    cache: &ActivationCache<T>,
    grad_embeddings: &[Vec<f64>],
) -> Result<ParamGrads<T>> {
    if cache.version != params.version {
        return Err(Error::StaleCache(format!(
            "cache built at parameter version {}, parameters are at {}",
            cache.version, params.version
        )));
    }
    if grad_embeddings.len() != cache.views.len() {
        return Err(Error::StaleCache(format!(
            "{} embedding gradients for a forward pass over {} views",
            grad_embeddings.len(),
            cache.views.len()
        )));
    }
    if let Some(bad) = grad_embeddings.iter().position(|g| g.len() != params.config.embed_dim) {
        return Err(Error::ShapeMismatch(format!(
            "embedding gradient {bad} has {} entries, expected {}",
            grad_embeddings[bad].len(),
            params.config.embed_dim
        )));
    }
    let per_view: Vec<ParamGrads<T>> = cache
        .views
        .par_iter()
        .zip(grad_embeddings)
        .map(|(view, g)| {
            let g: Vec<T> = g.iter().map(|&x| T::of(x)).collect();
            backward_view(params, view, &g)
        })
        .collect();
    // Fixed-order reduction.
    let mut total = ParamGrads::zeros_like(params);
    for g in &per_view {
        total.add_assign(g);
    }
    Ok(total)
}
