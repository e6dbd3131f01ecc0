//! Shared backbone, per-expert context modules and classifier heads.
//!
//! ```text
//! x (D) ──backbone: relu(W1·x + b1)──► f (F1)
//! f ──window mean (radius r, clipped at edges)──► m (F1)
//! [f ; m] (2·F1) ──context: relu(Wc·[f;m] + bc)──► g (F2)
//! g ──head: Wh·g + bh──► z (c logits, all categories)
//! ```
//!
//! Every grid is stored row-major with the channel axis innermost. Forward
//! passes keep their intermediates in [`ExpertCache`] so the analytic
//! backward pass can reuse them.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;
use crate::rng::{self, Rng};
use crate::synthgen::SceneSample;

/// Dense affine map `y = W·x + b`, `W` stored row-major `out_dim × in_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear { out_dim, in_dim, weight: vec![0.0; out_dim * in_dim], bias: vec![0.0; out_dim] }
    }

    /// Xavier-uniform weights in `(-s, s)`, `s = sqrt(6 / (fan_in + fan_out))`,
    /// and zero biases.
    pub fn xavier(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        let s = xavier_bound(in_dim, out_dim);
        let weight = (0..out_dim * in_dim).map(|_| rng.random_range(-s..s)).collect();
        Linear { out_dim, in_dim, weight, bias: vec![0.0; out_dim] }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn zeroed_like(&self) -> Self {
        Self::zeros(self.out_dim, self.in_dim)
    }

    /// `y = W·x + b` for one row.
    #[inline]
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *yo = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Accumulates `dW += dy·xᵀ`, `db += dy` for one row.
    #[inline]
    fn accumulate(&mut self, x: &[f64], dy: &[f64]) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.bias[o] += g;
            let row = &mut self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            row.iter_mut().zip(x).for_each(|(w, v)| *w += g * v);
        }
    }

    /// `dx = Wᵀ·dy` for one row.
    #[inline]
    fn backprop(&self, dy: &[f64], dx: &mut [f64]) {
        dx.fill(0.0);
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            dx.iter_mut().zip(row).for_each(|(d, w)| *d += g * w);
        }
    }

    /// `self -= lr · grad`.
    pub fn sgd_step(&mut self, grad: &Linear, lr: f64) {
        self.weight.iter_mut().zip(&grad.weight).for_each(|(w, g)| *w -= lr * g);
        self.bias.iter_mut().zip(&grad.bias).for_each(|(b, g)| *b -= lr * g);
    }

    pub fn add_scaled(&mut self, other: &Linear, scale: f64) {
        self.weight.iter_mut().zip(&other.weight).for_each(|(w, g)| *w += scale * g);
        self.bias.iter_mut().zip(&other.bias).for_each(|(b, g)| *b += scale * g);
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden: usize,
    pub context: usize,
    pub classes: usize,
    pub window_radius: usize,
    pub experts: usize,
}

impl ModelDims {
    pub fn new(input_dim: usize, classes: usize, experts: usize) -> Self {
        ModelDims { input_dim, hidden: 16, context: 16, classes, window_radius: 2, experts }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.context == 0 || self.classes == 0 {
            return Err(Error::invalid("model widths must be positive"));
        }
        if self.window_radius == 0 {
            return Err(Error::invalid("window radius must be at least 1"));
        }
        if self.experts == 0 {
            return Err(Error::invalid("need at least one expert"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    /// `hidden × input_dim`.
    pub layer: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    /// `context × (2·hidden)`, applied to `[f ; window_mean(f)]`.
    pub context: Linear,
    /// `classes × context`.
    pub head: Linear,
    pub window_radius: usize,
}

impl ExpertParams {
    pub fn is_finite(&self) -> bool {
        self.context.is_finite() && self.head.is_finite()
    }
}

/// A grid of `channels`-dimensional vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureGrid { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn at(&self, pixel: usize) -> &[f64] {
        &self.data[pixel * self.channels..(pixel + 1) * self.channels]
    }
}

/// Per-pixel logits over all categories.
pub type LogitGrid = FeatureGrid;

pub fn init_params(seed: u64, dims: &ModelDims) -> Result<(BackboneParams, Vec<ExpertParams>)> {
    dims.validate()?;
    let mut rng = rng::substream(seed, 0);
    let backbone = BackboneParams { layer: Linear::xavier(dims.hidden, dims.input_dim, &mut rng) };
    let experts = (0..dims.experts)
        .map(|i| {
            let mut rng = rng::substream(seed, i as u64 + 1);
            ExpertParams {
                context: Linear::xavier(dims.context, 2 * dims.hidden, &mut rng),
                head: Linear::xavier(dims.classes, dims.context, &mut rng),
                window_radius: dims.window_radius,
            }
        })
        .collect();
    Ok((backbone, experts))
}

/// `relu(W1·x + b1)` at every pixel.
pub fn backbone_forward(params: &BackboneParams, sample: &SceneSample) -> Result<FeatureGrid> {
    let layer = &params.layer;
    if sample.dim != layer.in_dim {
        return Err(Error::invalid(format!(
            "sample feature dimension {} does not match backbone input {}",
            sample.dim, layer.in_dim
        )));
    }
    let mut out = FeatureGrid::zeros(sample.height, sample.width, layer.out_dim);
    let mut x = vec![0.0; layer.in_dim];
    for (p, y) in out.data.chunks_exact_mut(layer.out_dim).enumerate() {
        x.iter_mut().zip(sample.feature(p)).for_each(|(a, &b)| *a = b as f64);
        layer.apply(&x, y);
        y.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(out)
}

fn window_range(i: usize, radius: usize, n: usize) -> std::ops::RangeInclusive<usize> {
    i.saturating_sub(radius)..=(i + radius).min(n - 1)
}

/// Box sums along rows (`along_rows`) or columns, window clipped to the grid.
fn box_sum_axis(grid: &FeatureGrid, radius: usize, along_rows: bool) -> FeatureGrid {
    let (h, w, ch) = (grid.height, grid.width, grid.channels);
    let mut out = FeatureGrid::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            let dst = &mut out.data[(y * w + x) * ch..(y * w + x + 1) * ch];
            if along_rows {
                for xx in window_range(x, radius, w) {
                    dst.iter_mut().zip(grid.at(y * w + xx)).for_each(|(a, b)| *a += b);
                }
            } else {
                for yy in window_range(y, radius, h) {
                    dst.iter_mut().zip(grid.at(yy * w + x)).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    out
}

fn window_counts(h: usize, w: usize, radius: usize) -> Vec<f64> {
    let mut counts = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            counts.push((window_range(y, radius, h).count() * window_range(x, radius, w).count()) as f64);
        }
    }
    counts
}

/// Mean over the `(2r+1)²` window around each pixel, with the window clamped
/// to the grid: only in-bounds pixels are averaged, so edges are not darkened
/// and a radius covering the grid yields the global mean everywhere.
pub fn window_mean(grid: &FeatureGrid, radius: usize) -> FeatureGrid {
    let mut out = box_sum_axis(&box_sum_axis(grid, radius, true), radius, false);
    let counts = window_counts(grid.height, grid.width, radius);
    for (px, n) in out.data.chunks_exact_mut(grid.channels).zip(counts) {
        px.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Adjoint of [`window_mean`]: scatters each output gradient back over the
/// window it averaged.
pub fn window_mean_adjoint(grad: &FeatureGrid, radius: usize) -> FeatureGrid {
    let mut scaled = grad.clone();
    let counts = window_counts(grad.height, grad.width, radius);
    for (px, n) in scaled.data.chunks_exact_mut(grad.channels).zip(counts) {
        px.iter_mut().for_each(|v| *v /= n);
    }
    // Box sums with symmetric clipped windows are self-adjoint.
    box_sum_axis(&box_sum_axis(&scaled, radius, false), radius, true)
}

/// Intermediates of one expert's forward pass over one scene.
#[derive(Clone, Debug)]
pub struct ExpertCache {
    /// Window mean of the backbone features.
    pub mean: FeatureGrid,
    /// Context module output.
    pub context: FeatureGrid,
}

fn check_context_dims(params: &ExpertParams, feat: &FeatureGrid) -> Result<()> {
    if params.context.in_dim != 2 * feat.channels {
        return Err(Error::invalid(format!(
            "context module expects {} inputs, backbone gives 2x{}",
            params.context.in_dim, feat.channels
        )));
    }
    if params.head.in_dim != params.context.out_dim {
        return Err(Error::invalid("classifier head width does not match context module"));
    }
    if params.window_radius == 0 {
        return Err(Error::invalid("window radius must be at least 1"));
    }
    Ok(())
}

fn context_with_mean(params: &ExpertParams, feat: &FeatureGrid, mean: &FeatureGrid) -> FeatureGrid {
    let f1 = feat.channels;
    let f2 = params.context.out_dim;
    let mut out = FeatureGrid::zeros(feat.height, feat.width, f2);
    let mut cat = vec![0.0; 2 * f1];
    for (p, y) in out.data.chunks_exact_mut(f2).enumerate() {
        cat[..f1].copy_from_slice(feat.at(p));
        cat[f1..].copy_from_slice(mean.at(p));
        params.context.apply(&cat, y);
        y.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    out
}

/// `relu(Wc·[f ; window_mean(f)] + bc)` at every pixel.
pub fn context_forward(params: &ExpertParams, feat: &FeatureGrid) -> Result<FeatureGrid> {
    check_context_dims(params, feat)?;
    let mean = window_mean(feat, params.window_radius);
    Ok(context_with_mean(params, feat, &mean))
}

pub fn head_forward(head: &Linear, context: &FeatureGrid) -> LogitGrid {
    let mut out = FeatureGrid::zeros(context.height, context.width, head.out_dim);
    for (p, y) in out.data.chunks_exact_mut(head.out_dim).enumerate() {
        head.apply(context.at(p), y);
    }
    out
}

/// Logits of one expert from precomputed backbone features.
pub fn expert_forward_from_features(params: &ExpertParams, feat: &FeatureGrid) -> Result<(LogitGrid, ExpertCache)> {
    check_context_dims(params, feat)?;
    let mean = window_mean(feat, params.window_radius);
    let context = context_with_mean(params, feat, &mean);
    let logits = head_forward(&params.head, &context);
    Ok((logits, ExpertCache { mean, context }))
}

/// `z = head(context(backbone(x)))` over all categories.
pub fn expert_forward(backbone: &BackboneParams, expert: &ExpertParams, sample: &SceneSample) -> Result<LogitGrid> {
    let feat = backbone_forward(backbone, sample)?;
    Ok(expert_forward_from_features(expert, &feat)?.0)
}

/// Per-pixel softmax of a logit grid.
pub fn softmax_grid(logits: &LogitGrid) -> FeatureGrid {
    let mut out = logits.clone();
    for (z, p) in logits.data.chunks_exact(logits.channels).zip(out.data.chunks_exact_mut(logits.channels)) {
        numeric::softmax_into(z, p);
    }
    out
}

/// Backward pass of one expert. Accumulates parameter gradients into `grad`
/// and, when `dfeat` is given, the gradient with respect to the backbone
/// features into it.
pub fn expert_backward(
    params: &ExpertParams,
    feat: &FeatureGrid,
    cache: &ExpertCache,
    dlogits: &LogitGrid,
    grad: &mut ExpertParams,
    dfeat: Option<&mut FeatureGrid>,
) {
    let f1 = feat.channels;
    let f2 = params.context.out_dim;
    let n = feat.pixels();
    let mut dctx = vec![0.0; f2];
    let mut dcat = vec![0.0; 2 * f1];
    let mut cat = vec![0.0; 2 * f1];
    let want_input = dfeat.is_some();
    let mut dfeat_direct = FeatureGrid::zeros(feat.height, feat.width, if want_input { f1 } else { 0 });
    let mut dmean = FeatureGrid::zeros(feat.height, feat.width, if want_input { f1 } else { 0 });
    for p in 0..n {
        let dz = dlogits.at(p);
        if dz.iter().all(|&g| g == 0.0) {
            continue;
        }
        let g = cache.context.at(p);
        grad.head.accumulate(g, dz);
        params.head.backprop(dz, &mut dctx);
        dctx.iter_mut().zip(g).for_each(|(d, &v)| {
            if v <= 0.0 {
                *d = 0.0
            }
        });
        cat[..f1].copy_from_slice(feat.at(p));
        cat[f1..].copy_from_slice(cache.mean.at(p));
        grad.context.accumulate(&cat, &dctx);
        if want_input {
            params.context.backprop(&dctx, &mut dcat);
            dfeat_direct.data[p * f1..(p + 1) * f1].copy_from_slice(&dcat[..f1]);
            dmean.data[p * f1..(p + 1) * f1].copy_from_slice(&dcat[f1..]);
        }
    }
    if let Some(dfeat) = dfeat {
        let spread = window_mean_adjoint(&dmean, params.window_radius);
        for ((d, a), b) in dfeat.data.iter_mut().zip(&dfeat_direct.data).zip(&spread.data) {
            *d += a + b;
        }
    }
}

/// Backward pass of the backbone given the gradient at its output.
pub fn backbone_backward(
    params: &BackboneParams,
    sample: &SceneSample,
    feat: &FeatureGrid,
    dfeat: &FeatureGrid,
    grad: &mut BackboneParams,
) {
    let f1 = params.layer.out_dim;
    let mut x = vec![0.0; params.layer.in_dim];
    let mut dpre = vec![0.0; f1];
    for p in 0..feat.pixels() {
        let out = feat.at(p);
        let dy = dfeat.at(p);
        let mut any = false;
        for k in 0..f1 {
            dpre[k] = if out[k] > 0.0 { dy[k] } else { 0.0 };
            any |= dpre[k] != 0.0;
        }
        if !any {
            continue;
        }
        x.iter_mut().zip(sample.feature(p)).for_each(|(a, &b)| *a = b as f64);
        grad.layer.accumulate(&x, &dpre);
    }
}

impl BackboneParams {
    pub fn zeroed_like(&self) -> Self {
        BackboneParams { layer: self.layer.zeroed_like() }
    }
}

impl ExpertParams {
    pub fn zeroed_like(&self) -> Self {
        ExpertParams {
            context: self.context.zeroed_like(),
            head: self.head.zeroed_like(),
            window_radius: self.window_radius,
        }
    }
}
