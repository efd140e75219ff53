//! Neural style transfer by direct pixel optimization.
//!
//! For feature map `F` (`N` channels by `M = H*W` positions) at layer `l`:
//!
//! * content loss `½ Σ (F - P)²` against the content image's features `P`;
//! * style loss `E_l = Σ (G - A)² / (4 N² M²)` between Gram matrices
//!   `G = F Fᵀ` of the generated image and `A` of the style image;
//! * total `α · content + β · Σ_l w_l E_l`.
//!
//! The image gradient is obtained by injecting `α (F - P)` at the content
//! layer and `β w_l (G - A) F / (N² M²)` at each style layer, then
//! backpropagating through the network.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, GradientDescent};
use crate::raster::{Raster, ResizeMethod};
use crate::real::Real;
use crate::vgg::{layer_index, FeatureActivations, VggNet};

/// Content layer, style layers, and per-style-layer weights `w_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSelection {
    pub content_layer: String,
    pub style_layers: Vec<String>,
    pub style_layer_weights: Vec<f64>,
}

impl Default for LayerSelection {
    fn default() -> Self {
        let style_layers: Vec<String> = ["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"]
            .into_iter()
            .map(String::from)
            .collect();
        let n = style_layers.len();
        Self {
            content_layer: "conv4_2".into(),
            style_layers,
            style_layer_weights: vec![1.0 / n as f64; n],
        }
    }
}

impl LayerSelection {
    pub fn validate(&self) -> Result<()> {
        layer_index(&self.content_layer)?;
        for l in &self.style_layers {
            layer_index(l)?;
        }
        if self.style_layers.is_empty() || self.style_layers.len() != self.style_layer_weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} style layers but {} weights",
                self.style_layers.len(),
                self.style_layer_weights.len()
            )));
        }
        if self.style_layer_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument("style layer weights must be positive".into()));
        }
        let sum: f64 = self.style_layer_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "style layer weights sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn all_layers(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.style_layers.iter().map(String::as_str).collect();
        if !v.contains(&self.content_layer.as_str()) {
            v.push(&self.content_layer);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    PlainGd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    #[default]
    Content,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NstConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Serialized as the `layers` table.
    #[serde(rename = "layers")]
    pub selection: LayerSelection,
    pub iterations: usize,
    /// Step size in 0..255 pixel units.
    pub step_size: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub init: InitKind,
    pub seed: u64,
    /// Project pixels back into the displayable range after every step.
    pub clamp_every_step: bool,
    pub pooling: crate::vgg::Pooling,
}

impl Default for NstConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1000.0,
            selection: LayerSelection::default(),
            iterations: 500,
            step_size: 2.0,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            init: InitKind::Content,
            seed: 0,
            clamp_every_step: false,
            pooling: crate::vgg::Pooling::Average,
        }
    }
}

impl NstConfig {
    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !(self.alpha + self.beta > 0.0) {
            return Err(Error::InvalidArgument(
                "alpha and beta must be non-negative with a positive sum".into(),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidArgument("step_size must be > 0".into()));
        }
        Ok(())
    }

    fn style_weight(&self, layer: &str) -> Result<f64> {
        self.selection
            .style_layers
            .iter()
            .position(|l| l == layer)
            .map(|i| self.selection.style_layer_weights[i])
            .ok_or_else(|| Error::InvalidArgument(format!("style target {layer} not in the layer selection")))
    }
}

/// `(C, H, W)` activations viewed as the `N x M` feature matrix.
pub fn flatten_features<T: Real>(a: &Array3<T>) -> ArrayView2<'_, T> {
    let (c, h, w) = a.dim();
    a.view()
        .into_shape_with_order((c, h * w))
        .expect("activations are standard layout")
}

/// `G = F Fᵀ`, exactly symmetric.
pub fn gram<T: Real>(features: ArrayView2<T>) -> Result<Array2<T>> {
    let (n, m) = features.dim();
    if n == 0 || m == 0 {
        return Err(Error::Shape("gram of empty features".into()));
    }
    let mut g = features.dot(&features.t());
    for i in 0..n {
        for j in 0..i {
            g[[i, j]] = g[[j, i]];
        }
    }
    Ok(g)
}

/// `½ Σ (F - P)²`
pub fn content_loss<T: Real>(features: ArrayView2<T>, target: ArrayView2<T>) -> Result<f64> {
    if features.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "content features {:?} vs target {:?}",
            features.dim(),
            target.dim()
        )));
    }
    Ok(0.5
        * features
            .iter()
            .zip(target.iter())
            .map(|(&f, &p)| (f - p).to_f64().powi(2))
            .sum::<f64>())
}

/// `Σ (G - A)² / (4 N² M²)`
pub fn style_layer_loss<T: Real>(g: ArrayView2<T>, a: ArrayView2<T>, channels: usize, positions: usize) -> Result<f64> {
    if g.dim() != a.dim() || g.nrows() != g.ncols() || g.nrows() != channels {
        return Err(Error::Shape(format!(
            "gram shapes {:?} / {:?} for {channels} channels",
            g.dim(),
            a.dim()
        )));
    }
    if positions == 0 {
        return Err(Error::InvalidArgument("spatial count must be >= 1".into()));
    }
    let denom = 4.0 * (channels as f64).powi(2) * (positions as f64).powi(2);
    let sq: f64 = g
        .iter()
        .zip(a.iter())
        .map(|(&x, &y)| (x - y).to_f64().powi(2))
        .sum();
    Ok(sq / denom)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContentTarget<T> {
    pub layer: String,
    /// `N x M`
    pub features: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleLayerTarget<T> {
    pub layer: String,
    pub gram: Array2<T>,
    pub channels: usize,
    pub positions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleTargets<T> {
    pub layers: Vec<StyleLayerTarget<T>>,
}

pub fn content_target<T: Real>(net: &VggNet<T>, content_pre: &Raster<T>, selection: &LayerSelection) -> Result<ContentTarget<T>> {
    let layer = selection.content_layer.as_str();
    let feats = net.forward_features(content_pre, &[layer])?;
    Ok(ContentTarget {
        layer: layer.to_string(),
        features: flatten_features(feats.get(layer).expect("requested layer present")).to_owned(),
    })
}

pub fn style_targets<T: Real>(net: &VggNet<T>, style_pre: &Raster<T>, selection: &LayerSelection) -> Result<StyleTargets<T>> {
    let names: Vec<&str> = selection.style_layers.iter().map(String::as_str).collect();
    let feats = net.forward_features(style_pre, &names)?;
    let layers = names
        .iter()
        .map(|&n| {
            let f = flatten_features(feats.get(n).expect("requested layer present"));
            Ok(StyleLayerTarget {
                layer: n.to_string(),
                gram: gram(f)?,
                channels: f.nrows(),
                positions: f.ncols(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(StyleTargets { layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub total: f64,
    pub content: f64,
    pub style: f64,
}

fn layers_for(content: &ContentTarget<impl Real>, style: &StyleTargets<impl Real>) -> Vec<String> {
    let mut v: Vec<String> = style.layers.iter().map(|l| l.layer.clone()).collect();
    if !v.contains(&content.layer) {
        v.push(content.layer.clone());
    }
    v
}

fn losses_from_features<T: Real>(
    feats: &FeatureActivations<T>,
    content: &ContentTarget<T>,
    style: &StyleTargets<T>,
    cfg: &NstConfig,
) -> Result<(Losses, Vec<Array2<T>>)> {
    let f = flatten_features(feats.get(&content.layer).expect("content layer computed"));
    let c = content_loss(f, content.features.view())?;
    let mut s = 0.0;
    let mut grams = Vec::with_capacity(style.layers.len());
    for t in &style.layers {
        let f = flatten_features(feats.get(&t.layer).expect("style layer computed"));
        if f.dim() != (t.channels, t.positions) {
            return Err(Error::Shape(format!(
                "{}: features {:?} but target built for {}x{}",
                t.layer,
                f.dim(),
                t.channels,
                t.positions
            )));
        }
        let g = gram(f)?;
        s += cfg.style_weight(&t.layer)? * style_layer_loss(g.view(), t.gram.view(), t.channels, t.positions)?;
        grams.push(g);
    }
    Ok((
        Losses {
            total: cfg.alpha * c + cfg.beta * s,
            content: c,
            style: s,
        },
        grams,
    ))
}

/// Losses for a preprocessed image.
pub fn total_loss<T: Real>(
    net: &VggNet<T>,
    image: &Raster<T>,
    content: &ContentTarget<T>,
    style: &StyleTargets<T>,
    cfg: &NstConfig,
) -> Result<Losses> {
    let names = layers_for(content, style);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let feats = net.forward_features(image, &names)?;
    Ok(losses_from_features(&feats, content, style, cfg)?.0)
}

/// Losses and the gradient of the total loss with respect to every pixel of
/// the preprocessed image.
pub fn loss_and_grad<T: Real>(
    net: &VggNet<T>,
    image: &Raster<T>,
    content: &ContentTarget<T>,
    style: &StyleTargets<T>,
    cfg: &NstConfig,
) -> Result<(Losses, Raster<T>)> {
    let names = layers_for(content, style);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let (feats, tape) = net.forward_with_tape(image, &names)?;
    let (losses, grams) = losses_from_features(&feats, content, style, cfg)?;

    let mut upstream = FeatureActivations::new();
    {
        let act = feats.get(&content.layer).expect("content layer computed");
        let f = flatten_features(act);
        let mut g = (&f - &content.features) * T::of(cfg.alpha);
        g = g.as_standard_layout().into_owned();
        upstream.accumulate(&content.layer, g.into_shape_with_order(act.dim()).expect("reshape"));
    }
    for (t, g_mat) in style.layers.iter().zip(&grams) {
        let act = feats.get(&t.layer).expect("style layer computed");
        let f = flatten_features(act);
        let (n, m) = (t.channels as f64, t.positions as f64);
        let scale = T::of(cfg.beta * cfg.style_weight(&t.layer)? / (n * n * m * m));
        let diff = g_mat - &t.gram;
        let up = diff.dot(&f) * scale;
        upstream.accumulate(&t.layer, up.into_shape_with_order(act.dim()).expect("reshape"));
    }
    let non_finite = || Error::NonFiniteLoss {
        iteration: 0,
        content: losses.content,
        style: losses.style,
    };
    if !losses.total.is_finite() {
        return Err(non_finite());
    }
    let grad = net.backward_from_tape(&tape, &upstream).map_err(|e| match e {
        Error::InvalidRaster(_) => non_finite(),
        e => e,
    })?;
    Ok((losses, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub total: f64,
    pub content: f64,
    pub style: f64,
}

/// Losses evaluated at the start of each iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizationTrace {
    pub records: Vec<TraceRecord>,
}

impl OptimizationTrace {
    pub fn first(&self) -> Option<&TraceRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// One JSON object per line: `{"iter":..,"total":..,"content":..,"style":..}`.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("trace record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format("trace", path, e.to_string())))
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

enum Stepper<T> {
    Adam(Adam<T>),
    Gd(GradientDescent<T>),
}

/// Check that the image is large enough for every selected layer.
fn check_dims(h: usize, w: usize, selection: &LayerSelection) -> Result<()> {
    let min = VggNet::<f32>::min_input_side(&selection.all_layers())?;
    if h < min || w < min {
        return Err(Error::Shape(format!(
            "image {h}x{w} is smaller than the {min}x{min} needed by the selected layers"
        )));
    }
    Ok(())
}

/// Optimize from prebuilt targets. `content` is the `[0, 1]` content image
/// (used for `init = content`). The result is clamped to `[0, 1]`.
pub fn optimize<T: Real>(
    net: &VggNet<T>,
    content: &Raster<T>,
    content_target: &ContentTarget<T>,
    style: &StyleTargets<T>,
    cfg: &NstConfig,
) -> Result<(Raster<T>, OptimizationTrace)> {
    cfg.validate()?;
    let (h, w, _) = content.dims();
    check_dims(h, w, &cfg.selection)?;
    let weights = &net.weights;
    let start = match cfg.init {
        InitKind::Content => content.clone(),
        InitKind::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Raster::new(h, w, 3, (0..h * w * 3).map(|_| T::of(rng.random::<f64>())).collect())?
        }
    };
    let mut image = weights.preprocess(&start)?.into_array();
    let mean = weights.mean_rgb();
    let mut stepper = match cfg.optimizer {
        OptimizerKind::Adam => Stepper::Adam(Adam::new(image.dim(), cfg.step_size, cfg.beta1, cfg.beta2, cfg.epsilon)),
        OptimizerKind::PlainGd => Stepper::Gd(GradientDescent::new(cfg.step_size)),
    };
    let mut trace = OptimizationTrace::default();
    for iter in 0..cfg.iterations {
        let current = Raster::from_array_unchecked(image.clone());
        let (losses, grad) = loss_and_grad(net, &current, content_target, style, cfg).map_err(|e| match e {
            Error::NonFiniteLoss { content, style, .. } => Error::NonFiniteLoss {
                iteration: iter,
                content,
                style,
            },
            e => e,
        })?;
        trace.records.push(TraceRecord {
            iter,
            total: losses.total,
            content: losses.content,
            style: losses.style,
        });
        let grad = grad.into_array();
        match &mut stepper {
            Stepper::Adam(a) => a.step(&mut image, &grad),
            Stepper::Gd(g) => g.step(&mut image, &grad),
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: iter,
                content: losses.content,
                style: losses.style,
            });
        }
        if cfg.clamp_every_step {
            for mut px in image.rows_mut() {
                for (c, v) in px.iter_mut().enumerate() {
                    *v = v.max(T::of(-mean[c])).min(T::of(255.0 - mean[c]));
                }
            }
        }
        log::debug!("iter {iter} total {:.6e}", losses.total);
    }
    let out = weights.unpreprocess(&Raster::from_array_unchecked(image))?;
    Ok((out.clamp_unit(), trace))
}

/// Stylize `content` (values in `[0, 1]`) with the statistics of `style`,
/// which is first resized to the content dimensions.
pub fn stylize<T: Real>(
    net: &VggNet<T>,
    content: &Raster<T>,
    style: &Raster<T>,
    cfg: &NstConfig,
) -> Result<(Raster<T>, OptimizationTrace)> {
    cfg.validate()?;
    let (h, w, _) = content.dims();
    check_dims(h, w, &cfg.selection)?;
    let style = style.resize(h, w, ResizeMethod::Bilinear)?;
    let ct = content_target(net, &net.weights.preprocess(content)?, &cfg.selection)?;
    let st = style_targets(net, &net.weights.preprocess(&style)?, &cfg.selection)?;
    optimize(net, content, &ct, &st, cfg)
}
