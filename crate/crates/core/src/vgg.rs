//! VGG-19 convolutional trunk (16 conv layers, 5 pooling stages, no
//! classifier head) with exact gradients back to the input pixels.
//!
//! Images enter as `(height, width, 3)` rasters already preprocessed with
//! [`VggWeights::preprocess`]: RGB scaled to 0..255 minus the per-channel
//! training mean. Activations are `(channels, height, width)` arrays.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::checksum;
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::real::Real;

/// Conv layers per block.
pub const BLOCKS: [usize; 5] = [2, 2, 4, 4, 4];
/// Output channels per block of the canonical network.
pub const VGG19_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
/// Per-channel RGB means (0..255 scale) of the ImageNet training set used by
/// the original VGG release.
pub const VGG_MEAN_RGB: [f64; 3] = [123.68, 116.779, 103.939];

pub const NUM_CONV_LAYERS: usize = 16;

/// Static description of one conv layer position in the trunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    /// Zero-based block index; also the number of pooling stages before it.
    pub block: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

pub fn architecture(widths: [usize; 5]) -> Vec<LayerInfo> {
    let mut out = Vec::with_capacity(NUM_CONV_LAYERS);
    let mut in_ch = 3;
    for (b, (&n, &w)) in BLOCKS.iter().zip(&widths).enumerate() {
        for i in 0..n {
            out.push(LayerInfo {
                name: format!("conv{}_{}", b + 1, i + 1),
                block: b,
                in_channels: in_ch,
                out_channels: w,
            });
            in_ch = w;
        }
    }
    out
}

pub fn layer_index(name: &str) -> Result<usize> {
    architecture(VGG19_WIDTHS)
        .iter()
        .position(|l| l.name == name)
        .ok_or_else(|| Error::UnknownLayer(name.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Average,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub name: String,
    /// `(out_channels, in_channels, 3, 3)`
    pub kernel: Array4<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VggWeights<T = f32> {
    widths: [usize; 5],
    layers: Vec<ConvLayer<T>>,
    mean_rgb: [f64; 3],
}

impl<T: Real> VggWeights<T> {
    pub fn from_layers(widths: [usize; 5], layers: Vec<ConvLayer<T>>, mean_rgb: [f64; 3]) -> Result<Self> {
        let arch = architecture(widths);
        if layers.len() != arch.len() {
            return Err(Error::Shape(format!(
                "expected {} conv layers, got {}",
                arch.len(),
                layers.len()
            )));
        }
        for (l, info) in layers.iter().zip(&arch) {
            if l.name != info.name {
                return Err(Error::Shape(format!("layer {} out of order (expected {})", l.name, info.name)));
            }
            let want = (info.out_channels, info.in_channels, 3, 3);
            if l.kernel.dim() != want || l.bias.len() != info.out_channels {
                return Err(Error::Shape(format!(
                    "{}: kernel {:?} / bias {} do not match {:?}",
                    l.name,
                    l.kernel.dim(),
                    l.bias.len(),
                    want
                )));
            }
        }
        Ok(Self {
            widths,
            layers,
            mean_rgb,
        })
    }

    /// Seeded He-uniform kernels with zero biases. Stands in for pretrained
    /// weights in tests and offline demos; `widths` may be shrunk for tiny
    /// gradient-check networks.
    pub fn seeded(widths: [usize; 5], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = architecture(widths)
            .into_iter()
            .map(|info| {
                let fan_in = info.in_channels * 9;
                let bound = (6.0 / fan_in as f64).sqrt();
                ConvLayer {
                    kernel: Array4::from_shape_fn((info.out_channels, info.in_channels, 3, 3), |_| {
                        T::of(rng.random_range(-bound..bound))
                    }),
                    bias: Array1::zeros(info.out_channels),
                    name: info.name,
                }
            })
            .collect();
        Self {
            widths,
            layers,
            mean_rgb: VGG_MEAN_RGB,
        }
    }

    pub fn zeros(widths: [usize; 5]) -> Self {
        let layers = architecture(widths)
            .into_iter()
            .map(|info| ConvLayer {
                kernel: Array4::zeros((info.out_channels, info.in_channels, 3, 3)),
                bias: Array1::zeros(info.out_channels),
                name: info.name,
            })
            .collect();
        Self {
            widths,
            layers,
            mean_rgb: VGG_MEAN_RGB,
        }
    }

    pub fn widths(&self) -> [usize; 5] {
        self.widths
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&ConvLayer<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        self.mean_rgb
    }

    pub fn cast<U: Real>(&self) -> VggWeights<U> {
        VggWeights {
            widths: self.widths,
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    name: l.name.clone(),
                    kernel: l.kernel.mapv(|v| U::of(v.to_f64())),
                    bias: l.bias.mapv(|v| U::of(v.to_f64())),
                })
                .collect(),
            mean_rgb: self.mean_rgb,
        }
    }

    /// `[0, 1]` RGB to the network's input convention: `255 * v - mean[c]`.
    pub fn preprocess(&self, raster: &Raster<T>) -> Result<Raster<T>> {
        check_rgb(raster)?;
        let mut a = raster.view().to_owned();
        for mut px in a.rows_mut() {
            for (c, v) in px.iter_mut().enumerate() {
                *v = *v * T::of(255.0) - T::of(self.mean_rgb[c]);
            }
        }
        Raster::from_array(a)
    }

    /// Inverse of [`VggWeights::preprocess`] (no clamping).
    pub fn unpreprocess(&self, raster: &Raster<T>) -> Result<Raster<T>> {
        check_rgb(raster)?;
        let mut a = raster.view().to_owned();
        for mut px in a.rows_mut() {
            for (c, v) in px.iter_mut().enumerate() {
                *v = (*v + T::of(self.mean_rgb[c])) / T::of(255.0);
            }
        }
        Raster::from_array(a)
    }

    /// Write as a safetensors container (`<layer>.weight`, `<layer>.bias`,
    /// f32) with the preprocessing means in the metadata.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for l in &self.layers {
            let to_bytes = |it: &mut dyn Iterator<Item = T>| -> Vec<u8> {
                it.flat_map(|v| (v.to_f64() as f32).to_le_bytes()).collect()
            };
            buffers.push((
                format!("{}.weight", l.name),
                l.kernel.shape().to_vec(),
                to_bytes(&mut l.kernel.iter().copied()),
            ));
            buffers.push((
                format!("{}.bias", l.name),
                vec![l.bias.len()],
                to_bytes(&mut l.bias.iter().copied()),
            ));
        }
        let views: Vec<(String, TensorView<'_>)> = buffers
            .iter()
            .map(|(n, shape, data)| {
                (
                    n.clone(),
                    TensorView::new(Dtype::F32, shape.clone(), data).expect("consistent tensor view"),
                )
            })
            .collect();
        let mean = self.mean_rgb.map(|m| m.to_string()).join(",");
        let metadata = std::collections::HashMap::from([
            ("format".to_string(), "artmap-vgg19".to_string()),
            ("channel_order".to_string(), "rgb".to_string()),
            ("mean_rgb".to_string(), mean),
        ]);
        safetensors::serialize_to_file(views, &Some(metadata), path).map_err(|e| Error::format(
            "weights",
            path,
            e.to_string(),
        ))
    }
}

fn check_rgb<T: Real>(raster: &Raster<T>) -> Result<()> {
    if raster.channels() != 3 {
        return Err(Error::Shape(format!(
            "VGG input must have 3 channels, got {}",
            raster.channels()
        )));
    }
    Ok(())
}

/// Load canonical VGG-19 conv weights after verifying the file checksum.
pub fn load_vgg_weights(path: impl AsRef<Path>, expected_checksum: &str) -> Result<VggWeights<f32>> {
    let path = path.as_ref();
    checksum::verify_file(path, expected_checksum)?;
    load_vgg_weights_unverified(path)
}

/// Load canonical VGG-19 conv weights without a checksum gate.
pub fn load_vgg_weights_unverified(path: impl AsRef<Path>) -> Result<VggWeights<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |r: String| Error::format("weights", path, r);
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let mean_rgb = match header.metadata().as_ref().and_then(|m| m.get("mean_rgb")) {
        Some(s) => {
            let v: Vec<f64> = s
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("mean_rgb: {e}")))?;
            <[f64; 3]>::try_from(v).map_err(|_| bad("mean_rgb needs 3 values".into()))?
        }
        None => VGG_MEAN_RGB,
    };
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let read = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let t = st.tensor(name).map_err(|_| Error::MissingTensor(name.to_string()))?;
        if t.shape() != shape {
            return Err(Error::Shape(format!(
                "shape mismatch for {name}: expected {shape:?}, found {:?}",
                t.shape()
            )));
        }
        let data = t.data();
        let vals: Vec<f32> = match t.dtype() {
            Dtype::F32 => data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
                .collect(),
            other => return Err(bad(format!("{name}: unsupported dtype {other:?}"))),
        };
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("{name}: non-finite values")));
        }
        Ok(vals)
    };
    let mut layers = Vec::with_capacity(NUM_CONV_LAYERS);
    for info in architecture(VGG19_WIDTHS) {
        let kshape = [info.out_channels, info.in_channels, 3, 3];
        let kernel = Array4::from_shape_vec(kshape, read(&format!("{}.weight", info.name), &kshape)?)
            .expect("shape checked");
        let bias = Array1::from(read(&format!("{}.bias", info.name), &[info.out_channels])?);
        layers.push(ConvLayer {
            name: info.name,
            kernel,
            bias,
        });
    }
    VggWeights::from_layers(VGG19_WIDTHS, layers, mean_rgb)
}

/// Named `(channels, height, width)` activations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureActivations<T> {
    layers: BTreeMap<String, Array3<T>>,
}

impl<T: Real> FeatureActivations<T> {
    pub fn new() -> Self {
        Self {
            layers: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array3<T>> {
        self.layers.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array3<T>) {
        self.layers.insert(name.into(), value);
    }

    /// Adds into an existing entry, or inserts.
    pub fn accumulate(&mut self, name: &str, value: Array3<T>) {
        match self.layers.get_mut(name) {
            Some(v) => *v += &value,
            None => {
                self.layers.insert(name.to_string(), value);
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array3<T>)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Intermediate state of a forward pass needed for backpropagation.
pub struct Tape<T> {
    input_dims: (usize, usize),
    /// Post-ReLU output of each executed conv layer.
    activations: Vec<Array3<T>>,
    /// Input of each executed pooling stage (kept for max-pool routing).
    pool_inputs: Vec<Array3<T>>,
}

/// Weights plus the pooling rule; the feature extractor proper.
#[derive(Debug, Clone)]
pub struct VggNet<T = f32> {
    pub weights: VggWeights<T>,
    pub pooling: Pooling,
}

impl<T: Real> VggNet<T> {
    pub fn new(weights: VggWeights<T>, pooling: Pooling) -> Self {
        Self { weights, pooling }
    }

    /// Smallest square input side for which every named layer is reachable
    /// (each pooling stage before it sees at least 2 pixels).
    pub fn min_input_side(names: &[&str]) -> Result<usize> {
        let mut deepest = 0;
        for n in names {
            deepest = deepest.max(architecture(VGG19_WIDTHS)[layer_index(n)?].block);
        }
        Ok(1 << deepest)
    }

    fn plan(&self, names: &[&str], h: usize, w: usize) -> Result<usize> {
        let mut last = 0;
        for n in names {
            last = last.max(layer_index(n)?);
        }
        let block = architecture(self.weights.widths)[last].block;
        let (mut hh, mut ww) = (h, w);
        for _ in 0..block {
            if hh < 2 || ww < 2 {
                return Err(Error::Shape(format!(
                    "input {h}x{w} too small to reach layer {}",
                    architecture(self.weights.widths)[last].name
                )));
            }
            hh /= 2;
            ww /= 2;
        }
        Ok(last)
    }

    /// Post-ReLU activations of exactly the requested layers.
    pub fn forward_features(&self, image: &Raster<T>, layers: &[&str]) -> Result<FeatureActivations<T>> {
        Ok(self.forward_with_tape(image, layers)?.0)
    }

    pub fn forward_with_tape(&self, image: &Raster<T>, layers: &[&str]) -> Result<(FeatureActivations<T>, Tape<T>)> {
        check_rgb(image)?;
        if layers.is_empty() {
            return Err(Error::InvalidArgument("no layers requested".into()));
        }
        let (h, w, _) = image.dims();
        let last = self.plan(layers, h, w)?;
        let arch = architecture(self.weights.widths);
        let mut x = hwc_to_chw(image.view());
        let mut tape = Tape {
            input_dims: (h, w),
            activations: Vec::with_capacity(last + 1),
            pool_inputs: Vec::new(),
        };
        for (i, info) in arch.iter().enumerate().take(last + 1) {
            if i > 0 && arch[i - 1].block != info.block {
                let pooled = pool_forward(&x, self.pooling);
                tape.pool_inputs.push(std::mem::replace(&mut x, pooled));
            }
            let y = conv_relu(&x, &self.weights.layers[i]);
            tape.activations.push(y.clone());
            x = y;
        }
        let mut feats = FeatureActivations::new();
        for n in layers {
            let idx = layer_index(n)?;
            feats.insert(*n, tape.activations[idx].clone());
        }
        Ok((feats, tape))
    }

    /// Gradient of `sum_l <upstream_l, activation_l>` with respect to the
    /// input pixels, as a `(height, width, 3)` raster.
    pub fn backward_from_tape(&self, tape: &Tape<T>, upstream: &FeatureActivations<T>) -> Result<Raster<T>> {
        let arch = architecture(self.weights.widths);
        let mut injected = vec![None; tape.activations.len()];
        for (name, g) in upstream.iter() {
            let idx = layer_index(name)?;
            let act = tape
                .activations
                .get(idx)
                .ok_or_else(|| Error::Shape(format!("upstream for {name} beyond the forward pass")))?;
            if g.dim() != act.dim() {
                return Err(Error::Shape(format!(
                    "upstream for {name} has shape {:?}, activation is {:?}",
                    g.dim(),
                    act.dim()
                )));
            }
            injected[idx] = Some(g);
        }
        let last = tape.activations.len() - 1;
        let mut grad: Array3<T> = Array3::zeros(tape.activations[last].dim());
        let mut pool_idx = tape.pool_inputs.len();
        for i in (0..=last).rev() {
            if let Some(g) = injected[i] {
                grad += g;
            }
            grad.zip_mut_with(&tape.activations[i], |g, &a| {
                if a <= T::zero() {
                    *g = T::zero();
                }
            });
            grad = conv_input_grad(&grad, &self.weights.layers[i]);
            if i > 0 && arch[i - 1].block != arch[i].block {
                pool_idx -= 1;
                grad = pool_backward(&grad, &tape.pool_inputs[pool_idx], self.pooling);
            }
        }
        debug_assert_eq!((grad.dim().1, grad.dim().2), tape.input_dims);
        Raster::from_array(chw_to_hwc(grad))
    }

    pub fn backward_to_input(&self, image: &Raster<T>, upstream: &FeatureActivations<T>) -> Result<Raster<T>> {
        let names: Vec<&str> = upstream.names().collect();
        let (_, tape) = self.forward_with_tape(image, &names)?;
        self.backward_from_tape(&tape, upstream)
    }
}

fn hwc_to_chw<T: Real>(a: ArrayView3<T>) -> Array3<T> {
    a.permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
}

fn chw_to_hwc<T: Real>(a: Array3<T>) -> Array3<T> {
    a.permuted_axes([1, 2, 0]).as_standard_layout().into_owned()
}

/// `(C, H, W)` to the `(C*9, H*W)` patch matrix of a 3x3, pad-1, stride-1 conv.
fn im2col<T: Real>(x: &Array3<T>) -> Array2<T> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<T>::zeros((c * 9, h * w));
    let src = x.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut dst[((ch * 9) + ky * 3 + kx) * h * w..][..h * w];
                let x_lo = 1usize.saturating_sub(kx);
                let x_hi = (w + 1 - kx).min(w);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx_lo = x_lo + kx - 1;
                    let n = x_hi.saturating_sub(x_lo);
                    row[y * w + x_lo..y * w + x_lo + n]
                        .copy_from_slice(&plane[sy * w + sx_lo..sy * w + sx_lo + n]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(cols: &Array2<T>, c: usize, h: usize, w: usize) -> Array3<T> {
    let mut x = Array3::<T>::zeros((c, h, w));
    let src = cols.as_slice().expect("standard layout");
    let dst = x.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &src[((ch * 9) + ky * 3 + kx) * h * w..][..h * w];
                let x_lo = 1usize.saturating_sub(kx);
                let x_hi = (w + 1 - kx).min(w);
                let n = x_hi.saturating_sub(x_lo);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx_lo = x_lo + kx - 1;
                    let out = &mut plane[sy * w + sx_lo..sy * w + sx_lo + n];
                    for (o, &v) in out.iter_mut().zip(&row[y * w + x_lo..y * w + x_lo + n]) {
                        *o += v;
                    }
                }
            }
        }
    }
    x
}

fn kernel_matrix<T: Real>(layer: &ConvLayer<T>) -> ndarray::ArrayView2<'_, T> {
    let (o, i, _, _) = layer.kernel.dim();
    layer
        .kernel
        .view()
        .into_shape_with_order((o, i * 9))
        .expect("kernel is standard layout")
}

fn conv_relu<T: Real>(x: &Array3<T>, layer: &ConvLayer<T>) -> Array3<T> {
    let (_, h, w) = x.dim();
    let cols = im2col(x);
    let mut y = kernel_matrix(layer).dot(&cols);
    for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(layer.bias.iter()) {
        row.mapv_inplace(|v| (v + b).max(T::zero()));
    }
    let o = y.nrows();
    y.into_shape_with_order((o, h, w)).expect("conv output reshape")
}

/// Input gradient of a conv given the gradient at its pre-activation.
fn conv_input_grad<T: Real>(g: &Array3<T>, layer: &ConvLayer<T>) -> Array3<T> {
    let (o, h, w) = g.dim();
    let g2 = g.view().into_shape_with_order((o, h * w)).expect("standard layout");
    let cols = kernel_matrix(layer).t().dot(&g2);
    col2im(&cols, layer.kernel.dim().1, h, w)
}

fn pool_forward<T: Real>(x: &Array3<T>, pooling: Pooling) -> Array3<T> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<T>::zeros((c, oh, ow));
    let quarter = T::of(0.25);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let win = x.slice(s![ch, 2 * y..2 * y + 2, 2 * xx..2 * xx + 2]);
                out[[ch, y, xx]] = match pooling {
                    Pooling::Average => (win[[0, 0]] + win[[0, 1]] + win[[1, 0]] + win[[1, 1]]) * quarter,
                    Pooling::Max => win.iter().copied().fold(T::neg_infinity(), T::max),
                };
            }
        }
    }
    out
}

fn pool_backward<T: Real>(g: &Array3<T>, input: &Array3<T>, pooling: Pooling) -> Array3<T> {
    let (c, h, w) = input.dim();
    let (_, oh, ow) = g.dim();
    let mut out = Array3::<T>::zeros((c, h, w));
    let quarter = T::of(0.25);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let gv = g[[ch, y, xx]];
                match pooling {
                    Pooling::Average => {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                out[[ch, 2 * y + dy, 2 * xx + dx]] += gv * quarter;
                            }
                        }
                    }
                    Pooling::Max => {
                        let mut best = (0, 0);
                        let mut best_v = T::neg_infinity();
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let v = input[[ch, 2 * y + dy, 2 * xx + dx]];
                                if v > best_v {
                                    best_v = v;
                                    best = (dy, dx);
                                }
                            }
                        }
                        out[[ch, 2 * y + best.0, 2 * xx + best.1]] += gv;
                    }
                }
            }
        }
    }
    out
}
