//! Multilayer perceptron pixel classifier: ReLU hidden layers, a two-node
//! softmax output, and mini-batch SGD on the mean cross-entropy.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eurosat::SampleSet;
use crate::raster::{reflect_index, LabelMap, Raster};

pub const NUM_CLASSES: usize = 2;
const PROB_FLOOR: f64 = 1e-12;

/// Layer sizes `[D, h1, .., hL, 2]` with one `(fan_out x fan_in)` weight
/// matrix and one bias vector per layer. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

fn check_layer_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 layer sizes (input, hidden, output), got {}",
            layer_sizes.len()
        )));
    }
    if *layer_sizes.last().unwrap() != NUM_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "final layer must have {NUM_CLASSES} nodes, got {}",
            layer_sizes.last().unwrap()
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::InvalidArgument("layer sizes must be positive".into()));
    }
    Ok(())
}

impl MlpParams {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        check_layer_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..=bound)));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        check_layer_sizes(layer_sizes)?;
        let weights = layer_sizes
            .windows(2)
            .map(|p| Array2::zeros((p[1], p[0])))
            .collect();
        let biases = layer_sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parts(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Shape("need one bias per weight matrix".into()));
        }
        let mut layer_sizes = vec![weights[0].ncols()];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != *layer_sizes.last().unwrap() || b.len() != w.nrows() {
                return Err(Error::Shape(format!("layer {i} does not chain")));
            }
            layer_sizes.push(w.nrows());
        }
        check_layer_sizes(&layer_sizes)?;
        Ok(Self {
            layer_sizes,
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    /// All parameters flattened in layer order (weights then bias per layer).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.flat().len() {
            return Err(Error::Shape("flat parameter length mismatch".into()));
        }
        let mut it = values.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    fn check_input(&self, dim: usize) -> Result<()> {
        if dim != self.input_dim() {
            return Err(Error::Shape(format!(
                "feature dim {dim} != network input {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<[f64; 2]> {
        self.check_input(x.len())?;
        let mut a = Array1::from(x.to_vec());
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            a = w.dot(&a) + b;
            if i < last {
                a.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok([a[0], a[1]])
    }

    /// Class probabilities `(land, water)`.
    pub fn forward(&self, x: &[f64]) -> Result<[f64; 2]> {
        Ok(softmax2(self.logits(x)?))
    }

    /// Batch forward keeping pre-activations and activations for backprop.
    fn forward_batch(&self, x: ArrayView2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let mut acts = vec![x.to_owned()];
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts.last().unwrap().dot(&w.t()) + b;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
                acts.push(z);
            } else {
                for mut row in z.rows_mut() {
                    let p = softmax2([row[0], row[1]]);
                    row[0] = p[0];
                    row[1] = p[1];
                }
                return (acts, z);
            }
        }
        unreachable!("network has at least one layer")
    }

    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        Ok(self.forward_batch(x).1)
    }

    /// Gradient of the batch-mean cross-entropy with respect to every
    /// weight and bias.
    pub fn backward(&self, features: ArrayView2<f64>, labels: &[u8]) -> Result<MlpParams> {
        self.check_input(features.ncols())?;
        if features.nrows() == 0 || features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l as usize >= NUM_CLASSES) {
            return Err(Error::InvalidArgument("label out of range".into()));
        }
        let n = labels.len() as f64;
        let (acts, probs) = self.forward_batch(features);
        let mut delta = probs;
        for (mut row, &l) in delta.rows_mut().into_iter().zip(labels) {
            row[l as usize] -= 1.0;
        }
        delta /= n;

        let layers = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); layers];
        let mut gb = vec![Array1::zeros(0); layers];
        for i in (0..layers).rev() {
            gw[i] = delta.t().dot(&acts[i]);
            gb[i] = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut d = delta.dot(&self.weights[i]);
                d.zip_mut_with(&acts[i], |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = d;
            }
        }
        Ok(MlpParams {
            layer_sizes: self.layer_sizes.clone(),
            weights: gw,
            biases: gb,
        })
    }

    /// `p' = p - lr * g` for every parameter.
    pub fn sgd_step(&self, grads: &MlpParams, learning_rate: f64) -> Result<MlpParams> {
        if grads.layer_sizes != self.layer_sizes {
            return Err(Error::Shape(format!(
                "gradient layers {:?} != parameter layers {:?}",
                grads.layer_sizes, self.layer_sizes
            )));
        }
        let mut out = self.clone();
        for (w, g) in out.weights.iter_mut().zip(&grads.weights) {
            w.scaled_add(-learning_rate, g);
        }
        for (b, g) in out.biases.iter_mut().zip(&grads.biases) {
            b.scaled_add(-learning_rate, g);
        }
        Ok(out)
    }

    /// Model container: magic `ARTMAPML`, version u16, layer count u16,
    /// layer sizes as u32, then per layer the row-major weights followed by
    /// the biases, all little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_sizes.len() as u16).to_le_bytes());
        for &s in &self.layer_sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for v in self.flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: String| Error::format("model", path, r);
        if bytes.len() < 12 || &bytes[..8] != MODEL_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != MODEL_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
        let sizes_end = 12 + 4 * count;
        if bytes.len() < sizes_end {
            return Err(bad("truncated layer table".into()));
        }
        let sizes: Vec<usize> = bytes[12..sizes_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let mut params = Self::zeros(&sizes).map_err(|e| bad(e.to_string()))?;
        let n = params.flat().len();
        if bytes.len() != sizes_end + 8 * n {
            return Err(bad(format!(
                "expected {} parameter bytes, found {}",
                8 * n,
                bytes.len() - sizes_end
            )));
        }
        let values: Vec<f64> = bytes[sizes_end..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter".into()));
        }
        params.set_flat(&values)?;
        Ok(params)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

const MODEL_MAGIC: &[u8; 8] = b"ARTMAPML";
const MODEL_VERSION: u16 = 1;

fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// `-ln(probs[label])` with the probability floored at `1e-12`.
pub fn cross_entropy(probs: [f64; 2], label: u8) -> f64 {
    -probs[label as usize].max(PROB_FLOOR).ln()
}

/// Index of the larger probability; ties go to land (0).
#[inline]
pub fn argmax2(p: [f64; 2]) -> u8 {
    u8::from(p[1] > p[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    #[default]
    HeUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_sizes: Vec<usize>,
    pub seed: u64,
    pub activation: Activation,
    pub init: Init,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 128,
            hidden_sizes: vec![64],
            seed: 0,
            activation: Activation::Relu,
            init: Init::HeUniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy (nats) over the epoch's mini-batches, sample-weighted.
    pub train_loss: f64,
    pub train_acc: f64,
    /// `None` when no validation samples were supplied.
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn to_matrix(set: &SampleSet) -> Array2<f64> {
    Array2::from_shape_fn((set.len(), set.feature_dim()), |(i, j)| set.row(i)[j] as f64)
}

pub fn accuracy(params: &MlpParams, set: &SampleSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let probs = params.predict_batch(to_matrix(set).view())?;
    let correct = probs
        .rows()
        .into_iter()
        .zip(set.labels())
        .filter(|(p, &l)| argmax2([p[0], p[1]]) == l)
        .count();
    Ok(correct as f64 / set.len() as f64)
}

/// Seeded-shuffle mini-batch SGD. Single-threaded and bit-deterministic for a
/// fixed config.
pub fn train(cfg: &TrainConfig, train_set: &SampleSet, val_set: &SampleSet) -> Result<(MlpParams, TrainReport)> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "learning_rate must be > 0 and batch_size >= 1".into(),
        ));
    }
    if !val_set.is_empty() && val_set.feature_dim() != train_set.feature_dim() {
        return Err(Error::Shape("train/val feature dims differ".into()));
    }
    let mut sizes = vec![train_set.feature_dim()];
    sizes.extend_from_slice(&cfg.hidden_sizes);
    sizes.push(NUM_CLASSES);
    let mut params = MlpParams::init(&sizes, cfg.seed)?;
    let mut report = TrainReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let x = to_matrix(train_set);
    let labels = train_set.labels();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let probs = params.forward_batch(xb.view()).1;
            loss_sum += probs
                .rows()
                .into_iter()
                .zip(&yb)
                .map(|(p, &l)| cross_entropy([p[0], p[1]], l))
                .sum::<f64>();
            let grads = params.backward(xb.view(), &yb)?;
            params = params.sgd_step(&grads, cfg.learning_rate)?;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: accuracy(&params, train_set)?,
            val_acc: if val_set.is_empty() {
                None
            } else {
                Some(accuracy(&params, val_set)?)
            },
        };
        log::info!(
            "epoch {} loss {:.5} train_acc {:.4} val_acc {:?}",
            record.epoch,
            record.train_loss,
            record.train_acc,
            record.val_acc
        );
        report.epochs.push(record);
    }
    Ok((params, report))
}

/// Label every pixel by the argmax of the classifier on its reflect-padded
/// `window x window` neighborhood. Rows are processed in parallel; the
/// result does not depend on the schedule.
pub fn segment(params: &MlpParams, raster: &Raster<f32>, window: usize) -> Result<LabelMap> {
    if raster.channels() != 3 {
        return Err(Error::Shape(format!("segment expects 3 channels, got {}", raster.channels())));
    }
    if window.is_multiple_of(2) || 3 * window * window != params.input_dim() {
        return Err(Error::Shape(format!(
            "window {window} gives feature dim {} but the model expects {}",
            3 * window * window,
            params.input_dim()
        )));
    }
    let (h, w, _) = raster.dims();
    let mut labels = vec![0u8; h * w];
    labels
        .par_chunks_mut(w)
        .enumerate()
        .try_for_each(|(y, row)| -> Result<()> {
            let mut f32buf = Vec::with_capacity(params.input_dim());
            let mut feat = vec![0.0f64; params.input_dim()];
            for (x, out) in row.iter_mut().enumerate() {
                f32buf.clear();
                raster.window_feature(y, x, window, &mut f32buf);
                for (d, s) in feat.iter_mut().zip(&f32buf) {
                    *d = *s as f64;
                }
                *out = argmax2(params.forward(&feat)?);
            }
            Ok(())
        })?;
    LabelMap::new(h, w, NUM_CLASSES, labels)
}

/// Replace each label by the most frequent label in its reflect-padded
/// `(2r+1)^2` neighborhood. Ties keep the center label when it is among the
/// most frequent, otherwise the lowest tied index wins.
pub fn majority_filter(labels: &LabelMap, radius: usize) -> LabelMap {
    if radius == 0 {
        return labels.clone();
    }
    let (h, w, k) = (labels.height(), labels.width(), labels.num_categories());
    let r = radius as isize;
    let mut out = vec![0u8; h * w];
    let mut counts = vec![0usize; k];
    for y in 0..h {
        for x in 0..w {
            counts.iter_mut().for_each(|c| *c = 0);
            for dy in -r..=r {
                let yy = reflect_index(y as isize + dy, h);
                for dx in -r..=r {
                    let xx = reflect_index(x as isize + dx, w);
                    counts[labels.get(yy, xx) as usize] += 1;
                }
            }
            let center = labels.get(y, x);
            let best = *counts.iter().max().unwrap();
            out[y * w + x] = if counts[center as usize] == best {
                center
            } else {
                counts.iter().position(|&c| c == best).unwrap() as u8
            };
        }
    }
    LabelMap::new(h, w, k, out).expect("filtered labels stay in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Plain nested-loop forward pass.
    fn loop_forward(p: &MlpParams, x: &[f64]) -> [f64; 2] {
        let mut a = x.to_vec();
        let n = p.weights().len();
        for (i, (w, b)) in p.weights().iter().zip(p.biases()).enumerate() {
            let mut z = vec![0.0; w.nrows()];
            for r in 0..w.nrows() {
                let mut s = b[r];
                for c in 0..w.ncols() {
                    s += w[[r, c]] * a[c];
                }
                z[r] = if i + 1 < n { s.max(0.0) } else { s };
            }
            a = z;
        }
        let denom = a[0].exp() + a[1].exp();
        [a[0].exp() / denom, a[1].exp() / denom]
    }

    #[test]
    fn init_contract() {
        let a = MlpParams::init(&[3, 4, 2], 11).unwrap();
        assert_eq!(a, MlpParams::init(&[3, 4, 2], 11).unwrap());
        assert_ne!(a, MlpParams::init(&[3, 4, 2], 12).unwrap());
        assert!(a.biases().iter().all(|b| b.iter().all(|&v| v == 0.0)));
        for (i, w) in a.weights().iter().enumerate() {
            let bound = (6.0 / a.layer_sizes()[i] as f64).sqrt();
            assert!(w.iter().all(|v| v.abs() <= bound));
            assert_eq!(w.dim(), (a.layer_sizes()[i + 1], a.layer_sizes()[i]));
        }
        assert!(MlpParams::init(&[3, 4, 3], 0).is_err());
        assert!(MlpParams::init(&[3, 2], 0).is_err());
    }

    #[test]
    fn forward_cases() {
        let z = MlpParams::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(z.forward(&[0.3, -1.0, 2.0]).unwrap(), [0.5, 0.5]);
        assert!(z.forward(&[1.0, 2.0]).is_err());

        let mut p = MlpParams::zeros(&[1, 1, 2]).unwrap();
        p.biases_mut()[1] = array![50.0, -50.0];
        let out = p.forward(&[0.0]).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-9 && out[1].abs() < 1e-9);

        let p = MlpParams::init(&[5, 7, 6, 2], 3).unwrap();
        for s in 0..20 {
            let x = rand_vec(5, s);
            let a = p.forward(&x).unwrap();
            let b = loop_forward(&p, &x);
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        assert!(cross_entropy([1.0 - 1e-15, 1e-15], 0) < 1e-12);
        assert!((cross_entropy([0.5, 0.5], 0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((cross_entropy([0.5, 0.5], 1) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(cross_entropy([1.0, 0.0], 1), -(1e-12f64).ln());
        for s in 0..10 {
            let p = rand_vec(1, s)[0].abs().clamp(0.01, 0.99);
            assert_eq!(cross_entropy([p, 1.0 - p], 0), -p.ln());
        }
    }

    #[test]
    fn zero_net_output_bias_gradient() {
        let z = MlpParams::zeros(&[3, 4, 2]).unwrap();
        let x = Array2::from_shape_vec((1, 3), vec![0.2, 0.4, 0.6]).unwrap();
        let g = z.backward(x.view(), &[1]).unwrap();
        assert_eq!(g.biases()[1], array![0.5, -0.5]);
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let p = MlpParams::init(&[3, 4, 2], 1).unwrap();
        let x = Array2::from_shape_vec((2, 3), rand_vec(6, 2)).unwrap();
        let g1 = p.backward(x.view(), &[0, 1]).unwrap();
        let xx = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let g2 = p.backward(xx.view(), &[0, 1, 0, 1]).unwrap();
        for (a, b) in g1.flat().iter().zip(g2.flat()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_bad_batches() {
        let p = MlpParams::init(&[3, 4, 2], 1).unwrap();
        let x = Array2::<f64>::zeros((2, 3));
        assert!(p.backward(x.view(), &[0]).is_err());
        assert!(p.backward(Array2::<f64>::zeros((0, 3)).view(), &[]).is_err());
        assert!(p.backward(Array2::<f64>::zeros((1, 4)).view(), &[0]).is_err());
    }

    #[test]
    fn sgd_step_cases() {
        let p = MlpParams::init(&[3, 4, 2], 4).unwrap();
        let g = MlpParams::init(&[3, 4, 2], 5).unwrap();
        assert_eq!(p.sgd_step(&g, 0.0).unwrap(), p);
        assert_eq!(p.sgd_step(&MlpParams::zeros(&[3, 4, 2]).unwrap(), 0.3).unwrap(), p);
        let s = p.sgd_step(&g, 0.25).unwrap();
        for ((a, b), c) in s.flat().iter().zip(p.flat()).zip(g.flat()) {
            assert_eq!(*a, b - 0.25 * c);
        }
        assert!(p.sgd_step(&MlpParams::zeros(&[3, 5, 2]).unwrap(), 0.1).is_err());
    }

    #[test]
    fn train_zero_epochs_and_determinism() {
        let feats: Vec<f32> = rand_vec(40, 9).into_iter().map(|v| v as f32).collect();
        let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let set = SampleSet::new(feats, labels, 2).unwrap();
        let empty = SampleSet::new(vec![], vec![], 2).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            hidden_sizes: vec![4],
            seed: 5,
            ..Default::default()
        };
        let (p, r) = train(&cfg, &set, &empty).unwrap();
        assert_eq!(p, MlpParams::init(&[2, 4, 2], 5).unwrap());
        assert!(r.epochs.is_empty());

        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..cfg
        };
        let (a, ra) = train(&cfg, &set, &set).unwrap();
        let (b, rb) = train(&cfg, &set, &set).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ra, rb);
        assert_eq!(ra.epochs.len(), 3);
        assert!(train(&cfg, &empty, &set).is_err());
    }

    #[test]
    fn report_json_keys() {
        let r = TrainReport {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                train_acc: 0.75,
                val_acc: None,
            }],
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let rec = &v[0];
        for k in ["epoch", "train_loss", "train_acc", "val_acc"] {
            assert!(rec.get(k).is_some(), "missing {k}");
        }
    }

    #[test]
    fn model_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = MlpParams::init(&[27, 64, 2], 8).unwrap();
        let path = dir.path().join("m.bin");
        p.write(&path).unwrap();
        assert_eq!(MlpParams::read(&path).unwrap(), p);
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..8], b"ARTMAPML");
        assert!(MlpParams::from_bytes(&bytes[..bytes.len() - 1], &path).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(MlpParams::from_bytes(&bad, &path).is_err());
    }

    fn land_biased(window: usize) -> MlpParams {
        let mut p = MlpParams::zeros(&[3 * window * window, 2, 2]).unwrap();
        p.biases_mut()[1] = array![1.0, 0.0];
        p
    }

    fn random_raster(h: usize, w: usize, seed: u64) -> Raster<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::new(h, w, 3, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn segment_constant_classifier_and_shape() {
        let r = random_raster(9, 13, 1);
        let m = segment(&land_biased(3), &r, 3).unwrap();
        assert_eq!((m.height(), m.width()), (9, 13));
        assert!(m.labels().iter().all(|&l| l == 0));
        assert!(segment(&land_biased(3), &r, 1).is_err());
        assert!(segment(&land_biased(3), &r, 2).is_err());
        let gray = Raster::filled(4, 4, 1, 0.5f32).unwrap();
        assert!(segment(&land_biased(1), &gray, 1).is_err());
    }

    #[test]
    fn segment_matches_per_pixel_oracle() {
        let r = random_raster(16, 16, 2);
        let p = MlpParams::init(&[27, 8, 2], 3).unwrap();
        let m = segment(&p, &r, 3).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let mut f = Vec::new();
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let yy = reflect_index(y as isize + dy, 16);
                        let xx = reflect_index(x as isize + dx, 16);
                        for c in 0..3 {
                            f.push(r.get(yy, xx, c) as f64);
                        }
                    }
                }
                let pr = loop_forward(&p, &f);
                let expect = if pr[1] > pr[0] { 1 } else { 0 };
                assert_eq!(m.get(y, x), expect);
            }
        }
    }

    #[test]
    fn segment_flips_when_output_rows_swap() {
        let r = random_raster(12, 12, 4);
        let p = MlpParams::init(&[27, 16, 2], 6).unwrap();
        let mut swapped = p.clone();
        let last = swapped.weights().len() - 1;
        let w = swapped.weights()[last].clone();
        let b = swapped.biases()[last].clone();
        swapped.weights_mut()[last].row_mut(0).assign(&w.row(1));
        swapped.weights_mut()[last].row_mut(1).assign(&w.row(0));
        swapped.biases_mut()[last] = array![b[1], b[0]];
        let a = segment(&p, &r, 3).unwrap();
        let s = segment(&swapped, &r, 3).unwrap();
        for (x, y) in a.labels().iter().zip(s.labels()) {
            assert_eq!(*x, 1 - *y);
        }
    }

    #[test]
    fn majority_filter_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = LabelMap::new(6, 5, 2, (0..30).map(|_| rng.random_range(0..2)).collect()).unwrap();
        assert_eq!(majority_filter(&m, 0), m);

        let mut labels = vec![0u8; 25];
        labels[12] = 1;
        let m = LabelMap::new(5, 5, 2, labels).unwrap();
        assert!(majority_filter(&m, 1).labels().iter().all(|&l| l == 0));
    }

    proptest::proptest! {
        #[test]
        fn forward_is_a_distribution(seed in 0u64..500, scale in 0.1f64..20.0) {
            let p = MlpParams::init(&[4, 6, 2], seed).unwrap();
            let x: Vec<f64> = rand_vec(4, seed + 1).into_iter().map(|v| v * scale).collect();
            let out = p.forward(&x).unwrap();
            proptest::prop_assert!((out[0] + out[1] - 1.0).abs() < 1e-9);
            proptest::prop_assert!(out[0] > 0.0 && out[1] > 0.0);
        }

        #[test]
        fn small_sgd_step_does_not_increase_loss(seed in 0u64..300, label in 0u8..2) {
            let p = MlpParams::init(&[3, 4, 2], seed).unwrap();
            let x = Array2::from_shape_vec((1, 3), rand_vec(3, seed + 7)).unwrap();
            let before = cross_entropy(p.forward(x.row(0).as_slice().unwrap()).unwrap(), label);
            let g = p.backward(x.view(), &[label]).unwrap();
            let q = p.sgd_step(&g, 1e-4).unwrap();
            let after = cross_entropy(q.forward(x.row(0).as_slice().unwrap()).unwrap(), label);
            proptest::prop_assert!(after <= before + 1e-15);
        }
    }
}
