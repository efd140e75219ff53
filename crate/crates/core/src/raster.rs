//! Real-valued pixel grids, label maps, and the image I/O shared by every stage.
//!
//! A [`Raster`] stores pixels row-major as `(height, width, channels)` in RGB
//! order. Values of displayable images are nominally in `[0, 1]`; after
//! normalization they are unbounded but always finite. Quantization to 8 bits
//! happens only in [`save_image`].

use std::path::Path;

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T = f32> {
    data: Array3<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMethod {
    Nearest,
    #[default]
    Bilinear,
}

impl<T: Real> Raster<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::InvalidRaster(format!(
                "data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        let data = Array3::from_shape_vec((height, width, channels), data)
            .map_err(|e| Error::InvalidRaster(e.to_string()))?;
        Self::from_array(data)
    }

    /// Wraps an `(height, width, channels)` array after checking the raster invariants.
    pub fn from_array(data: Array3<T>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidRaster(format!("zero dimension {h}x{w}x{c}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRaster("non-finite pixel value".into()));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    /// Callers guarantee non-zero dims and finite values.
    pub(crate) fn from_array_unchecked(data: Array3<T>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self {
            data: data.as_standard_layout().into_owned(),
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Result<Self> {
        Self::from_array(Array3::from_elem((height, width, channels), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn view(&self) -> ArrayView3<'_, T> {
        self.data.view()
    }

    pub fn into_array(self) -> Array3<T> {
        self.data
    }

    /// Row-major `(y, x, c)` samples.
    pub fn as_slice(&self) -> &[T] {
        self.data.as_slice().expect("raster storage is standard layout")
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[[y, x, c]]
    }

    pub fn cast<U: Real>(&self) -> Raster<U> {
        Raster {
            data: self.data.mapv(|v| U::of(v.to_f64())),
        }
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    pub fn max_abs_diff(&self, other: &Raster<T>) -> Option<T> {
        if self.dims() != other.dims() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())),
        )
    }

    pub fn resize(&self, new_height: usize, new_width: usize, method: ResizeMethod) -> Result<Self> {
        if new_height == 0 || new_width == 0 {
            return Err(Error::InvalidArgument(format!(
                "resize target {new_height}x{new_width} must be positive"
            )));
        }
        let (h, w, c) = self.dims();
        if (h, w) == (new_height, new_width) {
            return Ok(self.clone());
        }
        let sy = h as f64 / new_height as f64;
        let sx = w as f64 / new_width as f64;
        let mut out = Array3::<T>::zeros((new_height, new_width, c));
        match method {
            ResizeMethod::Nearest => {
                for oy in 0..new_height {
                    let y = (((oy as f64 + 0.5) * sy).floor() as usize).min(h - 1);
                    for ox in 0..new_width {
                        let x = (((ox as f64 + 0.5) * sx).floor() as usize).min(w - 1);
                        for ch in 0..c {
                            out[[oy, ox, ch]] = self.data[[y, x, ch]];
                        }
                    }
                }
            }
            ResizeMethod::Bilinear => {
                let taps = |o: usize, scale: f64, n: usize| {
                    let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(n - 1);
                    (i0, i1, s - i0 as f64)
                };
                for oy in 0..new_height {
                    let (y0, y1, fy) = taps(oy, sy, h);
                    for ox in 0..new_width {
                        let (x0, x1, fx) = taps(ox, sx, w);
                        for ch in 0..c {
                            let a = self.data[[y0, x0, ch]].to_f64();
                            let b = self.data[[y0, x1, ch]].to_f64();
                            let cc = self.data[[y1, x0, ch]].to_f64();
                            let d = self.data[[y1, x1, ch]].to_f64();
                            let top = a + fx * (b - a);
                            let bottom = cc + fx * (d - cc);
                            out[[oy, ox, ch]] = T::of(top + fy * (bottom - top));
                        }
                    }
                }
            }
        }
        Ok(Self::from_array_unchecked(out))
    }

    /// `out[p, c] = (in[p, c] - mean[c]) / std[c]`.
    pub fn normalize(&self, mean: &[T], std: &[T]) -> Result<Self> {
        self.check_channel_stats(mean, std)?;
        let mut out = self.data.clone();
        for mut px in out.rows_mut() {
            for (c, v) in px.iter_mut().enumerate() {
                *v = (*v - mean[c]) / std[c];
            }
        }
        Self::from_array(out)
    }

    /// Inverse of [`Raster::normalize`].
    pub fn denormalize(&self, mean: &[T], std: &[T]) -> Result<Self> {
        self.check_channel_stats(mean, std)?;
        let mut out = self.data.clone();
        for mut px in out.rows_mut() {
            for (c, v) in px.iter_mut().enumerate() {
                *v = *v * std[c] + mean[c];
            }
        }
        Self::from_array(out)
    }

    fn check_channel_stats(&self, mean: &[T], std: &[T]) -> Result<()> {
        let c = self.channels();
        if mean.len() != c || std.len() != c {
            return Err(Error::Shape(format!(
                "mean/std lengths ({}, {}) must equal channel count {c}",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|&s| !(s > T::zero())) {
            return Err(Error::InvalidArgument("std entries must be > 0".into()));
        }
        Ok(())
    }

    pub fn clamp_unit(&self) -> Self {
        Self::from_array_unchecked(self.data.mapv(|v| v.max(T::zero()).min(T::one())))
    }

    /// Appends the `window x window` neighborhood centered at `(y, x)` to `out`,
    /// row-major then channel, with reflect padding at the borders.
    pub fn window_feature(&self, y: usize, x: usize, window: usize, out: &mut Vec<T>) {
        let (h, w, c) = self.dims();
        let r = (window / 2) as isize;
        for dy in -r..=r {
            let yy = reflect_index(y as isize + dy, h);
            for dx in -r..=r {
                let xx = reflect_index(x as isize + dx, w);
                for ch in 0..c {
                    out.push(self.data[[yy, xx, ch]]);
                }
            }
        }
    }
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Decode a PNG or JPEG file into an RGB raster with values in `[0, 1]`.
///
/// Alpha is dropped and grayscale is replicated to three channels.
pub fn load_image(path: impl AsRef<Path>) -> Result<Raster<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = image::guess_format(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            reason: format!("unsupported format {format:?}"),
        });
    }
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            reason: "zero-dimension image".into(),
        });
    }
    let data: Vec<f32> = match img {
        image::DynamicImage::ImageRgb8(_)
        | image::DynamicImage::ImageRgba8(_)
        | image::DynamicImage::ImageLuma8(_)
        | image::DynamicImage::ImageLumaA8(_) => img
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 255.0)
            .collect(),
        other => other.to_rgb32f().into_raw(),
    };
    Raster::new(h, w, 3, data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_8bit(raster: &Raster<f32>) -> Vec<u8> {
    raster.as_slice().iter().map(|&v| quantize(v)).collect()
}

/// Encode a 1- or 3-channel raster. The format follows the file extension
/// (PNG unless the extension is `.jpg`/`.jpeg`).
pub fn save_image(raster: &Raster<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = raster.dims();
    let encode_err = |reason: String| Error::Encode {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = to_8bit(raster);
    let dynimg = match c {
        1 => image::GrayImage::from_raw(w as u32, h as u32, bytes).map(image::DynamicImage::ImageLuma8),
        3 => image::RgbImage::from_raw(w as u32, h as u32, bytes).map(image::DynamicImage::ImageRgb8),
        _ => return Err(encode_err(format!("unsupported channel count {c}"))),
    }
    .ok_or_else(|| encode_err("buffer size mismatch".into()))?;
    let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(ext) if ext == "jpg" || ext == "jpeg" => image::ImageFormat::Jpeg,
        _ => image::ImageFormat::Png,
    };
    dynimg
        .save_with_format(path, format)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => encode_err(other.to_string()),
        })
}

/// Per-pixel category indices; `0 = land`, `1 = water` in this pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_categories: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_categories: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || num_categories == 0 {
            return Err(Error::InvalidArgument("label map dims must be positive".into()));
        }
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_categories) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} >= number of categories {num_categories}"
            )));
        }
        Ok(Self {
            height,
            width,
            num_categories,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, num_categories: usize, label: u8) -> Result<Self> {
        Self::new(height, width, num_categories, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per category.
    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_categories];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}
