//! Recombine per-category stylized rasters through a label map.

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{LabelMap, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompositeMode {
    #[default]
    Hard,
    Feather,
}

/// A label map plus one raster per category, indexed by label.
#[derive(Debug, Clone)]
pub struct CollageInput<'a> {
    labels: &'a LabelMap,
    stylized: Vec<&'a Raster<f32>>,
}

impl<'a> CollageInput<'a> {
    pub fn new(labels: &'a LabelMap, stylized: Vec<&'a Raster<f32>>) -> Result<Self> {
        let k = labels.num_categories();
        if stylized.len() != k {
            return Err(Error::Shape(format!(
                "expected {k} stylized rasters, got {}",
                stylized.len()
            )));
        }
        let channels = stylized[0].channels();
        for (i, r) in stylized.iter().enumerate() {
            if r.height() != labels.height() || r.width() != labels.width() || r.channels() != channels {
                return Err(Error::Shape(format!(
                    "stylized[{i}] is {}x{}x{}, label map is {}x{} with {channels} channels expected",
                    r.height(),
                    r.width(),
                    r.channels(),
                    labels.height(),
                    labels.width()
                )));
            }
        }
        if let Some(&bad) = labels.labels().iter().find(|&&l| l as usize >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} >= {k} categories")));
        }
        Ok(Self { labels, stylized })
    }

    pub fn labels(&self) -> &LabelMap {
        self.labels
    }

    pub fn stylized(&self) -> &[&'a Raster<f32>] {
        &self.stylized
    }
}

fn into_raster(h: usize, w: usize, c: usize, data: Vec<f32>) -> Raster<f32> {
    Raster::from_array_unchecked(Array3::from_shape_vec((h, w, c), data).expect("sized buffer"))
}

/// `out[p, c] = stylized[labels[p]][p, c]`.
pub fn compose(input: &CollageInput) -> Raster<f32> {
    let (h, w, c) = input.stylized[0].dims();
    let mut out = vec![0f32; h * w * c];
    out.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let src = input.stylized[input.labels.get(y, x) as usize];
            for ch in 0..c {
                row[x * c + ch] = src.get(y, x, ch);
            }
        }
    });
    into_raster(h, w, c, out)
}

/// Per-category blend weights: each indicator map box-averaged over the
/// `(2r+1)²` window (clipped at the raster edge), so weights sum to 1.
pub fn blend_weights(labels: &LabelMap, radius: usize) -> Vec<Array2<f64>> {
    let (h, w, k) = (labels.height(), labels.width(), labels.num_categories());
    // Summed-area table per category, with a zero border row/column.
    let mut sat = vec![Array2::<u32>::zeros((h + 1, w + 1)); k];
    for y in 0..h {
        for x in 0..w {
            let l = labels.get(y, x) as usize;
            for (cat, s) in sat.iter_mut().enumerate() {
                let v = s[[y, x + 1]] + s[[y + 1, x]] - s[[y, x]] + u32::from(cat == l);
                s[[y + 1, x + 1]] = v;
            }
        }
    }
    let mut weights = vec![Array2::<f64>::zeros((h, w)); k];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
            let counts: Vec<u32> = sat
                .iter()
                .map(|s| s[[y1, x1]] + s[[y0, x0]] - s[[y0, x1]] - s[[y1, x0]])
                .collect();
            let total: u32 = counts.iter().sum();
            for (cat, &n) in counts.iter().enumerate() {
                weights[cat][[y, x]] = f64::from(n) / f64::from(total);
            }
        }
    }
    weights
}

/// Convex blend of the sources with [`blend_weights`]. Radius 0 is [`compose`].
pub fn feathered_compose(input: &CollageInput, radius: usize) -> Raster<f32> {
    if radius == 0 {
        return compose(input);
    }
    let weights = blend_weights(input.labels, radius);
    let (h, w, c) = input.stylized[0].dims();
    let mut out = vec![0f32; h * w * c];
    out.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            if let Some(k) = weights.iter().position(|wk| wk[[y, x]] == 1.0) {
                for ch in 0..c {
                    row[x * c + ch] = input.stylized[k].get(y, x, ch);
                }
                continue;
            }
            for ch in 0..c {
                let v: f64 = weights
                    .iter()
                    .zip(&input.stylized)
                    .map(|(wk, s)| wk[[y, x]] * f64::from(s.get(y, x, ch)))
                    .sum();
                row[x * c + ch] = v as f32;
            }
        }
    });
    into_raster(h, w, c, out)
}

/// Check that every pixel of `collage` equals the source selected by its label.
pub fn verify_selection(collage: &Raster<f32>, input: &CollageInput) -> Result<()> {
    let (h, w, c) = collage.dims();
    if (h, w, c) != input.stylized[0].dims() {
        return Err(Error::Shape("collage dimensions differ from the sources".into()));
    }
    for y in 0..h {
        for x in 0..w {
            let k = input.labels.get(y, x) as usize;
            for ch in 0..c {
                let (got, want) = (collage.get(y, x, ch), input.stylized[k].get(y, x, ch));
                if got != want {
                    return Err(Error::InvalidRaster(format!(
                        "pixel ({y}, {x}, {ch}) is {got}, category {k} source has {want}"
                    )));
                }
            }
        }
    }
    Ok(())
}
