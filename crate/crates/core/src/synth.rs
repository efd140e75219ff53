//! Procedural imagery: the demo coastal scene, demo style images, and
//! EuroSAT-layout fixture patches. None of it is real satellite data.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eurosat::{EUROSAT_CATEGORIES, PATCH_SIZE};
use crate::raster::{save_image, Raster};

/// Mean RGB per EuroSAT category, in the same order as [`EUROSAT_CATEGORIES`].
const CATEGORY_COLORS: [[f32; 3]; 10] = [
    [0.56, 0.50, 0.36],
    [0.16, 0.30, 0.17],
    [0.36, 0.45, 0.26],
    [0.50, 0.49, 0.47],
    [0.57, 0.53, 0.51],
    [0.38, 0.52, 0.27],
    [0.46, 0.46, 0.30],
    [0.62, 0.56, 0.51],
    [0.20, 0.30, 0.45],
    [0.08, 0.18, 0.36],
];

/// Smooth band-limited noise in roughly `[-1, 1]`.
struct SmoothNoise {
    waves: Vec<(f32, f32, f32, f32)>,
}

impl SmoothNoise {
    fn new(rng: &mut ChaCha8Rng, count: usize, max_freq: f32) -> Self {
        let waves = (0..count)
            .map(|_| {
                (
                    rng.random_range(-max_freq..max_freq),
                    rng.random_range(-max_freq..max_freq),
                    rng.random_range(0.0..std::f32::consts::TAU),
                    1.0 / count as f32,
                )
            })
            .collect();
        Self { waves }
    }

    fn at(&self, y: f32, x: f32) -> f32 {
        self.waves
            .iter()
            .map(|&(fy, fx, phase, amp)| amp * (fy * y + fx * x + phase).sin())
            .sum::<f32>()
            * 1.5
    }
}

fn category_index(name: &str) -> Result<usize> {
    EUROSAT_CATEGORIES
        .iter()
        .position(|c| *c == name)
        .ok_or_else(|| Error::UnknownCategory(name.to_string()))
}

/// One 64x64 patch for `category`, textured around the category color.
pub fn synthetic_patch(category: &str, seed: u64) -> Result<Raster<f32>> {
    let idx = category_index(category)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = CATEGORY_COLORS[idx];
    let jitter: Vec<f32> = (0..3).map(|_| rng.random_range(-0.04..0.04)).collect();
    let noise = SmoothNoise::new(&mut rng, 6, 0.4);
    let river = (category == "River").then(|| (rng.random_range(16.0..48.0f32), rng.random_range(-0.5..0.5f32)));
    let s = PATCH_SIZE;
    let mut data = Vec::with_capacity(s * s * 3);
    for y in 0..s {
        for x in 0..s {
            let n = noise.at(y as f32, x as f32);
            let mut color = base;
            if let Some((offset, slope)) = river {
                let d = (x as f32 - offset - slope * y as f32).abs();
                if d > 6.0 {
                    color = CATEGORY_COLORS[2];
                }
            }
            for c in 0..3 {
                let v = color[c] + jitter[c] + 0.05 * n + rng.random_range(-0.03..0.03);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Raster::new(s, s, 3, data)
}

/// Write `per_category` PNG patches per category into `root/<Category>/`.
pub fn write_synthetic_dataset(root: impl AsRef<Path>, categories: &[&str], per_category: usize, seed: u64) -> Result<()> {
    let root = root.as_ref();
    for &cat in categories {
        let idx = category_index(cat)?;
        let dir = root.join(cat);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..per_category {
            let patch_seed = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((idx * 100_000 + i) as u64);
            let patch = synthetic_patch(cat, patch_seed)?;
            save_image(&patch, dir.join(format!("{cat}_{}.png", i + 1)))?;
        }
    }
    Ok(())
}

/// A coastline scene: textured land on the left, sea on the right, with a
/// thin beach between them.
pub fn coastal_scene(size: usize, seed: u64) -> Result<Raster<f32>> {
    if size < 16 {
        return Err(Error::InvalidArgument("coastal scene needs size >= 16".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coast = SmoothNoise::new(&mut rng, 4, 0.08);
    let zones = SmoothNoise::new(&mut rng, 5, 0.06);
    let fine = SmoothNoise::new(&mut rng, 8, 0.5);
    let land_palette = [CATEGORY_COLORS[1], CATEGORY_COLORS[5], CATEGORY_COLORS[0], CATEGORY_COLORS[7]];
    let sea = CATEGORY_COLORS[9];
    let beach = [0.78, 0.72, 0.56];
    let s = size as f32;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (yf, xf) = (y as f32, x as f32);
            let shore = 0.55 * s + 0.12 * s * coast.at(yf, 0.0);
            let d = xf - shore;
            let f = fine.at(yf, xf);
            let color = if d > 1.5 {
                let depth = (d / (0.4 * s)).min(1.0);
                [sea[0] - 0.03 * depth, sea[1] - 0.04 * depth, sea[2] + 0.04 * depth]
            } else if d > -1.5 {
                beach
            } else {
                let z = ((zones.at(yf, xf) + 1.0) * 2.0).clamp(0.0, 3.999) as usize;
                land_palette[z]
            };
            for c in 0..3 {
                let v = color[c] + 0.04 * f + rng.random_range(-0.02..0.02);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Raster::new(size, size, 3, data)
}

/// Warm diagonal brush strokes.
pub fn land_style(size: usize, seed: u64) -> Result<Raster<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette = [[0.85, 0.45, 0.15], [0.95, 0.75, 0.25], [0.55, 0.25, 0.10], [0.70, 0.60, 0.20]];
    let noise = SmoothNoise::new(&mut rng, 6, 0.2);
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let t = (x as f32 + y as f32) / 6.0 + 2.0 * noise.at(y as f32, x as f32);
            let color = palette[(t.floor() as i64).rem_euclid(4) as usize];
            for c in 0..3 {
                data.push((color[c] + rng.random_range(-0.05..0.05f32)).clamp(0.0, 1.0));
            }
        }
    }
    Raster::new(size, size, 3, data)
}

/// Concentric blue and white swirls.
pub fn water_style(size: usize, seed: u64) -> Result<Raster<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = SmoothNoise::new(&mut rng, 5, 0.15);
    let centers: Vec<(f32, f32)> = (0..4)
        .map(|_| (rng.random_range(0.0..size as f32), rng.random_range(0.0..size as f32)))
        .collect();
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (yf, xf) = (y as f32, x as f32);
            let r = centers
                .iter()
                .map(|&(cy, cx)| ((yf - cy).powi(2) + (xf - cx).powi(2)).sqrt())
                .fold(f32::INFINITY, f32::min);
            let wave = ((r / 4.0 + 1.5 * noise.at(yf, xf)).sin() + 1.0) / 2.0;
            let color = [0.10 + 0.8 * wave.powi(4), 0.25 + 0.6 * wave.powi(3), 0.55 + 0.4 * wave];
            for c in 0..3 {
                data.push((color[c] + rng.random_range(-0.03..0.03f32)).clamp(0.0, 1.0));
            }
        }
    }
    Raster::new(size, size, 3, data)
}
