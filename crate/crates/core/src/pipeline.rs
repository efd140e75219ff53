//! Config-driven end-to-end run: segment, stylize per category, compose.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Spanned;

use crate::collage::{compose, feathered_compose, verify_selection, CollageInput, CompositeMode};
use crate::error::{Error, Result};
use crate::mlp::{majority_filter, segment, MlpParams, NUM_CLASSES};
use crate::nst::{content_target, optimize, style_targets, LayerSelection, Losses, NstConfig, StyleLayerTarget, StyleTargets};
use crate::raster::{load_image, save_image, LabelMap, Raster, ResizeMethod};
use crate::vgg::{load_vgg_weights, load_vgg_weights_unverified, Pooling, VggNet, VggWeights};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Offsets added to the root seed for each stage.
pub mod seeds {
    pub const PIXEL_SAMPLING: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    /// Category `k` uses `NST + k`.
    pub const NST: u64 = 100;

    pub fn derive(root: u64, offset: u64) -> u64 {
        root.wrapping_add(offset)
    }
}

/// Display colors of `labels.png`, indexed by category.
pub const LABEL_PALETTE: [[u8; 3]; NUM_CLASSES] = [[46, 139, 62], [36, 92, 204]];

pub const PARTIAL_MARKER: &str = ".partial";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    pub window: usize,
    /// 0 disables the filter.
    pub majority_filter_radius: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            window: 3,
            majority_filter_radius: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompositingConfig {
    pub mode: CompositeMode,
    pub feather_radius: usize,
}

impl Default for CompositingConfig {
    fn default() -> Self {
        Self {
            mode: CompositeMode::Hard,
            feather_radius: 2,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    content_image: Spanned<PathBuf>,
    style_images: Spanned<Vec<Spanned<PathBuf>>>,
    model: Spanned<PathBuf>,
    vgg_weights: Spanned<PathBuf>,
    #[serde(default)]
    vgg_checksum: Option<String>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    cache_dir: Option<PathBuf>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    nst: NstConfig,
    #[serde(default)]
    segmentation: SegmentationConfig,
    #[serde(default)]
    compositing: CompositingConfig,
}

/// Fully resolved run configuration; all paths are absolute or relative to
/// the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub content_image: PathBuf,
    /// Index = category: `[land, water]`.
    pub style_images: Vec<PathBuf>,
    pub model: PathBuf,
    pub vgg_weights: PathBuf,
    pub vgg_checksum: Option<String>,
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub seed: u64,
    pub nst: NstConfig,
    pub segmentation: SegmentationConfig,
    pub compositing: CompositingConfig,
}

/// Command-line values that take precedence over the config file.
/// Paths here are used as given, not resolved against the config directory.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub content_image: Option<PathBuf>,
    pub style_images: Option<Vec<PathBuf>>,
    pub model: Option<PathBuf>,
    pub vgg_weights: Option<PathBuf>,
    pub vgg_checksum: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub step_size: Option<f64>,
    pub window: Option<usize>,
    pub majority_filter_radius: Option<usize>,
    pub mode: Option<CompositeMode>,
    pub feather_radius: Option<usize>,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}

/// Resolves a config-file path against the config's directory. `span` is
/// `None` for values supplied on the command line.
fn check_path(
    origin: &Path,
    text: &str,
    key: &str,
    path: PathBuf,
    span: Option<std::ops::Range<usize>>,
    base: &Path,
) -> Result<PathBuf> {
    let resolved = if span.is_some() && path.is_relative() {
        base.join(&path)
    } else {
        path
    };
    if !resolved.is_file() {
        let at = match span {
            Some(s) => {
                let (l, c) = line_col(text, s.start);
                format!("{}:{l}:{c}", origin.display())
            }
            None => "command line".to_string(),
        };
        return Err(Error::Config(format!(
            "{at}: `{key}` refers to missing file {}",
            resolved.display()
        )));
    }
    Ok(resolved)
}

impl PipelineConfig {
    /// Parse, apply overrides, fill defaults, and check every referenced file.
    pub fn load(path: impl AsRef<Path>, overrides: &ConfigOverrides) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, path, &base, overrides)
    }

    /// `origin` names the document in diagnostics; relative paths in the
    /// document resolve against `base`.
    pub fn from_toml(text: &str, origin: &Path, base: &Path, overrides: &ConfigOverrides) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        let o = overrides;

        let content_image = match &o.content_image {
            Some(p) => check_path(origin, text, "content_image", p.clone(), None, base)?,
            None => check_path(
                origin,
                text,
                "content_image",
                raw.content_image.get_ref().clone(),
                Some(raw.content_image.span()),
                base,
            )?,
        };
        let style_images = match &o.style_images {
            Some(v) => v.clone().into_iter().map(|p| (p, None)).collect::<Vec<_>>(),
            None => raw
                .style_images
                .get_ref()
                .iter()
                .map(|s| (s.get_ref().clone(), Some(s.span())))
                .collect(),
        };
        if style_images.len() != NUM_CLASSES {
            let at = if o.style_images.is_some() {
                "command line".to_string()
            } else {
                let (l, c) = line_col(text, raw.style_images.span().start);
                format!("{}:{l}:{c}", origin.display())
            };
            return Err(Error::Config(format!(
                "{at}: `style_images`: expected {NUM_CLASSES} style images, got {}",
                style_images.len()
            )));
        }
        let style_images = style_images
            .into_iter()
            .enumerate()
            .map(|(k, (p, span))| check_path(origin, text, &format!("style_images[{k}]"), p, span, base))
            .collect::<Result<Vec<_>>>()?;
        let model = match &o.model {
            Some(p) => check_path(origin, text, "model", p.clone(), None, base)?,
            None => check_path(origin, text, "model", raw.model.get_ref().clone(), Some(raw.model.span()), base)?,
        };
        let vgg_weights = match &o.vgg_weights {
            Some(p) => check_path(origin, text, "vgg_weights", p.clone(), None, base)?,
            None => check_path(
                origin,
                text,
                "vgg_weights",
                raw.vgg_weights.get_ref().clone(),
                Some(raw.vgg_weights.span()),
                base,
            )?,
        };
        let output_dir = match &o.output_dir {
            Some(p) => p.clone(),
            None => base.join(raw.output_dir.unwrap_or_else(|| PathBuf::from("output"))),
        };
        let cache_dir = match (&o.cache_dir, raw.cache_dir) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => base.join(p),
            (None, None) => output_dir.join("cache"),
        };
        if raw.nst.seed != 0 {
            return Err(Error::Config(format!(
                "{}: `nst.seed` is derived from the root `seed`; set `seed` instead",
                origin.display()
            )));
        }

        let mut nst = raw.nst;
        let mut segmentation = raw.segmentation;
        let mut compositing = raw.compositing;
        if let Some(v) = o.iterations {
            nst.iterations = v;
        }
        if let Some(v) = o.alpha {
            nst.alpha = v;
        }
        if let Some(v) = o.beta {
            nst.beta = v;
        }
        if let Some(v) = o.step_size {
            nst.step_size = v;
        }
        if let Some(v) = o.window {
            segmentation.window = v;
        }
        if let Some(v) = o.majority_filter_radius {
            segmentation.majority_filter_radius = v;
        }
        if let Some(v) = o.mode {
            compositing.mode = v;
        }
        if let Some(v) = o.feather_radius {
            compositing.feather_radius = v;
        }
        nst.validate()
            .map_err(|e| Error::Config(format!("{}: [nst]: {e}", origin.display())))?;
        if segmentation.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{}: `segmentation.window` must be odd, got {}",
                origin.display(),
                segmentation.window
            )));
        }

        Ok(Self {
            content_image,
            style_images,
            model,
            vgg_weights,
            vgg_checksum: o.vgg_checksum.clone().or(raw.vgg_checksum),
            output_dir,
            cache_dir,
            seed: o.seed.unwrap_or(raw.seed),
            nst,
            segmentation,
            compositing,
        })
    }

    /// NST settings for category `k` with its derived seed.
    pub fn nst_for(&self, k: usize) -> NstConfig {
        NstConfig {
            seed: seeds::derive(self.seed, seeds::NST + k as u64),
            ..self.nst.clone()
        }
    }
}

/// Load and check a config file without running anything.
pub fn validate_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    PipelineConfig::load(path, &ConfigOverrides::default())
}

/// Network with checksum verification when a checksum is given.
pub fn load_net(path: &Path, checksum: Option<&str>, pooling: Pooling) -> Result<VggNet<f32>> {
    let weights = match checksum {
        Some(c) => load_vgg_weights(path, c)?,
        None => {
            log::warn!("no checksum configured for {}; loading unverified", path.display());
            load_vgg_weights_unverified(path)?
        }
    };
    Ok(VggNet::new(weights, pooling))
}

/// Content hash of every parameter, used to key cached style targets.
pub fn weights_fingerprint(weights: &VggWeights<f32>) -> String {
    let mut h = Sha256::new();
    for w in weights.widths() {
        h.update((w as u64).to_le_bytes());
    }
    for m in weights.mean_rgb() {
        h.update(m.to_le_bytes());
    }
    for layer in weights.layers() {
        h.update(layer.name.as_bytes());
        for v in layer.kernel.iter().chain(layer.bias.iter()) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheOutcome {
    Hit,
    Miss,
    /// The entry failed its integrity check and was rebuilt.
    Recovered,
}

const CACHE_MAGIC: &[u8; 8] = b"ARTMAPST";
const CACHE_VERSION: u16 = 1;

fn cache_key(fingerprint: &str, pooling: Pooling, style: &Raster<f32>, selection: &LayerSelection, dims: (usize, usize)) -> String {
    let mut h = Sha256::new();
    h.update(b"style-targets-v1\0");
    h.update(fingerprint.as_bytes());
    h.update(serde_json::to_vec(&pooling).expect("serializes"));
    h.update(serde_json::to_vec(&selection.style_layers).expect("serializes"));
    h.update((dims.0 as u64).to_le_bytes());
    h.update((dims.1 as u64).to_le_bytes());
    let (sh, sw, sc) = style.dims();
    for d in [sh, sw, sc] {
        h.update((d as u64).to_le_bytes());
    }
    for v in style.as_slice() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn encode_targets(t: &StyleTargets<f32>) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(CACHE_MAGIC);
    b.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    b.extend_from_slice(&(t.layers.len() as u16).to_le_bytes());
    for l in &t.layers {
        b.extend_from_slice(&(l.layer.len() as u16).to_le_bytes());
        b.extend_from_slice(l.layer.as_bytes());
        b.extend_from_slice(&(l.channels as u32).to_le_bytes());
        b.extend_from_slice(&(l.positions as u32).to_le_bytes());
        for v in l.gram.iter() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    b
}

fn decode_targets(bytes: &[u8], expected_layers: &[String]) -> Option<StyleTargets<f32>> {
    if bytes.len() < 32 + 12 {
        return None;
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return None;
    }
    let mut pos = 0usize;
    let mut take = |n: usize| -> Option<&[u8]> {
        let s = body.get(pos..pos + n)?;
        pos += n;
        Some(s)
    };
    if take(8)? != CACHE_MAGIC || u16::from_le_bytes(take(2)?.try_into().ok()?) != CACHE_VERSION {
        return None;
    }
    let count = u16::from_le_bytes(take(2)?.try_into().ok()?) as usize;
    if count != expected_layers.len() {
        return None;
    }
    let mut layers = Vec::with_capacity(count);
    for expected in expected_layers {
        let len = u16::from_le_bytes(take(2)?.try_into().ok()?) as usize;
        let name = std::str::from_utf8(take(len)?).ok()?.to_string();
        if &name != expected {
            return None;
        }
        let channels = u32::from_le_bytes(take(4)?.try_into().ok()?) as usize;
        let positions = u32::from_le_bytes(take(4)?.try_into().ok()?) as usize;
        let raw = take(channels * channels * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let gram = ndarray::Array2::from_shape_vec((channels, channels), values).ok()?;
        layers.push(StyleLayerTarget {
            layer: name,
            gram,
            channels,
            positions,
        });
    }
    (pos == body.len()).then_some(StyleTargets { layers })
}

/// Style targets for `style_image` resized to `dims`, read from or written
/// to `cache_dir`. Entries are keyed by a hash of the weights, pooling,
/// style layers, dims and style pixels.
pub fn cache_style_targets(
    cache_dir: &Path,
    net: &VggNet<f32>,
    fingerprint: &str,
    style_image: &Raster<f32>,
    selection: &LayerSelection,
    dims: (usize, usize),
) -> Result<(StyleTargets<f32>, CacheOutcome)> {
    selection.validate()?;
    let key = cache_key(fingerprint, net.pooling, style_image, selection, dims);
    let file = cache_dir.join(format!("{key}.stc"));
    let mut outcome = CacheOutcome::Miss;
    if file.is_file() {
        let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
        match decode_targets(&bytes, &selection.style_layers) {
            Some(t) => {
                log::debug!("style target cache hit {}", file.display());
                return Ok((t, CacheOutcome::Hit));
            }
            None => {
                log::warn!("style target cache entry {} is corrupt; recomputing", file.display());
                outcome = CacheOutcome::Recovered;
            }
        }
    }
    let resized = style_image.resize(dims.0, dims.1, ResizeMethod::Bilinear)?;
    let targets = style_targets(net, &net.weights.preprocess(&resized)?, selection)?;
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let tmp = file.with_extension("stc.tmp");
    std::fs::write(&tmp, encode_targets(&targets)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &file).map_err(|e| Error::io(&file, e))?;
    Ok((targets, outcome))
}

pub fn write_label_png(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    if labels.num_categories() > LABEL_PALETTE.len() {
        return Err(Error::InvalidArgument(format!(
            "no palette for {} categories",
            labels.num_categories()
        )));
    }
    let (h, w) = (labels.height(), labels.width());
    let data = labels
        .labels()
        .iter()
        .flat_map(|&l| LABEL_PALETTE[l as usize].map(|v| f32::from(v) / 255.0))
        .collect();
    save_image(&Raster::new(h, w, 3, data)?, path)
}

pub fn read_label_png(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let img = load_image(path)?;
    let (h, w, _) = img.dims();
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| (img.get(y, x, c) * 255.0).round() as u8);
            let k = LABEL_PALETTE.iter().position(|p| *p == px).ok_or_else(|| Error::Decode {
                path: path.to_path_buf(),
                reason: format!("pixel ({y}, {x}) = {px:?} is not a label color"),
            })?;
            labels.push(k as u8);
        }
    }
    LabelMap::new(h, w, NUM_CLASSES, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: usize,
    pub pixels: usize,
    /// False when the category is absent and the content image stands in.
    pub stylized: bool,
    pub cache: Option<CacheOutcome>,
    pub initial_loss: Option<Losses>,
    pub final_loss: Option<Losses>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub height: usize,
    pub width: usize,
    pub stages: Vec<StageTiming>,
    pub histogram: Vec<usize>,
    pub categories: Vec<CategoryReport>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub config: PipelineConfig,
}

impl RunReport {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("run report", path, e.to_string()))
    }
}

/// In-memory results of [`execute`], before 8-bit quantization.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub labels: LabelMap,
    pub stylized: Vec<Raster<f32>>,
    pub collage: Raster<f32>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Run every stage on a one-thread pool.
    pub single_thread: bool,
}

struct Stages {
    timings: Vec<StageTiming>,
    marker: PathBuf,
}

impl Stages {
    fn run<R>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<R>) -> Result<R> {
        log::info!("stage {stage}");
        let t = Instant::now();
        let out = f().map_err(|e| {
            let _ = std::fs::write(&self.marker, format!("failed at stage {stage}: {e}\n"));
            Error::Stage {
                stage,
                source: Box::new(e),
            }
        })?;
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: t.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

pub fn run(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunReport> {
    Ok(execute(cfg, opts)?.report)
}

/// Run all stages and write `labels.png`, `stylized_k.png`, `trace_k.jsonl`,
/// `collage.png` and `report.json` into the output directory. A `.partial`
/// marker stays behind if any stage fails.
pub fn execute(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunOutput> {
    if opts.single_thread {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| execute_inner(cfg, true))
    } else {
        execute_inner(cfg, false)
    }
}

fn execute_inner(cfg: &PipelineConfig, sequential: bool) -> Result<RunOutput> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let marker = out.join(PARTIAL_MARKER);
    std::fs::write(&marker, "running\n").map_err(|e| Error::io(&marker, e))?;
    let mut stages = Stages {
        timings: Vec::new(),
        marker: marker.clone(),
    };
    let mut artifacts = BTreeMap::new();

    let (content, styles, model, net) = stages.run("load", || {
        let content = load_image(&cfg.content_image)?;
        let styles = cfg.style_images.iter().map(load_image).collect::<Result<Vec<_>>>()?;
        let model = MlpParams::read(&cfg.model)?;
        let net = load_net(&cfg.vgg_weights, cfg.vgg_checksum.as_deref(), cfg.nst.pooling)?;
        Ok((content, styles, model, net))
    })?;
    let (h, w, _) = content.dims();

    let labels = stages.run("segment", || {
        let window = cfg.segmentation.window;
        if model.input_dim() != 3 * window * window {
            return Err(Error::Shape(format!(
                "model expects {} features but window {window} gives {}",
                model.input_dim(),
                3 * window * window
            )));
        }
        let mut labels = segment(&model, &content, window)?;
        if cfg.segmentation.majority_filter_radius > 0 {
            labels = majority_filter(&labels, cfg.segmentation.majority_filter_radius);
        }
        let p = out.join("labels.png");
        write_label_png(&labels, &p)?;
        artifacts.insert("labels".to_string(), p);
        Ok(labels)
    })?;
    let histogram = labels.histogram();
    log::info!("label histogram {histogram:?}");

    let results = stages.run("stylize", || {
        let fingerprint = weights_fingerprint(&net.weights);
        let content_pre = net.weights.preprocess(&content)?;
        let ct = content_target(&net, &content_pre, &cfg.nst.selection)?;
        let one = |k: usize| -> Result<_> {
            if histogram[k] == 0 {
                log::info!("category {k} absent; using the content image");
                return Ok((content.clone(), None, crate::nst::OptimizationTrace::default()));
            }
            let (st, outcome) =
                cache_style_targets(&cfg.cache_dir, &net, &fingerprint, &styles[k], &cfg.nst.selection, (h, w))?;
            let (img, trace) = optimize(&net, &content, &ct, &st, &cfg.nst_for(k))?;
            log::info!(
                "category {k}: total loss {:.4e} -> {:.4e}",
                trace.first().map_or(f64::NAN, |r| r.total),
                trace.last().map_or(f64::NAN, |r| r.total)
            );
            Ok((img, Some(outcome), trace))
        };
        let results: Vec<_> = if sequential {
            (0..NUM_CLASSES).map(one).collect::<Result<_>>()?
        } else {
            (0..NUM_CLASSES).into_par_iter().map(one).collect::<Result<_>>()?
        };
        for (k, (img, _, trace)) in results.iter().enumerate() {
            let p = out.join(format!("stylized_{k}.png"));
            save_image(img, &p)?;
            artifacts.insert(format!("stylized_{k}"), p);
            let p = out.join(format!("trace_{k}.jsonl"));
            trace.write_jsonl(&p)?;
            artifacts.insert(format!("trace_{k}"), p);
        }
        Ok(results)
    })?;

    let stylized: Vec<Raster<f32>> = results.iter().map(|r| r.0.clone()).collect();
    let collage = stages.run("compose", || {
        let input = CollageInput::new(&labels, stylized.iter().collect())?;
        let collage = match cfg.compositing.mode {
            CompositeMode::Hard => {
                let c = compose(&input);
                verify_selection(&c, &input)?;
                c
            }
            CompositeMode::Feather => feathered_compose(&input, cfg.compositing.feather_radius),
        };
        let p = out.join("collage.png");
        save_image(&collage, &p)?;
        artifacts.insert("collage".to_string(), p);
        Ok(collage)
    })?;

    let report_path = out.join("report.json");
    artifacts.insert("report".to_string(), report_path.clone());
    let categories = results
        .iter()
        .enumerate()
        .map(|(k, (_, cache, trace))| CategoryReport {
            category: k,
            pixels: histogram[k],
            stylized: histogram[k] > 0,
            cache: *cache,
            initial_loss: trace.first().map(|r| Losses {
                total: r.total,
                content: r.content,
                style: r.style,
            }),
            final_loss: trace.last().map(|r| Losses {
                total: r.total,
                content: r.content,
                style: r.style,
            }),
        })
        .collect();
    let report = RunReport {
        version: VERSION.to_string(),
        height: h,
        width: w,
        stages: stages.timings.clone(),
        histogram,
        categories,
        artifacts,
        config: cfg.clone(),
    };
    stages.run("report", || {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))
    })?;
    Ok(RunOutput {
        report,
        labels,
        stylized,
        collage,
    })
}

/// Re-check a finished run from its files alone: the collage must be the
/// per-pixel selection (hard mode) or lie in the per-pixel source range
/// (feather mode) of the written stylized images under the written labels.
pub fn verify_artifacts(output_dir: impl AsRef<Path>) -> Result<RunReport> {
    let dir = output_dir.as_ref();
    let report = RunReport::read(dir.join("report.json"))?;
    let labels = read_label_png(dir.join("labels.png"))?;
    let stylized = (0..NUM_CLASSES)
        .map(|k| load_image(dir.join(format!("stylized_{k}.png"))))
        .collect::<Result<Vec<_>>>()?;
    let collage = load_image(dir.join("collage.png"))?;
    for k in 0..NUM_CLASSES {
        let trace = dir.join(format!("trace_{k}.jsonl"));
        if !trace.is_file() {
            return Err(Error::io(&trace, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
    }
    if labels.histogram() != report.histogram {
        return Err(Error::InvalidRaster("labels.png disagrees with the report histogram".into()));
    }
    let input = CollageInput::new(&labels, stylized.iter().collect())?;
    match report.config.compositing.mode {
        CompositeMode::Hard => verify_selection(&collage, &input)?,
        CompositeMode::Feather => {
            let (h, w, c) = collage.dims();
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let v = collage.get(y, x, ch);
                        let (lo, hi) = stylized.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), s| {
                            (lo.min(s.get(y, x, ch)), hi.max(s.get(y, x, ch)))
                        });
                        if v < lo - 1.5 / 255.0 || v > hi + 1.5 / 255.0 {
                            return Err(Error::InvalidRaster(format!("pixel ({y}, {x}, {ch}) outside source range")));
                        }
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Pixel-classifier training from a EuroSAT-layout dataset. Patches (not
/// pixels) are split into train/val/test so held-out pixels come from
/// patches never seen in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetTrainConfig {
    /// Empty means every category found in the dataset.
    pub categories: Vec<String>,
    pub per_category: Option<usize>,
    pub per_patch: usize,
    pub window: usize,
    pub fractions: (f64, f64, f64),
    pub seed: u64,
    pub train: crate::mlp::TrainConfig,
}

impl Default for DatasetTrainConfig {
    fn default() -> Self {
        Self {
            categories: Vec::new(),
            per_category: None,
            per_patch: 64,
            window: 3,
            fractions: (0.8, 0.1, 0.1),
            seed: 0,
            train: crate::mlp::TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetTrainOutcome {
    pub params: MlpParams,
    pub report: crate::mlp::TrainReport,
    /// Patch counts of the train/val/test partitions.
    pub patches: [usize; 3],
    pub samples: [usize; 3],
    pub test_accuracy: Option<f64>,
}

pub fn train_on_dataset(
    manifest: &crate::eurosat::DatasetManifest,
    cfg: &DatasetTrainConfig,
) -> Result<DatasetTrainOutcome> {
    use crate::eurosat::{extract_pixel_samples, split_indices, SampleSet};

    let manifest = if cfg.categories.is_empty() && cfg.per_category.is_none() {
        manifest.clone()
    } else {
        let cats: Vec<&str> = if cfg.categories.is_empty() {
            manifest.categories()
        } else {
            cfg.categories.iter().map(String::as_str).collect()
        };
        manifest.subset(&cats, cfg.per_category.unwrap_or(usize::MAX), seeds::derive(cfg.seed, seeds::SPLIT))?
    };
    if manifest.is_empty() {
        return Err(Error::InvalidArgument("no patches selected for training".into()));
    }
    let parts = split_indices(manifest.total_count(), cfg.fractions, seeds::derive(cfg.seed, seeds::SPLIT))?;
    let sample_seed = seeds::derive(cfg.seed, seeds::PIXEL_SAMPLING);
    let extract = |idx: &[usize]| -> Result<SampleSet> {
        if idx.is_empty() {
            return SampleSet::new(Vec::new(), Vec::new(), crate::eurosat::feature_dim_for_window(cfg.window));
        }
        extract_pixel_samples(&manifest.select(idx), cfg.window, cfg.per_patch, sample_seed)
    };
    let train_set = extract(&parts[0])?;
    let val_set = extract(&parts[1])?;
    let test_set = extract(&parts[2])?;
    let train_cfg = crate::mlp::TrainConfig {
        seed: seeds::derive(cfg.seed, seeds::TRAIN),
        ..cfg.train.clone()
    };
    let (params, report) = crate::mlp::train(&train_cfg, &train_set, &val_set)?;
    let test_accuracy = if test_set.is_empty() {
        None
    } else {
        Some(crate::mlp::accuracy(&params, &test_set)?)
    };
    Ok(DatasetTrainOutcome {
        params,
        report,
        patches: [parts[0].len(), parts[1].len(), parts[2].len()],
        samples: [train_set.len(), val_set.len(), test_set.len()],
        test_accuracy,
    })
}

pub const DEMO_SIZE: usize = 128;

/// Write the demo inputs into `dir`: `coastal.png`, `style_land.png`,
/// `style_water.png`, `model.bin` (trained on procedural patches),
/// `model_report.json` and `demo.toml`. VGG weights are not written.
pub fn write_demo_assets(dir: impl AsRef<Path>, seed: u64) -> Result<()> {
    use crate::synth;

    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_image(&synth::coastal_scene(DEMO_SIZE, seed)?, dir.join("coastal.png"))?;
    save_image(&synth::land_style(DEMO_SIZE, seed.wrapping_add(1))?, dir.join("style_land.png"))?;
    save_image(&synth::water_style(DEMO_SIZE, seed.wrapping_add(2))?, dir.join("style_water.png"))?;

    let scratch = dir.join(".patches");
    synth::write_synthetic_dataset(&scratch, &crate::eurosat::EUROSAT_CATEGORIES, 12, seed)?;
    let manifest = crate::eurosat::DatasetManifest::scan(&scratch)?;
    let outcome = train_on_dataset(
        &manifest,
        &DatasetTrainConfig {
            seed,
            ..Default::default()
        },
    )?;
    std::fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    outcome.params.write(dir.join("model.bin"))?;
    outcome.report.write_json(dir.join("model_report.json"))?;
    let toml = "\
# Demo run on the bundled coastal scene. Create the weights first:
#   artmap weights init --out vgg19-stub.safetensors
content_image = \"coastal.png\"
style_images = [\"style_land.png\", \"style_water.png\"]
model = \"model.bin\"
vgg_weights = \"vgg19-stub.safetensors\"
output_dir = \"output\"
seed = 0

[nst]
iterations = 100

[segmentation]
window = 3

[compositing]
mode = \"hard\"
";
    let p = dir.join("demo.toml");
    std::fs::write(&p, toml).map_err(|e| Error::io(&p, e))
}
