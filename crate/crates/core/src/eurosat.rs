//! EuroSAT RGB ingest: archive fetch and verification, the land/water
//! category mapping, and per-pixel training sample extraction.
//!
//! EuroSAT only labels whole 64x64 patches, so every pixel sampled from a
//! patch inherits the patch's binary category.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checksum;
use crate::error::{Error, Result};
use crate::raster::load_image;

pub const EUROSAT_CATEGORIES: [&str; 10] = [
    "AnnualCrop",
    "Forest",
    "HerbaceousVegetation",
    "Highway",
    "Industrial",
    "Pasture",
    "PermanentCrop",
    "Residential",
    "River",
    "SeaLake",
];

/// Mirror of the RGB archive used by common dataset loaders, and its MD5.
pub const EUROSAT_RGB_URL: &str =
    "https://huggingface.co/datasets/torchgeo/eurosat/resolve/c877bcd43f099cd0196738f714544e355477f3fd/EuroSAT.zip";
pub const EUROSAT_RGB_MD5: &str = "c8fa014336c82ac7804f0398fcb19387";

pub const PATCH_SIZE: usize = 64;

pub const LAND: u8 = 0;
pub const WATER: u8 = 1;

/// Total mapping from EuroSAT scene category to `LAND` / `WATER`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryCategoryMap {
    map: BTreeMap<&'static str, u8>,
}

impl Default for BinaryCategoryMap {
    fn default() -> Self {
        Self::with_water(&["SeaLake", "River"]).expect("default water categories are valid")
    }
}

impl BinaryCategoryMap {
    pub fn with_water(water: &[&str]) -> Result<Self> {
        for w in water {
            if !EUROSAT_CATEGORIES.contains(w) {
                return Err(Error::UnknownCategory(w.to_string()));
            }
        }
        let map = EUROSAT_CATEGORIES
            .iter()
            .map(|&c| (c, if water.contains(&c) { WATER } else { LAND }))
            .collect();
        Ok(Self { map })
    }

    pub fn label(&self, name: &str) -> Result<u8> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }
}

/// Binary label of a EuroSAT category under the default mapping
/// (`SeaLake`, `River` are water).
pub fn map_category(name: &str) -> Result<u8> {
    BinaryCategoryMap::default().label(name)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

fn is_patch_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("jpg" | "jpeg" | "png")
    )
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let p = e.path();
        let hidden = e.file_name().to_string_lossy().starts_with('.');
        if p.is_dir() && !hidden {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

impl DatasetManifest {
    /// Enumerate patches under `root`, which is either the directory holding
    /// the per-category folders or an ancestor of it through single-child
    /// directories (the published archive nests them under `2750/`).
    pub fn scan(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut dir = root.to_path_buf();
        for _ in 0..4 {
            let children = subdirs(&dir)?;
            let has_category = children.iter().any(|c| {
                c.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| EUROSAT_CATEGORIES.contains(&n))
            });
            if has_category {
                return Self::scan_category_dirs(root, &children);
            }
            match children.as_slice() {
                [only] => dir = only.clone(),
                _ => break,
            }
        }
        Err(Error::format(
            "dataset",
            root,
            "no EuroSAT category directories found",
        ))
    }

    fn scan_category_dirs(root: &Path, dirs: &[PathBuf]) -> Result<Self> {
        let mut entries = Vec::new();
        for d in dirs {
            let name = d.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if !EUROSAT_CATEGORIES.contains(&name) {
                return Err(Error::UnknownCategory(name.to_string()));
            }
            let mut files: Vec<PathBuf> = std::fs::read_dir(d)
                .map_err(|e| Error::io(d, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_patch_file(p))
                .collect();
            files.sort();
            entries.extend(files.into_iter().map(|path| ManifestEntry {
                path,
                category: name.to_string(),
            }));
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn total_count(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct category names in manifest order.
    pub fn categories(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !seen.contains(&e.category.as_str()) {
                seen.push(&e.category);
            }
        }
        seen
    }

    pub fn count_by_category(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.category.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// At most `per_category` seeded-random patches from each listed category,
    /// in manifest order.
    pub fn subset(&self, categories: &[&str], per_category: usize, seed: u64) -> Result<Self> {
        for c in categories {
            if !EUROSAT_CATEGORIES.contains(c) {
                return Err(Error::UnknownCategory(c.to_string()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = vec![false; self.entries.len()];
        for c in categories {
            let idx: Vec<usize> = (0..self.entries.len())
                .filter(|&i| self.entries[i].category == *c)
                .collect();
            let n = per_category.min(idx.len());
            for j in index::sample(&mut rng, idx.len(), n).iter() {
                keep[idx[j]] = true;
            }
        }
        let entries = self
            .entries
            .iter()
            .zip(keep)
            .filter(|(_, k)| *k)
            .map(|(e, _)| e.clone())
            .collect();
        Ok(Self {
            root: self.root.clone(),
            entries,
        })
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            root: self.root.clone(),
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }
}

fn archive_name(url: &str) -> String {
    let path = url.split(['?', '#']).next().unwrap_or(url);
    path.rsplit('/')
        .find(|s| !s.is_empty())
        .unwrap_or("dataset.zip")
        .to_string()
}

fn download(url: &str, dest: &Path) -> Result<()> {
    let net_err = |reason: String| Error::Network {
        url: url.to_string(),
        reason,
    };
    if let Some(local) = url.strip_prefix("file://") {
        std::fs::copy(local, dest).map_err(|e| net_err(e.to_string()))?;
        return Ok(());
    }
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_connect(Some(std::time::Duration::from_secs(30)))
        .timeout_recv_response(Some(std::time::Duration::from_secs(120)))
        .build()
        .into();
    let response = agent.get(url).call().map_err(|e| net_err(e.to_string()))?;
    let mut reader = response.into_body().into_reader();
    let mut file = std::fs::File::create(dest).map_err(|e| Error::io(dest, e))?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf).map_err(|e| net_err(e.to_string()))?;
        if n == 0 {
            break;
        }
        file.write_all(&buf[..n]).map_err(|e| Error::io(dest, e))?;
    }
    Ok(())
}

fn unpack(archive: &Path, dest: &Path) -> Result<()> {
    let bad = |reason: String| Error::Archive {
        path: archive.to_path_buf(),
        reason,
    };
    let file = std::fs::File::open(archive).map_err(|e| Error::io(archive, e))?;
    let mut zip = zip::ZipArchive::new(std::io::BufReader::new(file)).map_err(|e| bad(e.to_string()))?;
    for i in 0..zip.len() {
        let mut entry = zip.by_index(i).map_err(|e| bad(e.to_string()))?;
        let rel = entry
            .enclosed_name()
            .ok_or_else(|| bad(format!("unsafe entry path {}", entry.name())))?;
        let out = dest.join(rel);
        if entry.is_dir() {
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            continue;
        }
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = std::fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
        std::io::copy(&mut entry, &mut f).map_err(|e| bad(format!("{}: {e}", out.display())))?;
    }
    Ok(())
}

/// Download (unless already present), verify, and unpack a EuroSAT archive
/// into `dest`, then scan it.
///
/// `source_url` may be `http(s)://` or `file://`. An archive already present
/// in `dest` is checked against `expected_checksum` and never re-downloaded.
pub fn fetch_dataset(source_url: &str, dest: impl AsRef<Path>, expected_checksum: &str) -> Result<DatasetManifest> {
    let dest = dest.as_ref();
    std::fs::create_dir_all(dest).map_err(|e| Error::io(dest, e))?;
    let name = archive_name(source_url);
    let archive = dest.join(&name);
    if archive.exists() {
        log::info!("archive {} present, skipping download", archive.display());
        checksum::verify_file(&archive, expected_checksum)?;
    } else {
        let part = dest.join(format!("{name}.part"));
        log::info!("downloading {source_url}");
        download(source_url, &part)?;
        if let Err(e) = checksum::verify_file(&part, expected_checksum) {
            let _ = std::fs::remove_file(&part);
            return Err(e);
        }
        std::fs::rename(&part, &archive).map_err(|e| Error::io(&archive, e))?;
    }

    let marker = dest.join(format!(".{name}.unpacked"));
    let stamp = expected_checksum.trim().to_ascii_lowercase();
    let unpacked = std::fs::read_to_string(&marker).is_ok_and(|s| s.trim() == stamp);
    if !unpacked {
        let extract_dir = dest.join("data");
        unpack(&archive, &extract_dir)?;
        std::fs::write(&marker, &stamp).map_err(|e| Error::io(&marker, e))?;
    }
    DatasetManifest::scan(dest.join("data"))
}

/// Per-pixel feature vectors with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    features: Vec<f32>,
    labels: Vec<u8>,
    feature_dim: usize,
}

const SAMPLES_MAGIC: &[u8; 8] = b"ARTMAPSS";
const SAMPLES_VERSION: u16 = 1;

impl SampleSet {
    pub fn new(features: Vec<f32>, labels: Vec<u8>, feature_dim: usize) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidArgument("feature_dim must be positive".into()));
        }
        if features.len() != labels.len() * feature_dim {
            return Err(Error::Shape(format!(
                "{} feature values for {} labels of dim {feature_dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Self {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            feature_dim: self.feature_dim,
        }
    }

    /// Flat little-endian container: 16-byte header (magic `ARTMAPSS`,
    /// version u16, N u32, D u16), N*D f32 features, then N label bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = u32::try_from(self.len()).map_err(|_| Error::InvalidArgument("too many samples".into()))?;
        let d = u16::try_from(self.feature_dim)
            .map_err(|_| Error::InvalidArgument("feature dim exceeds u16".into()))?;
        let mut out = Vec::with_capacity(16 + self.features.len() * 4 + self.labels.len());
        out.extend_from_slice(SAMPLES_MAGIC);
        out.extend_from_slice(&SAMPLES_VERSION.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(&d.to_le_bytes());
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format("sample set", path, r);
        if bytes.len() < 16 || &bytes[..8] != SAMPLES_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != SAMPLES_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let d = u16::from_le_bytes([bytes[14], bytes[15]]) as usize;
        let expected = 16 + n * d * 4 + n;
        if bytes.len() != expected {
            return Err(bad(&format!("length {} != expected {expected}", bytes.len())));
        }
        let feat_end = 16 + n * d * 4;
        let features = bytes[16..feat_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = bytes[feat_end..].to_vec();
        Self::new(features, labels, d).map_err(|e| bad(&e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Concatenate sets of equal feature dimension.
    pub fn concat(parts: &[SampleSet]) -> Result<Self> {
        let d = parts.first().map(|p| p.feature_dim).unwrap_or(1);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.feature_dim != d {
                return Err(Error::Shape("feature dims differ".into()));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Self::new(features, labels, d)
    }
}

pub fn feature_dim_for_window(window: usize) -> usize {
    3 * window * window
}

/// Sample up to `per_patch_cap` pixels per patch (uniformly, without
/// replacement) and emit their reflect-padded `window x window` RGB
/// neighborhoods labeled with the patch's binary category.
///
/// Each patch draws from its own ChaCha stream, so the result is independent of
/// the order in which patches are processed.
pub fn extract_pixel_samples(
    manifest: &DatasetManifest,
    window: usize,
    per_patch_cap: usize,
    seed: u64,
) -> Result<SampleSet> {
    if window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("window must be odd, got {window}")));
    }
    if per_patch_cap == 0 || per_patch_cap > PATCH_SIZE * PATCH_SIZE {
        return Err(Error::InvalidArgument(format!(
            "per-patch cap must be in 1..={}, got {per_patch_cap}",
            PATCH_SIZE * PATCH_SIZE
        )));
    }
    if manifest.is_empty() {
        return Err(Error::InvalidArgument("empty manifest".into()));
    }
    let map = BinaryCategoryMap::default();
    let dim = feature_dim_for_window(window);
    let parts: Vec<SampleSet> = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let label = map.label(&entry.category)?;
            let patch = load_image(&entry.path)?;
            if patch.height() != PATCH_SIZE || patch.width() != PATCH_SIZE {
                return Err(Error::format(
                    "patch",
                    &entry.path,
                    format!("expected {PATCH_SIZE}x{PATCH_SIZE}, got {}x{}", patch.height(), patch.width()),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let npix = PATCH_SIZE * PATCH_SIZE;
            let positions = index::sample(&mut rng, npix, per_patch_cap.min(npix));
            let mut features = Vec::with_capacity(positions.len() * dim);
            for p in positions.iter() {
                patch.window_feature(p / PATCH_SIZE, p % PATCH_SIZE, window, &mut features);
            }
            SampleSet::new(features, vec![label; positions.len()], dim)
        })
        .collect::<Result<_>>()?;
    SampleSet::concat(&parts)
}

fn check_fractions(fractions: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    Ok(())
}

/// Seeded partition of `0..n` into (train, val, test) index lists.
/// Val and test get `floor(n * f)` indices; train takes the remainder.
pub fn split_indices(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<[Vec<usize>; 3]> {
    check_fractions(fractions)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * fractions.1).floor() as usize;
    let n_test = (n as f64 * fractions.2).floor() as usize;
    let n_train = n - n_val - n_test;
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok([order, val, test])
}

pub fn split(samples: &SampleSet, fractions: (f64, f64, f64), seed: u64) -> Result<(SampleSet, SampleSet, SampleSet)> {
    let [train, val, test] = split_indices(samples.len(), fractions, seed)?;
    Ok((samples.select(&train), samples.select(&val), samples.select(&test)))
}
