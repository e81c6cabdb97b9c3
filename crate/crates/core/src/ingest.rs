//! Image ingestion and preprocessing.
//!
//! Dataset directories follow `<root>/tumor/*.pgm` (label 1) and
//! `<root>/notumor/*.pgm` (label 0). Images are resized to 128×128 with
//! nearest-neighbour sampling, scaled to [0, 1] and flattened row-major.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phe::{encrypt_deterministic, FixedPointCodec, PheError, PublicKey, SessionSeed};

pub const TARGET_SIDE: usize = 128;
pub const TUMOR_DIR: &str = "tumor";
pub const NO_TUMOR_DIR: &str = "notumor";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const FEATURES_FILE: &str = "features.csv";

const CIPHER_FEATURE_BITS: u32 = 24;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error("unsupported PGM maxval {0} (only 255)")]
    MaxVal(u32),
    #[error("cannot infer label from {0}")]
    UnknownLabel(PathBuf),
    #[error("expected {expected}x{expected} image, got {width}x{height}")]
    Dimensions {
        expected: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid synthetic dataset: {0}")]
    Synthetic(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Phe(#[from] PheError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Grayscale image with a binary label (1 = pituitary tumour, 0 = none).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSample {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities.
    pub pixels: Vec<u8>,
    pub label: u8,
    pub source_id: String,
}

impl ImageSample {
    pub fn pixel(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub label: u8,
    pub encrypted_origin: bool,
}

/// Feature rows with labels, ready for sharding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self, IngestError> {
        if features.len() != labels.len() {
            return Err(IngestError::Dataset(format!(
                "{} feature rows vs {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(first) = features.first() {
            if features.iter().any(|f| f.len() != first.len()) {
                return Err(IngestError::Dataset("ragged feature rows".into()));
            }
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(IngestError::Dataset("labels must be 0 or 1".into()));
        }
        Ok(Dataset { features, labels })
    }

    pub fn from_vectors(vectors: Vec<FeatureVector>) -> Result<Self, IngestError> {
        let (features, labels) = vectors.into_iter().map(|v| (v.values, v.label)).unzip();
        Dataset::new(features, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn skip_ws_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32, IngestError> {
    skip_ws_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| IngestError::Pgm(format!("missing or invalid {what}")))
}

/// Parses a binary (P5) PGM with maxval 255 into `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), IngestError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(IngestError::Pgm("missing P5 magic".into()));
    }
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width")? as usize;
    let height = header_number(bytes, &mut pos, "height")? as usize;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(IngestError::Pgm("zero dimension".into()));
    }
    if maxval != 255 {
        return Err(IngestError::MaxVal(maxval));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(IngestError::Pgm("missing separator after header".into()));
    }
    pos += 1;
    let len = width * height;
    if bytes.len() - pos < len {
        return Err(IngestError::Pgm(format!(
            "truncated payload: {} of {len} bytes",
            bytes.len() - pos
        )));
    }
    Ok((width, height, bytes[pos..pos + len].to_vec()))
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, img: &ImageSample) -> Result<(), IngestError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&encode_pgm(img.width, img.height, &img.pixels))
        .map_err(io_err(path))
}

fn label_from_path(path: &Path) -> Option<u8> {
    match path.parent()?.file_name()?.to_str()? {
        TUMOR_DIR => Some(1),
        NO_TUMOR_DIR => Some(0),
        _ => None,
    }
}

/// Loads a PGM, taking the label from its parent directory name.
pub fn load_pgm(path: &Path) -> Result<ImageSample, IngestError> {
    let label = label_from_path(path).ok_or_else(|| IngestError::UnknownLabel(path.to_path_buf()))?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (width, height, pixels) = parse_pgm(&bytes)?;
    Ok(ImageSample {
        width,
        height,
        pixels,
        label,
        source_id: path.to_string_lossy().into_owned(),
    })
}

/// Nearest-neighbour resize: output `(i, j)` samples source
/// `(⌊i·H/h⌋, ⌊j·W/w⌋)`.
pub fn resize_nearest(img: &ImageSample, height: usize, width: usize) -> ImageSample {
    if img.height == height && img.width == width {
        return img.clone();
    }
    let mut pixels = Vec::with_capacity(height * width);
    for i in 0..height {
        let src_row = i * img.height / height;
        for j in 0..width {
            pixels.push(img.pixel(src_row, j * img.width / width));
        }
    }
    ImageSample {
        width,
        height,
        pixels,
        label: img.label,
        source_id: img.source_id.clone(),
    }
}

pub fn resize_128(img: &ImageSample) -> ImageSample {
    resize_nearest(img, TARGET_SIDE, TARGET_SIDE)
}

fn scaled_pixels(img: &ImageSample) -> Vec<f64> {
    img.pixels.iter().map(|&p| p as f64 / 255.0).collect()
}

/// Row-major flatten of a 128×128 image with intensities scaled to [0, 1].
pub fn normalize_flatten(img: &ImageSample) -> Result<FeatureVector, IngestError> {
    if img.width != TARGET_SIDE || img.height != TARGET_SIDE {
        return Err(IngestError::Dimensions {
            expected: TARGET_SIDE,
            width: img.width,
            height: img.height,
        });
    }
    Ok(FeatureVector {
        values: scaled_pixels(img),
        label: img.label,
        encrypted_origin: false,
    })
}

/// Per-intensity lookup of ciphertext-derived features for one session.
///
/// Each intensity is scaled to [0, 1], fixed-point encoded, encrypted in
/// deterministic mode, and reduced to `(c mod 2^24) / 2^24`. With only 256
/// intensities the whole map is computed once.
#[derive(Clone, Debug)]
pub struct CipherFeatureMap {
    table: Vec<f64>,
}

impl CipherFeatureMap {
    pub fn new(
        key: &PublicKey,
        codec: &FixedPointCodec,
        session_seed: &SessionSeed,
    ) -> Result<Self, IngestError> {
        let modulus = BigUint::from(1u32) << CIPHER_FEATURE_BITS;
        let denom = (1u64 << CIPHER_FEATURE_BITS) as f64;
        let table = (0u16..=255)
            .map(|v| {
                let c = encrypt_deterministic(key, codec, v as f64 / 255.0, session_seed)?;
                let low = (c.value() % &modulus).to_u64().expect("below 2^24");
                Ok(low as f64 / denom)
            })
            .collect::<Result<Vec<_>, PheError>>()?;
        Ok(CipherFeatureMap { table })
    }

    pub fn feature(&self, intensity: u8) -> f64 {
        self.table[intensity as usize]
    }

    pub fn apply(&self, img: &ImageSample) -> FeatureVector {
        FeatureVector {
            values: img.pixels.iter().map(|&p| self.feature(p)).collect(),
            label: img.label,
            encrypted_origin: true,
        }
    }
}

/// One-shot form of [`CipherFeatureMap`]; prefer the map for many images.
pub fn cipher_features(
    img: &ImageSample,
    key: &PublicKey,
    codec: &FixedPointCodec,
    session_seed: &SessionSeed,
) -> Result<FeatureVector, IngestError> {
    Ok(CipherFeatureMap::new(key, codec, session_seed)?.apply(img))
}

/// Two unit-variance Gaussian classes centred at ±separation/2 in every
/// dimension. Labels alternate, so each class gets exactly half.
pub fn gen_synthetic(
    n_samples: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, IngestError> {
    if n_samples < 2 || !n_samples.is_multiple_of(2) {
        return Err(IngestError::Synthetic(format!(
            "sample count must be even and >= 2, got {n_samples}"
        )));
    }
    if dim == 0 || !separation.is_finite() {
        return Err(IngestError::Synthetic("dimension must be positive, separation finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let label = (i % 2) as u8;
        let centre = if label == 1 { separation / 2.0 } else { -separation / 2.0 };
        features.push((0..dim).map(|_| centre + noise.sample(&mut rng)).collect());
        labels.push(label);
    }
    Dataset::new(features, labels)
}

/// MRI-like stand-in: noisy grey squares where class 1 carries a brighter
/// central disc. `separation` is the disc's brightness lift in units of the
/// pixel noise deviation (20 grey levels).
pub fn gen_synthetic_images(
    n_samples: usize,
    side: usize,
    separation: f64,
    seed: u64,
) -> Result<Vec<ImageSample>, IngestError> {
    if n_samples < 2 || !n_samples.is_multiple_of(2) || side == 0 {
        return Err(IngestError::Synthetic(format!(
            "need an even count >= 2 and a positive side, got {n_samples} and {side}"
        )));
    }
    const BASE: f64 = 100.0;
    const NOISE: f64 = 20.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE).expect("finite deviation");
    let centre = (side as f64 - 1.0) / 2.0;
    let radius = side as f64 / 4.0;
    Ok((0..n_samples)
        .map(|i| {
            let label = (i % 2) as u8;
            // Jitter the disc so it is not a fixed template.
            let (dy, dx) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let mut pixels = Vec::with_capacity(side * side);
            for r in 0..side {
                for c in 0..side {
                    let dist = ((r as f64 - centre - dy).powi(2) + (c as f64 - centre - dx).powi(2)).sqrt();
                    let lift = if label == 1 && dist <= radius { separation * NOISE } else { 0.0 };
                    let v = BASE + lift + noise.sample(&mut rng);
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
            ImageSample {
                width: side,
                height: side,
                pixels,
                label,
                source_id: format!("synthetic-{i:05}"),
            }
        })
        .collect())
}

/// All `.pgm` files under the class directories, sorted for reproducibility.
pub fn list_dataset_files(root: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let mut files = Vec::new();
    for class_dir in [NO_TUMOR_DIR, TUMOR_DIR] {
        let dir = root.join(class_dir);
        if !dir.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
                files.push(path);
            }
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(IngestError::Dataset(format!(
            "no .pgm files under {}/{{{TUMOR_DIR},{NO_TUMOR_DIR}}}",
            root.display()
        )));
    }
    Ok(files)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: u8,
    pub width: usize,
    pub height: usize,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, IngestError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Feature file: one row per sample, label first, then the values.
pub fn write_features(path: &Path, vectors: &[FeatureVector]) -> Result<(), IngestError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for v in vectors {
        let mut record = Vec::with_capacity(v.values.len() + 1);
        record.push(v.label.to_string());
        record.extend(v.values.iter().map(|x| x.to_string()));
        w.write_record(&record)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Dataset, IngestError> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in r.records() {
        let record = record?;
        let mut fields = record.iter();
        let label: u8 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| IngestError::Dataset("bad label column".into()))?;
        let values = fields
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| IngestError::Dataset(e.to_string()))?;
        features.push(values);
        labels.push(label);
    }
    Dataset::new(features, labels)
}

fn parse_params(text: &str, keys: &[&str]) -> Result<std::collections::HashMap<String, f64>, IngestError> {
    let mut out = std::collections::HashMap::new();
    for part in text.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| IngestError::Synthetic(format!("expected key=value, got {part:?}")))?;
        let k = k.trim();
        if !keys.contains(&k) {
            return Err(IngestError::Synthetic(format!("unknown key {k:?}")));
        }
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| IngestError::Synthetic(format!("bad value for {k}: {v:?}")))?;
        out.insert(k.to_string(), v);
    }
    Ok(out)
}

fn required(kv: &std::collections::HashMap<String, f64>, key: &str) -> Result<f64, IngestError> {
    match kv.get(key) {
        Some(&v) if v >= 0.0 && v.fract() == 0.0 => Ok(v),
        Some(v) => Err(IngestError::Synthetic(format!("{key} must be a whole number, got {v}"))),
        None => Err(IngestError::Synthetic(format!("missing {key}"))),
    }
}

fn optional(kv: &std::collections::HashMap<String, f64>, key: &str, default: usize) -> Result<usize, IngestError> {
    if kv.contains_key(key) {
        Ok(required(kv, key)? as usize)
    } else {
        Ok(default)
    }
}

/// Where a session's data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    /// `synthetic:n=<samples>,dim=<d>,sep=<separation>`
    Synthetic { n: usize, dim: usize, separation: f64 },
    /// `synthetic-images:n=<samples>,side=<pixels>,sep=<lift>`
    SyntheticImages { n: usize, side: usize, separation: f64 },
    /// A directory written by `prepare` (holds `features.csv`).
    Prepared(PathBuf),
    /// A raw `tumor/`, `notumor/` PGM tree.
    ImageTree(PathBuf),
}

impl DatasetSource {
    pub fn parse(text: &str) -> Result<Self, IngestError> {
        if let Some(rest) = text.strip_prefix("synthetic-images:") {
            let kv = parse_params(rest, &["n", "side", "sep"])?;
            return Ok(DatasetSource::SyntheticImages {
                n: required(&kv, "n")? as usize,
                side: optional(&kv, "side", 32)?,
                separation: kv.get("sep").copied().unwrap_or(1.0),
            });
        }
        if let Some(rest) = text.strip_prefix("synthetic:") {
            let kv = parse_params(rest, &["n", "dim", "sep"])?;
            return Ok(DatasetSource::Synthetic {
                n: required(&kv, "n")? as usize,
                dim: optional(&kv, "dim", 8)?,
                separation: kv.get("sep").copied().unwrap_or(6.0),
            });
        }
        let path = PathBuf::from(text);
        if path.join(FEATURES_FILE).is_file() {
            Ok(DatasetSource::Prepared(path))
        } else if path.is_dir() {
            Ok(DatasetSource::ImageTree(path))
        } else {
            Err(IngestError::Dataset(format!("no dataset at {text}")))
        }
    }

    pub fn is_image_source(&self) -> bool {
        matches!(self, DatasetSource::SyntheticImages { .. } | DatasetSource::ImageTree(_))
    }

    /// Raw images of an image source.
    pub fn images(&self, seed: u64) -> Result<Vec<ImageSample>, IngestError> {
        match self {
            DatasetSource::SyntheticImages { n, side, separation } => gen_synthetic_images(*n, *side, *separation, seed),
            DatasetSource::ImageTree(dir) => list_dataset_files(dir)?.iter().map(|p| load_pgm(p)).collect(),
            _ => Err(IngestError::Dataset("not an image source".into())),
        }
    }

    /// Loads the plain feature dataset. Image trees are preprocessed with
    /// the standard resize + normalise pipeline.
    pub fn load(&self, seed: u64) -> Result<Dataset, IngestError> {
        match self {
            DatasetSource::Synthetic { n, dim, separation } => gen_synthetic(*n, *dim, *separation, seed),
            DatasetSource::Prepared(dir) => read_features(&dir.join(FEATURES_FILE)),
            DatasetSource::SyntheticImages { .. } | DatasetSource::ImageTree(_) => {
                let vectors = self
                    .images(seed)?
                    .iter()
                    .map(|img| normalize_flatten(&resize_128(img)))
                    .collect::<Result<Vec<_>, _>>()?;
                Dataset::from_vectors(vectors)
            }
        }
    }
}
