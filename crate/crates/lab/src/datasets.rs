//! Dataset ingestion. Every loader returns images scaled to [0, 1] in
//! channel-first layout.
//!
//! New datasets register by adding a [`DatasetId`] variant and a branch in
//! [`load_dataset`].

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use gradleak_core::data::{DataSplit, Dataset};
use gradleak_core::RandomStream;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Mnist,
    Cifar10,
    Synthetic,
}

/// Gaussian blobs around one random prototype image per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train: 1000,
            test: 200,
            height: 32,
            width: 32,
            channels: 3,
            classes: 10,
            noise: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub id: DatasetId,
    /// Directory holding the dataset files; unused for synthetic data.
    pub path: Option<PathBuf>,
    /// Keep only the first `n` training images.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            id: DatasetId::Cifar10,
            path: None,
            train_limit: None,
            test_limit: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

pub fn load_dataset(config: &DatasetConfig) -> Result<DataSplit> {
    let dir =
        || config.path.as_deref().ok_or_else(|| LabError::Config(format!("dataset {:?} needs a path", config.id)));
    let mut split = match config.id {
        DatasetId::Mnist => load_mnist(dir()?)?,
        DatasetId::Cifar10 => load_cifar10(dir()?)?,
        DatasetId::Synthetic => synthetic(&config.synthetic)?,
    };
    if let Some(n) = config.train_limit {
        split.train = head(&split.train, n);
    }
    if let Some(n) = config.test_limit {
        split.test = head(&split.test, n);
    }
    Ok(split)
}

fn head(d: &Dataset, n: usize) -> Dataset {
    let idx: Vec<usize> = (0..n.min(d.len())).collect();
    d.subset(&idx)
}

/// Reads a file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| LabError::CorruptDataset(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(LabError::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {}", dir.display()),
    )))
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 || be_u32(bytes, 0) != IDX_IMAGES_MAGIC {
        return Err(LabError::CorruptDataset("bad IDX image magic".into()));
    }
    let (n, h, w) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    if bytes.len() != 16 + n * h * w {
        return Err(LabError::CorruptDataset(format!(
            "IDX image file holds {} bytes, header says {n}x{h}x{w}",
            bytes.len() - 16
        )));
    }
    Ok((n, h, w, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.len() < 8 || be_u32(bytes, 0) != IDX_LABELS_MAGIC {
        return Err(LabError::CorruptDataset("bad IDX label magic".into()));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(LabError::CorruptDataset(format!("IDX label file truncated: {n} expected")));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Zero-pads square-ish digit images to 32x32 and scales to [0, 1].
fn mnist_split(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (n, h, w, px) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(LabError::CorruptDataset(format!("{n} images but {} labels", labels.len())));
    }
    if h > 32 || w > 32 {
        return Err(LabError::CorruptDataset(format!("{h}x{w} digits exceed 32x32")));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 9) {
        return Err(LabError::CorruptDataset(format!("label {bad} out of range")));
    }
    let (top, left) = ((32 - h) / 2, (32 - w) / 2);
    let mut pixels = vec![0.0f32; n * 32 * 32];
    for i in 0..n {
        for r in 0..h {
            for c in 0..w {
                pixels[i * 1024 + (r + top) * 32 + c + left] = px[i * h * w + r * w + c] as f32 / 255.0;
            }
        }
    }
    Ok(Dataset::new([1, 32, 32], 10, pixels, labels)?)
}

pub fn load_mnist(dir: &Path) -> Result<DataSplit> {
    let train = mnist_split(
        &read_maybe_gz(&find(dir, "train-images-idx3-ubyte")?)?,
        &read_maybe_gz(&find(dir, "train-labels-idx1-ubyte")?)?,
    )?;
    let test = mnist_split(
        &read_maybe_gz(&find(dir, "t10k-images-idx3-ubyte")?)?,
        &read_maybe_gz(&find(dir, "t10k-labels-idx1-ubyte")?)?,
    )?;
    Ok(DataSplit { train, test })
}

/// Parses CIFAR-10 binary records (label byte then 3x32x32 channel-planar
/// pixels) into scaled pixels and labels.
pub fn parse_cifar_records(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(LabError::CorruptDataset(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let mut pixels = Vec::with_capacity(bytes.len());
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for rec in bytes.chunks(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(LabError::CorruptDataset(format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

/// Loads `data_batch_*.bin` and `test_batch.bin`. Without a test batch the
/// last tenth of the training records is held out.
pub fn load_cifar10(dir: &Path) -> Result<DataSplit> {
    let mut batches: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    batches.sort();
    if batches.is_empty() {
        return Err(LabError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no data_batch_*.bin in {}", dir.display()),
        )));
    }
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for b in &batches {
        let (p, l) = parse_cifar_records(&fs::read(b)?)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let test_path = dir.join("test_batch.bin");
    if test_path.is_file() {
        let (tp, tl) = parse_cifar_records(&fs::read(test_path)?)?;
        return Ok(DataSplit {
            train: Dataset::new([3, 32, 32], 10, pixels, labels)?,
            test: Dataset::new([3, 32, 32], 10, tp, tl)?,
        });
    }
    let all = Dataset::new([3, 32, 32], 10, pixels, labels)?;
    let cut = all.len() - all.len() / 10;
    Ok(DataSplit {
        train: all.subset(&(0..cut).collect::<Vec<_>>()),
        test: all.subset(&(cut..all.len()).collect::<Vec<_>>()),
    })
}

pub fn synthetic(cfg: &SyntheticConfig) -> Result<DataSplit> {
    if cfg.classes == 0 || cfg.train == 0 || cfg.height * cfg.width * cfg.channels == 0 {
        return Err(LabError::Config("synthetic dataset needs classes, images and pixels".into()));
    }
    let root = RandomStream::new(cfg.seed);
    let len = cfg.height * cfg.width * cfg.channels;
    let mut proto_rng = root.substream("prototypes");
    let protos: Vec<Vec<f64>> =
        (0..cfg.classes).map(|_| (0..len).map(|_| proto_rng.uniform_range(0.15, 0.85)).collect()).collect();
    let make = |n: usize, label: &str| -> Result<Dataset> {
        let mut rng = root.substream(label);
        let mut pixels = Vec::with_capacity(n * len);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.below(cfg.classes);
            pixels.extend(protos[y].iter().map(|&m| (m + cfg.noise * rng.normal()).clamp(0.0, 1.0) as f32));
            labels.push(y);
        }
        Ok(Dataset::new([cfg.channels, cfg.height, cfg.width], cfg.classes, pixels, labels)?)
    };
    Ok(DataSplit { train: make(cfg.train, "train")?, test: make(cfg.test, "test")? })
}
