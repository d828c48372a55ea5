//! Manifest-driven dataset loading and deterministic batching.
//!
//! A manifest is a UTF-8 CSV with header `image_path,caption,mask_path`;
//! relative paths resolve against the manifest's directory. The same format
//! serves caption-only pretraining sets (`mask_path` may be blank) and
//! segmentation sets (every row needs a mask).

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::BinaryMask;
use crate::params::derive_seed;
use crate::text_encoder::Caption;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestMode {
    /// Image–caption pairs; masks optional.
    Pretrain,
    /// Every row must carry a mask.
    Segmentation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub line: usize,
    pub image_path: PathBuf,
    pub caption: Caption,
    pub mask_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleManifest {
    pub rows: Vec<ManifestRow>,
}

impl SampleManifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Deserialize)]
struct RawRow {
    image_path: String,
    caption: String,
    #[serde(default)]
    mask_path: Option<String>,
}

pub fn load_manifest(path: impl AsRef<Path>, mode: ManifestMode) -> Result<SampleManifest> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: unreadable header: {e}", path.display())))?
        .clone();
    let has = |col: &str| headers.iter().any(|h| h == col);
    let mut missing: Vec<&str> = ["image_path", "caption"].into_iter().filter(|c| !has(c)).collect();
    if mode == ManifestMode::Segmentation && !has("mask_path") {
        missing.push("mask_path");
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{}: header lacks column(s) {}",
            path.display(),
            missing.join(", ")
        )));
    }

    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };

    let mut rows = Vec::new();
    let mut problems = Vec::new();
    for (i, rec) in reader.deserialize::<RawRow>().enumerate() {
        let line = i + 2;
        let raw = match rec {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let image_path = resolve(&raw.image_path);
        if !image_path.is_file() {
            problems.push(format!("line {line}: image {} not found", image_path.display()));
        }
        let caption = match Caption::new(&raw.caption) {
            Ok(c) => Some(c),
            Err(_) => {
                problems.push(format!("line {line}: empty caption"));
                None
            }
        };
        let mask_path = raw.mask_path.filter(|m| !m.trim().is_empty()).map(|m| resolve(&m));
        match (&mask_path, mode) {
            (None, ManifestMode::Segmentation) => {
                problems.push(format!("line {line}: mask_path missing"));
            }
            (Some(m), _) if !m.is_file() => {
                problems.push(format!("line {line}: mask {} not found", m.display()));
            }
            _ => {}
        }
        if let Some(caption) = caption {
            rows.push(ManifestRow {
                line,
                image_path,
                caption,
                mask_path,
            });
        }
    }
    if !problems.is_empty() {
        return Err(Error::Data(format!(
            "{}: invalid rows:\n  {}",
            path.display(),
            problems.join("\n  ")
        )));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: manifest has no rows", path.display())));
    }
    Ok(SampleManifest { rows })
}

/// Optional per-channel standardization applied at collation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// `3 × H × W`, channel-major, in `[0, 1]`.
    pub image: Vec<f32>,
    pub caption: Caption,
    pub mask: Option<BinaryMask>,
}

impl Sample {
    pub fn image_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.image.clone(), (1, 3, self.height, self.width), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

pub fn load_image(path: &Path, size: (usize, usize)) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Data(format!("{} has zero size", path.display())));
    }
    let (h, w) = size;
    let rgb = img.to_rgb8();
    let rgb = if (rgb.width() as usize, rgb.height() as usize) == (w, h) {
        rgb
    } else {
        image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle)
    };
    let mut out = vec![0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        let idx = y as usize * w + x as usize;
        for c in 0..3 {
            out[c * h * w + idx] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Nearest-neighbour resize, then `value > 127 → 1`.
pub fn load_mask(path: &Path, size: (usize, usize)) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Data(format!("{} has zero size", path.display())));
    }
    let (h, w) = size;
    let luma = img.to_luma8();
    let luma = if (luma.width() as usize, luma.height() as usize) == (w, h) {
        luma
    } else {
        image::imageops::resize(&luma, w as u32, h as u32, FilterType::Nearest)
    };
    BinaryMask::new(h, w, binarize(luma.as_raw()))
}

pub fn binarize(values: &[u8]) -> Vec<u8> {
    values.iter().map(|&v| u8::from(v > 127)).collect()
}

pub fn load_sample(row: &ManifestRow, size: (usize, usize)) -> Result<Sample> {
    let image = load_image(&row.image_path, size)?;
    let mask = match &row.mask_path {
        Some(p) => Some(load_mask(p, size)?),
        None => None,
    };
    Ok(Sample {
        height: size.0,
        width: size.1,
        image,
        caption: row.caption.clone(),
        mask,
    })
}

/// Loads every row; output order matches the manifest regardless of `exec`.
pub fn load_samples(manifest: &SampleManifest, size: (usize, usize), exec: Exec) -> Result<Vec<Sample>> {
    exec.try_map(&manifest.rows, |_, row| load_sample(row, size))
}

/// Writes a mask as an 8-bit PNG with values 0 and 255.
pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let px: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, px)
        .ok_or_else(|| Error::shape("mask buffer does not match its size"))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled by `(seed, epoch)`; trailing partial batch dropped.
    Train,
    /// Manifest order; trailing partial batch kept.
    Eval,
}

pub fn batch_schedule(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    mode: BatchMode,
) -> Result<Vec<Vec<usize>>> {
    let min = if mode == BatchMode::Train { 2 } else { 1 };
    if batch_size < min {
        return Err(Error::config(format!(
            "batch size {batch_size} too small (batch norm needs at least 2 in training)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    match mode {
        BatchMode::Train => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("shuffle/{epoch}")));
            order.shuffle(&mut rng);
            Ok(order
                .chunks_exact(batch_size)
                .map(<[usize]>::to_vec)
                .collect())
        }
        BatchMode::Eval => Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect()),
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `(B, 3, H, W)`.
    pub images: Tensor,
    pub captions: Vec<Caption>,
    /// `(B, 1, H, W)` in `{0, 1}` when every sample has a mask.
    pub masks: Option<Tensor>,
}

pub fn collate(samples: &[Sample], indices: &[usize], dtype: DType, norm: Option<&Normalization>) -> Result<Batch> {
    let first = samples
        .get(*indices.first().ok_or_else(|| Error::Data("empty batch".into()))?)
        .ok_or_else(|| Error::Data("batch index out of range".into()))?;
    let (h, w) = (first.height, first.width);
    let mut pixels = Vec::with_capacity(indices.len() * 3 * h * w);
    let mut masks = Vec::with_capacity(indices.len() * h * w);
    let mut all_masks = true;
    let mut captions = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::Data(format!("batch index {i} out of range")))?;
        if (s.height, s.width) != (h, w) {
            return Err(Error::shape("samples in a batch differ in size"));
        }
        match norm {
            Some(n) => {
                for c in 0..3 {
                    pixels.extend(s.image[c * h * w..(c + 1) * h * w].iter().map(|v| (v - n.mean[c]) / n.std[c]));
                }
            }
            None => pixels.extend_from_slice(&s.image),
        }
        match &s.mask {
            Some(m) => masks.extend(m.data().iter().map(|&v| v as f32)),
            None => all_masks = false,
        }
        captions.push(s.caption.clone());
    }
    let b = indices.len();
    let images = Tensor::from_vec(pixels, (b, 3, h, w), &Device::Cpu)?.to_dtype(dtype)?;
    let masks = if all_masks {
        Some(Tensor::from_vec(masks, (b, 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
    } else {
        None
    };
    Ok(Batch {
        indices: indices.to_vec(),
        images,
        captions,
        masks,
    })
}
