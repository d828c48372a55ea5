//! Synthetic image–caption–mask sets: one bright square or disk per image
//! on a dark noisy background, captioned with its shape and position.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{save_mask_png, Sample};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::text_encoder::Caption;

const ROWS: [&str; 3] = ["upper", "middle", "lower"];
const COLS: [&str; 3] = ["left", "center", "right"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disk,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Disk => "disk",
        }
    }
}

/// Draws sample `index`; cell `(index mod 9)` of a 3×3 grid holds the shape.
pub fn shape_sample(size: usize, index: usize, seed: u64) -> Result<Sample> {
    if size < 12 {
        return Err(Error::config("synthetic images need at least 12 pixels per side"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let shape = if index.is_multiple_of(2) { Shape::Square } else { Shape::Disk };
    let cell = index % 9;
    let (row, col) = (cell / 3, cell % 3);
    let third = size as f64 / 3.0;
    let half = rng.random_range(0.28..0.40) * third;
    let cy = (row as f64 + 0.5) * third + rng.random_range(-0.1..0.1) * third;
    let cx = (col as f64 + 0.5) * third + rng.random_range(-0.1..0.1) * third;
    let tint: [f32; 3] = [rng.random_range(0.75..1.0), rng.random_range(0.75..1.0), rng.random_range(0.75..1.0)];

    let plane = size * size;
    let mut image = vec![0f32; 3 * plane];
    let mut mask = vec![0u8; plane];
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let inside = match shape {
                Shape::Square => dy.abs() <= half && dx.abs() <= half,
                Shape::Disk => dy * dy + dx * dx <= half * half,
            };
            let i = y * size + x;
            mask[i] = u8::from(inside);
            for c in 0..3 {
                let bg: f32 = 0.1 + rng.random_range(0.0..0.1);
                image[c * plane + i] = if inside { tint[c] } else { bg };
            }
        }
    }
    let caption = Caption::new(&format!("{} in {} {}", shape.name(), ROWS[row], COLS[col]))?;
    Ok(Sample {
        height: size,
        width: size,
        image,
        caption,
        mask: Some(BinaryMask::new(size, size, mask)?),
    })
}

pub fn shapes_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..n).map(|i| shape_sample(size, i, seed)).collect()
}

/// Writes PNGs plus `manifest.csv` under `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["image_path", "caption", "mask_path"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for (i, s) in samples.iter().enumerate() {
        let plane = s.height * s.width;
        let rgb: Vec<u8> = (0..plane)
            .flat_map(|p| (0..3).map(move |c| (c, p)))
            .map(|(c, p)| (s.image[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img_name = format!("image_{i:03}.png");
        let img = image::RgbImage::from_raw(s.width as u32, s.height as u32, rgb)
            .ok_or_else(|| Error::shape("image buffer does not match its size"))?;
        let img_path = dir.join(&img_name);
        img.save(&img_path).map_err(|source| Error::Image { path: img_path, source })?;
        let mask_name = match &s.mask {
            Some(m) => {
                let name = format!("mask_{i:03}.png");
                save_mask_png(m, &dir.join(&name))?;
                name
            }
            None => String::new(),
        };
        w.write_record([img_name.as_str(), s.caption.as_str(), mask_name.as_str()])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
