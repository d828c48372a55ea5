//! Minimal loss-curve rendering onto a PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

const W: u32 = 640;
const H: u32 = 360;
const MARGIN: u32 = 40;

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < W && (y as u32) < H {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Plots `(step, loss)` pairs with axes; non-finite points are skipped.
pub fn loss_curve(points: &[(usize, f64)], path: &Path) -> anyhow::Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (left, right, top, bottom) = (MARGIN as f64, (W - MARGIN / 2) as f64, (MARGIN / 2) as f64, (H - MARGIN) as f64);
    line(&mut img, (left, bottom), (right, bottom), axis);
    line(&mut img, (left, bottom), (left, top), axis);

    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, l)| l.is_finite())
        .map(|&(s, l)| (s as f64, l))
        .collect();
    if pts.len() >= 2 {
        let (xmin, xmax) = (pts[0].0, pts[pts.len() - 1].0.max(pts[0].0 + 1.0));
        let (ymin, ymax) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
        let span = (ymax - ymin).max(1e-12);
        let map = |(x, y): (f64, f64)| {
            (
                left + (x - xmin) / (xmax - xmin) * (right - left),
                bottom - (y - ymin) / span * (bottom - top),
            )
        };
        for w in pts.windows(2) {
            line(&mut img, map(w[0]), map(w[1]), Rgb([200, 40, 40]));
        }
    }
    img.save(path)?;
    Ok(())
}
