//! Attention overlays: a blue, green, yellow, red ramp blended over the image.

use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Ramp stops, low to high.
pub const RAMP: [(f64, [u8; 3]); 4] = [
    (0.0, [0, 0, 255]),
    (1.0 / 3.0, [0, 255, 0]),
    (2.0 / 3.0, [255, 255, 0]),
    (1.0, [255, 0, 0]),
];

/// Colour for a normalised value, clamped to `[0, 1]`.
pub fn ramp(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let i = RAMP.windows(2).position(|w| v <= w[1].0).unwrap_or(RAMP.len() - 2);
    let ((a, ca), (b, cb)) = (RAMP[i], RAMP[i + 1]);
    let t = (v - a) / (b - a);
    [0, 1, 2].map(|c| ca[c] as f64 + t * (cb[c] as f64 - ca[c] as f64))
}

pub fn blend(pixel: [u8; 3], color: [f64; 3], alpha: f64) -> [u8; 3] {
    [0, 1, 2].map(|c| ((1.0 - alpha) * pixel[c] as f64 + alpha * color[c]).round().clamp(0.0, 255.0) as u8)
}

/// Overlays `map` on `base`, resizing `base` to the map's resolution.
pub fn overlay(base: &RgbImage, map: ArrayView2<f64>, alpha: f64) -> RgbImage {
    let (h, w) = map.dim();
    let base = if base.dimensions() == (w as u32, h as u32) {
        base.clone()
    } else {
        imageops::resize(base, w as u32, h as u32, imageops::FilterType::Triangle)
    };
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(blend(base.get_pixel(x, y).0, ramp(map[(y as usize, x as usize)]), alpha))
    })
}

/// Writes `{stem}_expert{n}.png` (1-based) for each expert and
/// `{stem}_overall.png`.
pub fn export_heatmaps(
    base: &RgbImage,
    expert_maps: &[Array2<f64>],
    overall: &Array2<f64>,
    dir: &Path,
    stem: &str,
    alpha: f64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let named = expert_maps
        .iter()
        .enumerate()
        .map(|(n, m)| (format!("{stem}_expert{}.png", n + 1), m))
        .chain(std::iter::once((format!("{stem}_overall.png"), overall)));
    let mut written = Vec::new();
    for (name, map) in named {
        let path = dir.join(name);
        let img = overlay(base, map.view(), alpha);
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
        super::write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
