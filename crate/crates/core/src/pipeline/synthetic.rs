//! Toy task: is there a bright square in the image? The background tint is
//! the protected attribute, skewed in the training split.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const TINTS: [&str; 2] = ["cool", "warm"];
const TINT_RGB: [[f64; 3]; 2] = [[70.0, 95.0, 150.0], [150.0, 95.0, 70.0]];

#[derive(Clone, Debug)]
pub struct ToySpec {
    pub size: u32,
    pub square_min: u32,
    pub square_max: u32,
    pub noise: f64,
    /// Fraction of images carrying the square.
    pub positive_fraction: f64,
    /// Fraction of images with the first tint.
    pub majority_fraction: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            size: 96,
            square_min: 14,
            square_max: 22,
            noise: 14.0,
            positive_fraction: 0.5,
            majority_fraction: 0.7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyImage {
    pub image: RgbImage,
    pub label: usize,
    pub tint: usize,
    /// `(row, col)` of the square's centre, for positives.
    pub center: Option<(f64, f64)>,
}

pub fn generate(spec: &ToySpec, count: usize, seed: u64) -> Vec<ToyImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).expect("finite noise");
    (0..count)
        .map(|_| {
            let tint = usize::from(!rng.gen_bool(spec.majority_fraction));
            let label = usize::from(rng.gen_bool(spec.positive_fraction));
            let base = TINT_RGB[tint];
            let mut image = RgbImage::from_fn(spec.size, spec.size, |_, _| {
                let n: f64 = noise.sample(&mut rng);
                Rgb(base.map(|c| (c + n).clamp(0.0, 255.0) as u8))
            });
            let center = (label == 1).then(|| {
                let side = rng.gen_range(spec.square_min..=spec.square_max);
                let top = rng.gen_range(0..=spec.size - side);
                let left = rng.gen_range(0..=spec.size - side);
                for y in top..top + side {
                    for x in left..left + side {
                        image.put_pixel(x, y, Rgb([245, 245, 245]));
                    }
                }
                let half = (side as f64 - 1.0) / 2.0;
                (top as f64 + half, left as f64 + half)
            });
            ToyImage {
                image,
                label,
                tint,
                center,
            }
        })
        .collect()
}

/// Sizes of the three splits written by [`write_dataset`].
#[derive(Clone, Copy, Debug)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Writes PNGs, `manifest.csv` (`path,target,tint,split`) and `centers.csv`
/// under `dir`. Validation and test splits are tint-balanced.
pub fn write_dataset(dir: &Path, spec: &ToySpec, sizes: SplitSizes, seed: u64) -> Result<PathBuf> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let balanced = ToySpec {
        majority_fraction: 0.5,
        ..spec.clone()
    };
    let splits = [
        ("train", generate(spec, sizes.train, seed)),
        ("val", generate(&balanced, sizes.val, seed.wrapping_add(1))),
        ("test", generate(&balanced, sizes.test, seed.wrapping_add(2))),
    ];
    let manifest = dir.join("manifest.csv");
    let mut m = csv::Writer::from_path(&manifest)?;
    let mut c = csv::Writer::from_path(dir.join("centers.csv"))?;
    m.write_record(["path", "target", "tint", "split"])?;
    c.write_record(["path", "row", "col"])?;
    for (split, images) in &splits {
        for (i, toy) in images.iter().enumerate() {
            let rel = format!("images/{split}_{i:05}.png");
            toy.image.save(dir.join(&rel))?;
            m.write_record([rel.as_str(), &toy.label.to_string(), TINTS[toy.tint], split])?;
            if let Some((r, col)) = toy.center {
                c.write_record([rel, r.to_string(), col.to_string()])?;
            }
        }
    }
    m.flush().map_err(|e| Error::io(&manifest, e))?;
    c.flush().map_err(|e| Error::io(dir.join("centers.csv"), e))?;
    Ok(manifest)
}
