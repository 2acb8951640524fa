//! Class-activation attention maps and the crops they propose.

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{resize_bilinear, resize_channels};

/// Mask threshold `t`; cells strictly above it are positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    threshold: f64,
}

impl MaskConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!(
                "mask threshold {threshold} outside [0, 1]"
            )));
        }
        Ok(Self { threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BoundingBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            row_min: 0,
            col_min: 0,
            row_max: height - 1,
            col_max: width - 1,
        }
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSource {
    Expert(usize),
    Overall,
}

/// The three forms of one attention map.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub raw_cam: Array2<f64>,
    pub upsampled: Array2<f64>,
    pub normalized: Array2<f64>,
}

/// A crop of the input, resized back to the input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRegion {
    pub bbox: BoundingBox,
    /// `(C, H_in, W_in)`
    pub crop: Array3<f64>,
    pub source: RegionSource,
}

/// Weighted channel sum per spatial position of `x''` (`(C, H, W)`).
pub fn compute_cam(activation: ArrayView3<f64>, class_weights: ArrayView1<f64>) -> Result<Array2<f64>> {
    let (c, h, w) = activation.dim();
    if class_weights.len() != c {
        return Err(Error::Config(format!(
            "CAM weights have length {}, activation has {c} channels",
            class_weights.len()
        )));
    }
    let mut cam = Array2::<f64>::zeros((h, w));
    for (plane, &wt) in activation.axis_iter(Axis(0)).zip(class_weights.iter()) {
        if wt != 0.0 {
            cam.scaled_add(wt, &plane);
        }
    }
    Ok(cam)
}

pub fn upsample_bilinear(cam: ArrayView2<f64>, target: (usize, usize)) -> Result<Array2<f64>> {
    if target.0 == 0 || target.1 == 0 || cam.is_empty() {
        return Err(Error::Config(format!(
            "cannot resample a {:?} map to {target:?}",
            cam.dim()
        )));
    }
    Ok(resize_bilinear(cam, target))
}

/// `(x − min) / (max − min)`; a constant map becomes all zeros.
pub fn normalize_minmax(map: ArrayView2<f64>) -> Array2<f64> {
    let (min, max) = map.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = max - min;
    if !(range > 0.0) {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| ((v - min) / range).clamp(0.0, 1.0))
}

pub fn threshold_mask(norm_map: ArrayView2<f64>, cfg: MaskConfig) -> Array2<bool> {
    norm_map.mapv(|v| v > cfg.threshold)
}

/// Tightest box around the positive cells, if any.
pub fn mask_bbox(mask: ArrayView2<bool>) -> Option<BoundingBox> {
    let mut bbox: Option<BoundingBox> = None;
    for ((r, c), &on) in mask.indexed_iter() {
        if !on {
            continue;
        }
        let b = bbox.get_or_insert(BoundingBox {
            row_min: r,
            col_min: c,
            row_max: r,
            col_max: c,
        });
        b.row_min = b.row_min.min(r);
        b.row_max = b.row_max.max(r);
        b.col_min = b.col_min.min(c);
        b.col_max = b.col_max.max(c);
    }
    bbox
}

/// Crops the positive envelope of `mask` out of `image` (`(C, H, W)`) and
/// resizes it to `H × W`. An empty mask selects the whole image.
pub fn extract_region(
    image: ArrayView3<f64>,
    mask: ArrayView2<bool>,
    source: RegionSource,
) -> Result<AttentionRegion> {
    let (_, h, w) = image.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Config(format!(
            "mask of size {:?} does not match image of size {h}x{w}",
            mask.dim()
        )));
    }
    let bbox = mask_bbox(mask).unwrap_or_else(|| BoundingBox::full(h, w));
    let window = image.slice(s![.., bbox.row_min..=bbox.row_max, bbox.col_min..=bbox.col_max]);
    Ok(AttentionRegion {
        bbox,
        crop: resize_channels(window, (h, w)),
        source,
    })
}

/// Raw CAM, its upsampling to `target` and its normalisation.
pub fn attention_map(
    activation: ArrayView3<f64>,
    class_weights: ArrayView1<f64>,
    target: (usize, usize),
) -> Result<AttentionMap> {
    let raw_cam = compute_cam(activation, class_weights)?;
    let upsampled = upsample_bilinear(raw_cam.view(), target)?;
    let normalized = normalize_minmax(upsampled.view());
    Ok(AttentionMap {
        raw_cam,
        upsampled,
        normalized,
    })
}

/// Sum of normalised maps, renormalised.
pub fn overall_map(norm_maps: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
    let first = norm_maps
        .first()
        .ok_or_else(|| Error::Config("overall attention needs at least one map".into()))?;
    let mut sum = Array2::<f64>::zeros(first.dim());
    for m in norm_maps {
        if m.dim() != first.dim() {
            return Err(Error::Config("attention maps differ in size".into()));
        }
        Zip::from(&mut sum).and(m).for_each(|s, &v| *s += v);
    }
    Ok(normalize_minmax(sum.view()))
}

pub fn overall_attention(
    norm_maps: &[ArrayView2<f64>],
    image: ArrayView3<f64>,
    cfg: MaskConfig,
) -> Result<AttentionRegion> {
    let combined = overall_map(norm_maps)?;
    let mask = threshold_mask(combined.view(), cfg);
    extract_region(image, mask.view(), RegionSource::Overall)
}

/// Region proposed by one normalised map.
pub fn region_from_map(
    norm_map: ArrayView2<f64>,
    image: ArrayView3<f64>,
    cfg: MaskConfig,
    source: RegionSource,
) -> Result<AttentionRegion> {
    let mask = threshold_mask(norm_map, cfg);
    extract_region(image, mask.view(), source)
}
