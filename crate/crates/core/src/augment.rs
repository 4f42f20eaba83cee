//! Stochastic augmentation producing the two views of a sample used by
//! contrastive training: random resized crop, small random rotation, and a
//! nearest-neighbour resize to the network input size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskio::SemanticMask;
use crate::rng::PortableRng;

/// Aspect-ratio range sampled for random resized crops.
pub const CROP_ASPECT_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const CROP_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Lower bound on crop area as a fraction of the source area.
    pub min_crop_ratio: f64,
    pub max_rotation_deg: f64,
    pub out_w: usize,
    pub out_h: usize,
    /// Class written where rotation exposes pixels outside the source frame.
    pub fill_class: u8,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            min_crop_ratio: 0.6,
            max_rotation_deg: 3.0,
            out_w: 80,
            out_h: 64,
            fill_class: 0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_crop_ratio > 0.0 && self.min_crop_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "min_crop_ratio must be in (0, 1], got {}",
                self.min_crop_ratio
            )));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite()) {
            return Err(Error::Config(format!(
                "max_rotation_deg must be >= 0, got {}",
                self.max_rotation_deg
            )));
        }
        if self.out_w == 0 || self.out_h == 0 {
            return Err(Error::Config("augmentation output size must be positive".into()));
        }
        Ok(())
    }

    /// Both views of every pair are identical under this config.
    pub fn is_degenerate(&self) -> bool {
        self.min_crop_ratio >= 1.0 && self.max_rotation_deg == 0.0
    }
}

/// Crop rectangle in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl CropRect {
    pub fn area_fraction(&self, src_w: usize, src_h: usize) -> f64 {
        (self.w * self.h) as f64 / (src_w * src_h) as f64
    }
}

/// Samples a crop covering at least `min_ratio` of a `w x h` source. Falls back
/// to the full frame when no draw fits.
pub fn sample_crop(w: usize, h: usize, min_ratio: f64, rng: &mut PortableRng) -> CropRect {
    let area = (w * h) as f64;
    let min_pixels = (min_ratio * area).ceil() as usize;
    let (lo, hi) = (CROP_ASPECT_RANGE.0.ln(), CROP_ASPECT_RANGE.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.random_range(min_ratio..=1.0);
        let aspect = rng.random_range(lo..=hi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw == 0 || ch == 0 || cw > w || ch > h || cw * ch < min_pixels {
            continue;
        }
        let x = rng.random_range(0..=w - cw);
        let y = rng.random_range(0..=h - ch);
        return CropRect { x, y, w: cw, h: ch };
    }
    CropRect { x: 0, y: 0, w, h }
}

/// Random crop with area fraction `>= min_ratio`, resized back to the source
/// dimensions. Returns the crop rectangle alongside the result.
pub fn random_resized_crop(
    mask: &SemanticMask,
    min_ratio: f64,
    rng: &mut PortableRng,
) -> Result<(SemanticMask, CropRect)> {
    if !(min_ratio > 0.0 && min_ratio <= 1.0) {
        return Err(Error::Config(format!("min_ratio must be in (0, 1], got {min_ratio}")));
    }
    let rect = sample_crop(mask.width(), mask.height(), min_ratio, rng);
    let out = mask
        .crop(rect.x, rect.y, rect.w, rect.h)?
        .resize_nearest(mask.width(), mask.height())?;
    Ok((out, rect))
}

/// Rotates by `deg` about the mask centre with nearest-neighbour sampling.
/// Positive angles turn the content clockwise on screen (y axis down).
pub fn rotate(mask: &SemanticMask, deg: f64, fill: u8) -> Result<SemanticMask> {
    if usize::from(fill) >= mask.palette_size() {
        return Err(Error::Palette(format!("fill class {fill} outside palette")));
    }
    if deg == 0.0 {
        return Ok(mask.clone());
    }
    let (w, h) = (mask.width(), mask.height());
    let (s, c) = deg.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let py = y as f64 + 0.5 - cy;
        for x in 0..w {
            let px = x as f64 + 0.5 - cx;
            // inverse rotation
            let sx = (c * px + s * py + cx).floor();
            let sy = (-s * px + c * py + cy).floor();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                out.push(mask.get(sx as usize, sy as usize));
            } else {
                out.push(fill);
            }
        }
    }
    mask.like(w, h, out)
}

/// Rotation by an angle drawn uniformly from `[-max_deg, max_deg]`. Returns the
/// angle used.
pub fn random_rotation(
    mask: &SemanticMask,
    max_deg: f64,
    fill: u8,
    rng: &mut PortableRng,
) -> Result<(SemanticMask, f64)> {
    if !(max_deg >= 0.0) {
        return Err(Error::Config(format!("max rotation must be >= 0, got {max_deg}")));
    }
    if max_deg == 0.0 {
        return Ok((mask.clone(), 0.0));
    }
    let angle = rng.random_range(-max_deg..=max_deg);
    Ok((rotate(mask, angle, fill)?, angle))
}

/// One augmented view with the random parameters that produced it.
#[derive(Debug, Clone)]
pub struct AugmentDraw {
    pub mask: SemanticMask,
    pub crop: CropRect,
    pub angle_deg: f64,
}

/// Crop, then rotate, then resize to the configured output size.
pub fn augment_once(mask: &SemanticMask, config: &AugmentConfig, rng: &mut PortableRng) -> Result<AugmentDraw> {
    let crop = sample_crop(mask.width(), mask.height(), config.min_crop_ratio, rng);
    let cropped = mask.crop(crop.x, crop.y, crop.w, crop.h)?;
    let (rotated, angle_deg) = random_rotation(&cropped, config.max_rotation_deg, config.fill_class, rng)?;
    Ok(AugmentDraw {
        mask: rotated.resize_nearest(config.out_w, config.out_h)?,
        crop,
        angle_deg,
    })
}

/// Two independent augmentations of the same source.
pub fn make_pair(
    mask: &SemanticMask,
    config: &AugmentConfig,
    rng: &mut PortableRng,
) -> Result<(SemanticMask, SemanticMask)> {
    config.validate()?;
    let a = augment_once(mask, config, rng)?;
    let b = augment_once(mask, config, rng)?;
    Ok((a.mask, b.mask))
}
