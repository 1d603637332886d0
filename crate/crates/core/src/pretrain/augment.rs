//! Two-view augmentation: random square crops at two scales, horizontal
//! flip, brightness/contrast jitter and Gaussian blur.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Output sides of the large and the small view.
    pub crop_sizes: (usize, usize),
    /// Crop area as a fraction of the image area.
    pub large_scale_range: (f64, f64),
    pub small_scale_range: (f64, f64),
    pub hflip_p: f64,
    pub jitter_p: f64,
    pub jitter_strength: f64,
    pub blur: bool,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            crop_sizes: (48, 24),
            large_scale_range: (0.14, 1.0),
            small_scale_range: (0.05, 0.14),
            hflip_p: 0.5,
            jitter_p: 0.8,
            jitter_strength: 0.8,
            blur: true,
            blur_p: 0.5,
            blur_sigma: (0.1, 1.0),
        }
    }
}

impl AugmentSpec {
    /// Full-image crops at `size`, nothing else.
    pub fn identity(size: usize) -> Self {
        Self {
            crop_sizes: (size, size),
            large_scale_range: (1.0, 1.0),
            small_scale_range: (1.0, 1.0),
            hflip_p: 0.0,
            jitter_p: 0.0,
            blur: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.large_scale_range, self.small_scale_range] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::invalid(format!("scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
            }
        }
        for p in [self.hflip_p, self.jitter_p, self.blur_p] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("probability {p} outside [0,1]")));
            }
        }
        if self.crop_sizes.0 == 0 || self.crop_sizes.1 == 0 {
            return Err(Error::invalid("crop sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

impl CropBox {
    pub fn area_fraction(&self, height: usize, width: usize) -> f64 {
        (self.side * self.side) as f64 / (height * width) as f64
    }
}

/// Square crop whose area fraction is drawn uniformly from `range`, with the
/// side rounded to an integer that keeps the fraction inside the range.
pub fn sample_crop(height: usize, width: usize, range: (f64, f64), rng: &mut Rng) -> Result<CropBox> {
    let area = (height * width) as f64;
    let min_side = (range.0 * area).sqrt().ceil().max(1.0) as usize;
    let max_side = ((range.1 * area).sqrt().floor() as usize).min(height.min(width));
    if min_side > max_side {
        return Err(Error::invalid(format!(
            "no square crop of a {height}x{width} image has area fraction in ({}, {})",
            range.0, range.1
        )));
    }
    let target = (rng.uniform_range(range.0, range.1) * area).sqrt().round() as usize;
    let side = target.clamp(min_side, max_side);
    let top = rng.below(height - side + 1);
    let left = rng.below(width - side + 1);
    Ok(CropBox { top, left, side })
}

fn photometric(view: Image, spec: &AugmentSpec, rng: &mut Rng) -> Image {
    let mut v = view;
    if rng.bernoulli(spec.hflip_p) {
        v = v.hflip();
    }
    if rng.bernoulli(spec.jitter_p) {
        let s = spec.jitter_strength;
        let brightness = rng.uniform_range((1.0 - s).max(0.0), 1.0 + s);
        let contrast = rng.uniform_range((1.0 - s).max(0.0), 1.0 + s);
        v = v.map(|x| x * brightness);
        let mean = v.mean();
        v = v.map(|x| (x - mean) * contrast + mean).clamp01();
    }
    if spec.blur && rng.bernoulli(spec.blur_p) {
        v = v.gaussian_blur(rng.uniform_range(spec.blur_sigma.0, spec.blur_sigma.1));
    }
    v
}

/// Views plus the crops they were cut from.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub view_a: Image,
    pub view_b: Image,
    pub crop_a: CropBox,
    pub crop_b: CropBox,
}

pub fn augment_traced(image: &Image, spec: &AugmentSpec, rng: &mut Rng) -> Result<AugmentedPair> {
    spec.validate()?;
    let (h, w) = (image.height, image.width);
    if h.min(w) < spec.crop_sizes.1 {
        return Err(Error::invalid(format!("image {h}x{w} smaller than the {} crop", spec.crop_sizes.1)));
    }
    let crop_a = sample_crop(h, w, spec.large_scale_range, rng)?;
    let crop_b = sample_crop(h, w, spec.small_scale_range, rng)?;
    let cut = |c: CropBox, size: usize| -> Result<Image> { Ok(image.crop(c.top, c.left, c.side, c.side)?.resize(size, size)) };
    let view_a = photometric(cut(crop_a, spec.crop_sizes.0)?, spec, rng);
    let view_b = photometric(cut(crop_b, spec.crop_sizes.1)?, spec, rng);
    Ok(AugmentedPair { view_a, view_b, crop_a, crop_b })
}

/// A large and a small augmented view of `image`.
pub fn augment(image: &Image, spec: &AugmentSpec, rng: &mut Rng) -> Result<(Image, Image)> {
    let p = augment_traced(image, spec, rng)?;
    Ok((p.view_a, p.view_b))
}
