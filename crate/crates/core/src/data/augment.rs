use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::seed::{self, tags};
use super::synth::bilinear;
use super::ImageShape;
use crate::{Error, Result};

/// One stochastic image transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    /// Crop covering a random fraction of the area (aspect ratio in
    /// `[3/4, 4/3]`), resized back to full resolution.
    RandomResizedCrop {
        scale: [f64; 2],
    },
    /// Additive brightness offset in `±brightness`, contrast factor in
    /// `1 ± contrast` around the image mean.
    ColorJitter {
        brightness: f64,
        contrast: f64,
    },
    GaussianNoise {
        sigma: f64,
    },
    /// Fills a random rectangle covering an `area` fraction with a random
    /// grey level.
    RandomErasing {
        area: [f64; 2],
    },
    /// Independent per-channel gains in `1 ± strength` (colour images only).
    Colorize {
        strength: f64,
    },
}

impl Transform {
    fn validate(&self) -> Result<()> {
        let range_ok = |r: &[f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1] <= 1.0;
        match self {
            Transform::RandomResizedCrop { scale } if !range_ok(scale) => {
                Err(Error::invalid("scale", "crop scale range must lie in (0, 1]"))
            }
            Transform::RandomErasing { area } if !range_ok(area) => {
                Err(Error::invalid("area", "erasing area range must lie in (0, 1]"))
            }
            Transform::ColorJitter { brightness, contrast } if *brightness < 0.0 || !(0.0..1.0).contains(contrast) => {
                Err(Error::invalid(
                    "color_jitter",
                    "brightness must be >= 0 and contrast in [0, 1)",
                ))
            }
            Transform::GaussianNoise { sigma } if *sigma < 0.0 || !sigma.is_finite() => {
                Err(Error::invalid("sigma", "must be finite and >= 0"))
            }
            Transform::Colorize { strength } if !(0.0..1.0).contains(strength) => {
                Err(Error::invalid("strength", "must lie in [0, 1)"))
            }
            _ => Ok(()),
        }
    }
}

/// Ordered list of transforms applied to every view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Transform>", into = "Vec<Transform>")]
pub struct AugmentationPolicy {
    transforms: Vec<Transform>,
}

impl TryFrom<Vec<Transform>> for AugmentationPolicy {
    type Error = Error;

    fn try_from(transforms: Vec<Transform>) -> Result<Self> {
        Self::new(transforms)
    }
}

impl From<AugmentationPolicy> for Vec<Transform> {
    fn from(p: AugmentationPolicy) -> Self {
        p.transforms
    }
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::digits()
    }
}

impl AugmentationPolicy {
    pub fn new(transforms: Vec<Transform>) -> Result<Self> {
        transforms.iter().try_for_each(Transform::validate)?;
        Ok(Self { transforms })
    }

    pub fn identity() -> Self {
        Self { transforms: Vec::new() }
    }

    /// Digit defaults. No flips: orientation carries class information.
    pub fn digits() -> Self {
        Self {
            transforms: alloc::vec![
                Transform::RandomResizedCrop { scale: [0.6, 1.0] },
                Transform::ColorJitter {
                    brightness: 0.4,
                    contrast: 0.4,
                },
                Transform::GaussianNoise { sigma: 0.05 },
                Transform::RandomErasing { area: [0.02, 0.1] },
            ],
        }
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }
}

/// Applies `policy` to one channels-last image. Pure in `(image, policy, seed)`;
/// each transform draws from its own stream derived from `(seed, position)`.
pub fn augment(image: &[f64], shape: ImageShape, policy: &AugmentationPolicy, seed: u64) -> Vec<f64> {
    let mut img = image.to_vec();
    for (pos, t) in policy.transforms.iter().enumerate() {
        let mut rng = seed::rng(seed::derive(seed, &[tags::TRANSFORM, pos as u64]));
        match t {
            Transform::RandomResizedCrop { scale } => img = resized_crop(&img, shape, *scale, &mut rng),
            Transform::ColorJitter { brightness, contrast } => {
                let b = if *brightness > 0.0 {
                    rng.random_range(-brightness..=*brightness)
                } else {
                    0.0
                };
                let c = if *contrast > 0.0 {
                    rng.random_range(1.0 - contrast..=1.0 + contrast)
                } else {
                    1.0
                };
                let mean = img.iter().sum::<f64>() / img.len() as f64;
                img.iter_mut()
                    .for_each(|p| *p = ((*p - mean) * c + mean + b).clamp(0.0, 1.0));
            }
            Transform::GaussianNoise { sigma } => {
                if *sigma > 0.0 {
                    let normal = Normal::new(0.0, *sigma).expect("validated sigma");
                    img.iter_mut()
                        .for_each(|p| *p = (*p + normal.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
            Transform::RandomErasing { area } => erase(&mut img, shape, *area, &mut rng),
            Transform::Colorize { strength } => {
                if shape.channels > 1 {
                    let gains: Vec<f64> = (0..shape.channels)
                        .map(|_| rng.random_range(1.0 - strength..=1.0 + strength))
                        .collect();
                    for (i, p) in img.iter_mut().enumerate() {
                        *p = (*p * gains[i % shape.channels]).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    img
}

fn crop_box(shape: ImageShape, area_range: [f64; 2], aspect: (f64, f64), rng: &mut impl Rng) -> (f64, f64, f64, f64) {
    let (h, w) = (shape.height as f64, shape.width as f64);
    let area = rng.random_range(area_range[0]..=area_range[1]) * h * w;
    let log_ratio = rng.random_range(libm::log(aspect.0)..=libm::log(aspect.1));
    let ratio = libm::exp(log_ratio);
    let ch = libm::sqrt(area / ratio).min(h);
    let cw = libm::sqrt(area * ratio).min(w);
    let top = rng.random_range(0.0..=h - ch);
    let left = rng.random_range(0.0..=w - cw);
    (top, left, ch, cw)
}

fn resized_crop(img: &[f64], shape: ImageShape, scale: [f64; 2], rng: &mut impl Rng) -> Vec<f64> {
    let (top, left, ch, cw) = crop_box(shape, scale, (3.0 / 4.0, 4.0 / 3.0), rng);
    let (h, w) = (shape.height, shape.width);
    let mut out = Vec::with_capacity(img.len());
    for y in 0..h {
        for x in 0..w {
            let sy = (top + (y as f64 + 0.5) * ch / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = (left + (x as f64 + 0.5) * cw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            for c in 0..shape.channels {
                out.push(bilinear(img, shape, sy, sx, c, 0.0));
            }
        }
    }
    out
}

fn erase(img: &mut [f64], shape: ImageShape, area: [f64; 2], rng: &mut impl Rng) {
    let (top, left, eh, ew) = crop_box(shape, area, (0.3, 3.3), rng);
    let fill: f64 = rng.random();
    let (y0, x0) = (libm::round(top) as usize, libm::round(left) as usize);
    let y1 = (y0 + libm::round(eh).max(1.0) as usize).min(shape.height);
    let x1 = (x0 + libm::round(ew).max(1.0) as usize).min(shape.width);
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..shape.channels {
                img[(y * shape.width + x) * shape.channels + c] = fill;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ramp(shape: ImageShape) -> Vec<f64> {
        (0..shape.len()).map(|i| (i % 17) as f64 / 16.0).collect()
    }

    #[test]
    fn identity_policy_returns_input() {
        let shape = ImageShape::new(8, 8, 1);
        let img = ramp(shape);
        assert_eq!(augment(&img, shape, &AugmentationPolicy::identity(), 42), img);
    }

    #[test]
    fn same_seed_same_output_and_bounds_hold() {
        let shape = ImageShape::new(16, 16, 3);
        let img = ramp(shape);
        let mut policy = AugmentationPolicy::digits().transforms().to_vec();
        policy.push(Transform::Colorize { strength: 0.3 });
        let policy = AugmentationPolicy::new(policy).unwrap();
        let a = augment(&img, shape, &policy, 7);
        assert_eq!(a, augment(&img, shape, &policy, 7));
        assert_ne!(a, augment(&img, shape, &policy, 8));
        assert_eq!(a.len(), img.len());
        assert!(a.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn gaussian_noise_has_requested_sigma() {
        let shape = ImageShape::new(16, 16, 1);
        let img = vec![0.5; shape.len()];
        let policy = AugmentationPolicy::new(vec![Transform::GaussianNoise { sigma: 0.1 }]).unwrap();
        let mut diffs = Vec::new();
        for seed in 0..40 {
            let out = augment(&img, shape, &policy, seed);
            diffs.extend(out.iter().zip(&img).map(|(o, i)| o - i));
        }
        assert!(diffs.len() >= 10_000);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (diffs.len() - 1) as f64;
        let sd = libm::sqrt(var);
        assert!((sd - 0.1).abs() < 0.02, "sample sigma {sd}");
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        for scale in [[0.0, 1.0], [0.5, 1.2], [0.9, 0.5]] {
            assert!(AugmentationPolicy::new(vec![Transform::RandomResizedCrop { scale }]).is_err());
        }
        assert!(AugmentationPolicy::new(vec![Transform::RandomResizedCrop { scale: [1.0, 1.0] }]).is_ok());
    }

    #[test]
    fn crop_keeps_shape_and_range() {
        let shape = ImageShape::new(8, 8, 1);
        let img = ramp(shape);
        let policy = AugmentationPolicy::new(vec![Transform::RandomResizedCrop { scale: [0.3, 0.5] }]).unwrap();
        let out = augment(&img, shape, &policy, 3);
        assert_eq!(out.len(), img.len());
        assert!(out.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
