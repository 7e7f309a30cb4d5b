//! Procedural digit images and domain-shifted counterparts.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::seed::{self, tags};
use super::{Domain, ImageSet, ImageShape};
use crate::{Error, Result};

/// Stroke segments in unit-box coordinates (x right, y down).
const SEGMENTS: [[f64; 4]; 7] = [
    [0.25, 0.15, 0.75, 0.15], // top
    [0.75, 0.15, 0.75, 0.50], // upper right
    [0.75, 0.50, 0.75, 0.85], // lower right
    [0.25, 0.85, 0.75, 0.85], // bottom
    [0.25, 0.50, 0.25, 0.85], // lower left
    [0.25, 0.15, 0.25, 0.50], // upper left
    [0.25, 0.50, 0.75, 0.50], // middle
];

/// Segment masks for digits 0-9, bit `i` selecting `SEGMENTS[i]`.
const GLYPHS: [u8; 10] = [
    0b011_1111, 0b000_0110, 0b101_1011, 0b100_1111, 0b110_0110, 0b110_1101, 0b111_1101, 0b000_0111, 0b111_1111,
    0b110_1111,
];

/// Parameters of the procedural digit generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DigitSpec {
    pub count: usize,
    pub classes: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DigitSpec {
    fn default() -> Self {
        Self {
            count: 2000,
            classes: 10,
            size: 16,
            seed: 0,
        }
    }
}

/// Renders `count` grayscale digits with balanced labels `i % classes`.
///
/// Each digit is a seven-segment glyph with jittered stroke endpoints, drawn
/// through a random rotation, scale, shear and translation with anti-aliased
/// strokes of random width.
pub fn synth_digits(spec: &DigitSpec) -> Result<ImageSet> {
    if !(2..=10).contains(&spec.classes) {
        return Err(Error::invalid("classes", "must lie in 2..=10"));
    }
    if spec.size < 8 || spec.count == 0 {
        return Err(Error::invalid("size", "images must be at least 8x8 and count non-zero"));
    }
    let size = spec.size;
    let mut pixels = Vec::with_capacity(spec.count * size * size);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let label = i % spec.classes;
        let mut rng = seed::rng(seed::derive(spec.seed, &[tags::DIGITS, i as u64]));
        render_digit(label, size, &mut rng, &mut pixels);
        labels.push(label as u32);
    }
    ImageSet::new(
        ImageShape::new(size, size, 1),
        pixels,
        Some(labels),
        Domain::Source,
        format!(
            "digits(count={},classes={},size={},seed={})",
            spec.count, spec.classes, size, spec.seed
        ),
    )
}

fn render_digit(label: usize, size: usize, rng: &mut impl Rng, out: &mut Vec<f64>) {
    let mut strokes = Vec::with_capacity(7);
    for (bit, seg) in SEGMENTS.iter().enumerate() {
        if GLYPHS[label] & (1 << bit) != 0 {
            let mut s = *seg;
            for v in &mut s {
                *v += rng.random_range(-0.05..0.05);
            }
            strokes.push(s);
        }
    }
    let angle = rng.random_range(-0.25..0.25);
    let scale = rng.random_range(0.8..1.05);
    let shear = rng.random_range(-0.2..0.2);
    let (tx, ty) = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
    let width = rng.random_range(0.045..0.08);
    let ink = rng.random_range(0.8..1.0);
    let (sin, cos) = libm::sincos(angle);
    let aa = 1.0 / size as f64;
    for py in 0..size {
        for px in 0..size {
            // inverse map from pixel centre to glyph coordinates
            let x = (px as f64 + 0.5) / size as f64 - 0.5 - tx;
            let y = (py as f64 + 0.5) / size as f64 - 0.5 - ty;
            let (rx, ry) = (cos * x + sin * y, -sin * x + cos * y);
            let (gx, gy) = ((rx - shear * ry) / scale + 0.5, ry / scale + 0.5);
            let dist = strokes
                .iter()
                .map(|s| segment_distance(gx, gy, s))
                .fold(f64::INFINITY, f64::min);
            let coverage = ((width - dist) / aa + 0.5).clamp(0.0, 1.0);
            out.push(ink * coverage);
        }
    }
}

fn segment_distance(x: f64, y: f64, s: &[f64; 4]) -> f64 {
    let (dx, dy) = (s[2] - s[0], s[3] - s[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((x - s[0]) * dx + (y - s[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (s[0] + t * dx - x, s[1] + t * dy - y);
    libm::sqrt(cx * cx + cy * cy)
}

/// A procedural domain shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shift {
    /// `1 - x` per pixel.
    Invert,
    /// Blends the digit into a seeded low-frequency RGB field as
    /// `|background - x|` per channel.
    ColorizeBackground,
    /// `(1 - weight)·x + weight·u` with per-pixel uniform noise `u`.
    NoiseBlend { weight: f64 },
    /// Random translation (pixels) and rotation (radians) per image.
    AffineJitter { max_shift: f64, max_rotation: f64 },
}

impl Shift {
    pub fn name(&self) -> &'static str {
        match self {
            Shift::Invert => "invert",
            Shift::ColorizeBackground => "colorize_background",
            Shift::NoiseBlend { .. } => "noise_blend",
            Shift::AffineJitter { .. } => "affine_jitter",
        }
    }

    /// Looks a shift up by name with its default parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "invert" => Ok(Shift::Invert),
            "colorize_background" => Ok(Shift::ColorizeBackground),
            "noise_blend" => Ok(Shift::NoiseBlend { weight: 0.5 }),
            "affine_jitter" => Ok(Shift::AffineJitter {
                max_shift: 2.0,
                max_rotation: 0.35,
            }),
            other => Err(Error::Unknown {
                kind: "shift",
                name: String::from(other),
            }),
        }
    }

    pub fn is_color(&self) -> bool {
        matches!(self, Shift::ColorizeBackground)
    }
}

/// Returns `(base as source, shifted copy as target)`.
///
/// Labels are carried over untouched. When the shift produces colour, the
/// source is promoted to three identical channels so both domains share one
/// image shape.
pub fn synth_domain_pair(base: &ImageSet, shift: Shift, seed: u64) -> Result<(ImageSet, ImageSet)> {
    if base.is_empty() {
        return Err(Error::Data("cannot shift an empty image set".into()));
    }
    let source = if shift.is_color() { base.to_rgb() } else { base.clone() }.with_domain(Domain::Source);
    let shape = source.shape();
    let mut pixels = Vec::with_capacity(source.pixels().len());
    for i in 0..source.len() {
        let img = source.image(i);
        let mut rng = seed::rng(seed::derive(seed, &[tags::SHIFT, i as u64]));
        match shift {
            Shift::Invert => pixels.extend(img.iter().map(|p| 1.0 - p)),
            Shift::ColorizeBackground => colorize(img, shape, &mut rng, &mut pixels),
            Shift::NoiseBlend { weight } => {
                if !(0.0..=1.0).contains(&weight) {
                    return Err(Error::invalid("weight", "must lie in [0, 1]"));
                }
                pixels.extend(img.iter().map(|p| (1.0 - weight) * p + weight * rng.random::<f64>()));
            }
            Shift::AffineJitter {
                max_shift,
                max_rotation,
            } => {
                let dx = rng.random_range(-1.0..=1.0) * max_shift;
                let dy = rng.random_range(-1.0..=1.0) * max_shift;
                let angle = rng.random_range(-1.0..=1.0) * max_rotation;
                pixels.extend(rotate_translate(img, shape, angle, dx, dy));
            }
        }
    }
    let target = ImageSet::new(
        shape,
        pixels,
        source.labels().map(<[u32]>::to_vec),
        Domain::Target,
        format!("{}+{}(seed={seed})", source.provenance(), shift.name()),
    )?;
    Ok((source, target))
}

/// Low-frequency colour field: a random 4×4 grid of colours, bilinearly
/// upsampled, then combined with the digit as `|bg - x|`.
fn colorize(img: &[f64], shape: ImageShape, rng: &mut impl Rng, out: &mut Vec<f64>) {
    const GRID: usize = 4;
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let mut grid = [[0.0f64; 3]; GRID * GRID];
    let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    for cell in &mut grid {
        for c in 0..3 {
            cell[c] = (base[c] + rng.random_range(-0.3..0.3)).clamp(0.0, 1.0);
        }
    }
    let (h, w) = (shape.height, shape.width);
    for y in 0..h {
        for x in 0..w {
            let gy = (y as f64 + 0.5) / h as f64 * (GRID - 1) as f64;
            let gx = (x as f64 + 0.5) / w as f64 * (GRID - 1) as f64;
            let (y0, x0) = ((gy as usize).min(GRID - 2), (gx as usize).min(GRID - 2));
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            for c in 0..3 {
                let v00 = grid[y0 * GRID + x0][c];
                let v01 = grid[y0 * GRID + x0 + 1][c];
                let v10 = grid[(y0 + 1) * GRID + x0][c];
                let v11 = grid[(y0 + 1) * GRID + x0 + 1][c];
                let bg =
                    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11) + noise.sample(rng);
                let digit = img[(y * w + x) * shape.channels + c.min(shape.channels - 1)];
                out.push((bg.clamp(0.0, 1.0) - digit).abs());
            }
        }
    }
}

/// Bilinear resampling of `img` rotated by `angle` about the centre and
/// shifted by `(dx, dy)` pixels; outside samples read as 0.
pub(crate) fn rotate_translate(img: &[f64], shape: ImageShape, angle: f64, dx: f64, dy: f64) -> Vec<f64> {
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (sin, cos) = libm::sincos(angle);
    let mut out = Vec::with_capacity(img.len());
    for y in 0..h {
        for x in 0..w {
            let (ox, oy) = (x as f64 + 0.5 - cx - dx, y as f64 + 0.5 - cy - dy);
            let sx = cos * ox + sin * oy + cx - 0.5;
            let sy = -sin * ox + cos * oy + cy - 0.5;
            for c in 0..ch {
                out.push(bilinear(img, shape, sy, sx, c, 0.0));
            }
        }
    }
    out
}

/// Samples channel `c` at fractional `(y, x)`; pixels outside the image read
/// as `fill`.
pub(crate) fn bilinear(img: &[f64], shape: ImageShape, y: f64, x: f64, c: usize, fill: f64) -> f64 {
    let (h, w, ch) = (shape.height as isize, shape.width as isize, shape.channels);
    let (y0, x0) = (libm::floor(y), libm::floor(x));
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| {
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            fill
        } else {
            img[(yy as usize * shape.width + xx as usize) * ch + c]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
        + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ImageSet {
        synth_digits(&DigitSpec {
            count: 20,
            classes: 4,
            size: 16,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn digits_are_balanced_and_inked() {
        let set = base();
        assert_eq!(set.len(), 20);
        assert_eq!(set.labels().unwrap()[..5], [0, 1, 2, 3, 0]);
        for i in 0..set.len() {
            let ink: f64 = set.image(i).iter().sum();
            assert!(ink > 5.0 && ink < 128.0, "image {i} ink {ink}");
        }
    }

    #[test]
    fn generator_is_seeded() {
        assert_eq!(base(), base());
        let other = synth_digits(&DigitSpec {
            seed: 6,
            ..DigitSpec {
                count: 20,
                classes: 4,
                size: 16,
                seed: 5,
            }
        })
        .unwrap();
        assert_ne!(other.pixels(), base().pixels());
    }

    #[test]
    fn invert_is_one_minus_x() {
        let b = base();
        let (s, t) = synth_domain_pair(&b, Shift::Invert, 1).unwrap();
        assert_eq!(s.pixels(), b.pixels());
        for (x, y) in b.pixels().iter().zip(t.pixels()) {
            assert_eq!(*y, 1.0 - x);
        }
        assert_eq!(t.labels(), b.labels());
        assert_eq!(t.domain(), Domain::Target);
    }

    #[test]
    fn colorize_is_deterministic_and_rgb() {
        let b = base();
        let (s1, t1) = synth_domain_pair(&b, Shift::ColorizeBackground, 9).unwrap();
        let (_, t2) = synth_domain_pair(&b, Shift::ColorizeBackground, 9).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(s1.shape().channels, 3);
        assert_eq!(t1.shape(), s1.shape());
        assert_eq!(t1.labels(), b.labels());
        let (_, t3) = synth_domain_pair(&b, Shift::ColorizeBackground, 10).unwrap();
        assert_ne!(t1.pixels(), t3.pixels());
    }

    #[test]
    fn zero_weight_noise_blend_is_identity() {
        let b = base();
        let (s, t) = synth_domain_pair(&b, Shift::NoiseBlend { weight: 0.0 }, 3).unwrap();
        assert_eq!(s.pixels(), t.pixels());
    }

    #[test]
    fn zero_affine_jitter_is_identity() {
        let b = base();
        let shift = Shift::AffineJitter {
            max_shift: 0.0,
            max_rotation: 0.0,
        };
        let (s, t) = synth_domain_pair(&b, shift, 3).unwrap();
        for (x, y) in s.pixels().iter().zip(t.pixels()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_shift_name_is_rejected() {
        assert!(matches!(
            Shift::from_name("rotate"),
            Err(Error::Unknown { kind: "shift", .. })
        ));
        assert_eq!(Shift::from_name("invert").unwrap(), Shift::Invert);
    }
}
