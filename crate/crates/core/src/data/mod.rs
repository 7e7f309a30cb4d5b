//! Digit image sets, synthetic domain shifts, seeded augmentation and
//! multi-view mini-batches.
//!
//! Images are stored channels-last (`H×W×C`) as `f64` values in `[0, 1]`.

mod augment;
mod batch;
pub mod idx;
pub mod seed;
mod synth;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentationPolicy, Transform};
pub use batch::{make_minibatch, make_views, DomainBatch, EpochSampler, SamplerState, ViewBatch};
pub use synth::{synth_digits, synth_domain_pair, DigitSpec, Shift};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Constant mixed into derived seeds.
    pub const fn tag(self) -> u64 {
        match self {
            Domain::Source => 0x0053_5243,
            Domain::Target => 0x0054_4754,
        }
    }
}

/// A set of same-shaped images with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    shape: ImageShape,
    pixels: Vec<f64>,
    labels: Option<Vec<u32>>,
    domain: Domain,
    provenance: String,
}

impl ImageSet {
    /// Validates sizes and clamps pixel values into `[0, 1]`.
    pub fn new(
        shape: ImageShape,
        mut pixels: Vec<f64>,
        labels: Option<Vec<u32>>,
        domain: Domain,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Data(alloc::format!(
                "image shape {shape:?} has a zero dimension"
            )));
        }
        if !pixels.len().is_multiple_of(shape.len()) {
            return Err(Error::Data(alloc::format!(
                "{} pixel values do not divide into images of {}",
                pixels.len(),
                shape.len()
            )));
        }
        let count = pixels.len() / shape.len();
        if let Some(labels) = &labels {
            if labels.len() != count {
                return Err(Error::Data(alloc::format!(
                    "{} labels for {count} images",
                    labels.len()
                )));
            }
        }
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Ok(Self {
            shape,
            pixels,
            labels,
            domain,
            provenance: provenance.into(),
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let n = self.shape.len();
        &self.pixels[index * n..(index + 1) * n]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn with_labels(mut self, labels: Option<Vec<u32>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.len() {
                return Err(Error::Data(alloc::format!(
                    "{} labels for {} images",
                    l.len(),
                    self.len()
                )));
            }
        }
        self.labels = labels;
        Ok(self)
    }

    /// `1 + max label`, or `None` without labels.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m as usize + 1))
    }

    /// Replicates a single-channel set into three identical channels.
    pub fn to_rgb(&self) -> Self {
        if self.shape.channels == 3 {
            return self.clone();
        }
        let pixels = self
            .pixels
            .chunks(self.shape.channels)
            .flat_map(|px| [px[0]; 3])
            .collect();
        Self {
            shape: ImageShape::new(self.shape.height, self.shape.width, 3),
            pixels,
            labels: self.labels.clone(),
            domain: self.domain,
            provenance: self.provenance.clone(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            shape: self.shape,
            pixels,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            domain: self.domain,
            provenance: self.provenance.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn construction_clamps_and_validates() {
        let set = ImageSet::new(
            ImageShape::new(1, 2, 1),
            vec![-0.5, 1.5, 0.25, 0.75],
            Some(vec![0, 1]),
            Domain::Source,
            "t",
        )
        .unwrap();
        assert_eq!(set.pixels(), &[0.0, 1.0, 0.25, 0.75]);
        assert_eq!(set.len(), 2);
        assert_eq!(set.num_classes(), Some(2));
        assert!(ImageSet::new(ImageShape::new(1, 2, 1), vec![0.0; 3], None, Domain::Source, "t").is_err());
        assert!(ImageSet::new(
            ImageShape::new(1, 2, 1),
            vec![0.0; 4],
            Some(vec![1]),
            Domain::Source,
            "t"
        )
        .is_err());
    }

    #[test]
    fn rgb_promotion_replicates_channels() {
        let set = ImageSet::new(ImageShape::new(1, 2, 1), vec![0.1, 0.9], None, Domain::Target, "t").unwrap();
        let rgb = set.to_rgb();
        assert_eq!(rgb.shape().channels, 3);
        assert_eq!(rgb.pixels(), &[0.1, 0.1, 0.1, 0.9, 0.9, 0.9]);
    }
}
