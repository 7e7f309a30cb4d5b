use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentationPolicy};
use super::seed::{self, tags};
use super::{Domain, ImageSet, ImageShape};
use crate::{Error, Result};

/// `views × count` augmented images of one domain, stored view-major:
/// image `i` of view `v` lives at position `v·count + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    views: usize,
    count: usize,
    shape: ImageShape,
    data: Vec<f64>,
    seeds: Vec<u64>,
}

impl ViewBatch {
    pub fn views(&self) -> usize {
        self.views
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    /// All `views·count` images, view-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn image(&self, view: usize, index: usize) -> &[f64] {
        let n = self.shape.len();
        let at = (view * self.count + index) * n;
        &self.data[at..at + n]
    }

    /// Augmentation seed of each image, in storage order.
    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }
}

/// Paired multi-view mini-batch of both domains.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch {
    pub source: ViewBatch,
    pub target: ViewBatch,
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
}

impl DomainBatch {
    pub fn views(&self) -> usize {
        self.source.views
    }
}

fn check_views(views: usize) -> Result<()> {
    if views == 2 || views == 4 {
        Ok(())
    } else {
        Err(Error::invalid(
            "views",
            alloc::format!("{views} views unsupported, expected 2 or 4"),
        ))
    }
}

/// Expands `indices` of `set` into `views` augmented copies each, seeding
/// every view with `view_seed(seed, domain, index, view)`.
pub fn make_views(
    set: &ImageSet,
    indices: &[usize],
    views: usize,
    policy: &AugmentationPolicy,
    seed: u64,
    domain: Domain,
) -> Result<ViewBatch> {
    check_views(views)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= set.len()) {
        return Err(Error::Data(alloc::format!(
            "index {bad} out of range for {} images",
            set.len()
        )));
    }
    let shape = set.shape();
    let mut data = Vec::with_capacity(views * indices.len() * shape.len());
    let mut seeds = Vec::with_capacity(views * indices.len());
    for v in 0..views {
        for &i in indices {
            let s = seed::view_seed(seed, domain, i, v);
            data.extend(augment(set.image(i), shape, policy, s));
            seeds.push(s);
        }
    }
    Ok(ViewBatch {
        views,
        count: indices.len(),
        shape,
        data,
        seeds,
    })
}

/// Draws `n` distinct images per domain (independently) and expands each
/// into `views` augmented views.
pub fn make_minibatch(
    source: &ImageSet,
    target: &ImageSet,
    n: usize,
    views: usize,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<DomainBatch> {
    check_views(views)?;
    if n == 0 || n > source.len().min(target.len()) {
        return Err(Error::invalid(
            "n",
            alloc::format!(
                "batch of {n} from domains of {} and {} images",
                source.len(),
                target.len()
            ),
        ));
    }
    let mut rng = seed::rng(seed::derive(seed, &[tags::SAMPLER]));
    let source_indices = rand::seq::index::sample(&mut rng, source.len(), n).into_vec();
    let target_indices = rand::seq::index::sample(&mut rng, target.len(), n).into_vec();
    Ok(DomainBatch {
        source: make_views(source, &source_indices, views, policy, seed, Domain::Source)?,
        target: make_views(target, &target_indices, views, policy, seed, Domain::Target)?,
        source_indices,
        target_indices,
    })
}

/// Serializable position of an [`EpochSampler`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub key: [u8; 32],
    pub word_pos: u128,
}

/// Shuffles each domain once per epoch and cuts the permutations into
/// batches.
///
/// An epoch is one pass over the smaller domain: with equally sized domains
/// every index of each domain appears exactly once. A trailing batch of a
/// single image is merged into the previous batch, since a contrastive batch
/// needs at least two images.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: seed::rng(seed::derive(seed, &[tags::SAMPLER])),
        }
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            key: self.rng.get_seed(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: SamplerState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.key);
        rng.set_word_pos(state.word_pos);
        Self { rng }
    }

    pub fn steps_per_epoch(len_source: usize, len_target: usize, n: usize) -> usize {
        let len = len_source.min(len_target);
        if n == 0 || len < 2 {
            return 0;
        }
        let full = len / n;
        match len % n {
            0 => full,
            1 if full > 0 => full,
            _ => full + 1,
        }
    }

    /// Index batches `(source, target)` for the next epoch.
    pub fn next_epoch(&mut self, len_source: usize, len_target: usize, n: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut perm_s: Vec<usize> = (0..len_source).collect();
        let mut perm_t: Vec<usize> = (0..len_target).collect();
        perm_s.shuffle(&mut self.rng);
        perm_t.shuffle(&mut self.rng);
        let len = len_source.min(len_target);
        let steps = Self::steps_per_epoch(len_source, len_target, n);
        (0..steps)
            .map(|s| {
                let start = s * n;
                let end = if s + 1 == steps { len } else { start + n };
                (perm_s[start..end].to_vec(), perm_t[start..end].to_vec())
            })
            .collect()
    }
}
