//! Contrastive and domain-alignment objectives.
//!
//! Embedding matrices are view-major: with `N` images and two views, row `i`
//! and row `i + N` are the two views of image `i` and form a positive pair.
//! Every loss normalizes its rows itself, so inputs need not be unit-norm and
//! scaling a row by a positive factor never changes a loss value.
//!
//! Source and target are always handled as separate matrices; no cross-domain
//! similarity is ever formed.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, NodeId, Tensor, NORM_EPS};
use crate::{Error, Result};

/// Default softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// Positive partner of every anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    positives: Vec<usize>,
}

impl Pairing {
    /// Two views of `n` images stacked view-major: `i ↔ i + n`.
    pub fn two_view(n: usize) -> Result<Self> {
        Self::new((0..2 * n).map(|i| (i + n) % (2 * n)).collect())
    }

    /// Arbitrary pairing; must be a fixed-point-free involution over at least
    /// four anchors.
    pub fn new(positives: Vec<usize>) -> Result<Self> {
        let m = positives.len();
        if m < 4 {
            return Err(Error::invalid(
                "pairing",
                alloc::format!("{m} anchors, need at least 4"),
            ));
        }
        for (i, &p) in positives.iter().enumerate() {
            if p >= m || p == i || positives[p] != i {
                return Err(Error::invalid(
                    "pairing",
                    alloc::format!("anchor {i} has invalid positive {p}"),
                ));
            }
        }
        Ok(Self { positives })
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn positive(&self, anchor: usize) -> usize {
        self.positives[anchor]
    }

    /// Largest admissible removal count: all negatives but one.
    pub fn max_removal(&self) -> usize {
        self.len() - 3
    }
}

/// Cosine similarities of all anchor pairs plus the pairing they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Tensor,
    pairing: Pairing,
}

impl SimilarityMatrix {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.data()[i * self.pairing.len() + j]
    }

    pub fn pairing(&self) -> &Pairing {
        &self.pairing
    }
}

fn unit_rows(z: &Tensor) -> Result<Vec<f64>> {
    let (_, d) = z.dims2().ok_or_else(|| {
        Error::invalid(
            "embeddings",
            alloc::format!("expected a matrix, got shape {:?}", z.shape()),
        )
    })?;
    let mut out = z.data().to_vec();
    for row in out.chunks_mut(d) {
        let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(NORM_EPS);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// `M[i][j] = uᵢ·uⱼ / (‖uᵢ‖‖uⱼ‖)` with norms floored at `NORM_EPS`.
pub fn cosine_similarity_matrix(z: &Tensor, pairing: Pairing) -> Result<SimilarityMatrix> {
    let (m, d) = z.dims2().unwrap_or((0, 0));
    if m != pairing.len() || d < 2 {
        return Err(Error::Shape {
            op: "cosine_similarity_matrix",
            lhs: z.shape().to_vec(),
            rhs: vec![pairing.len(), 2],
        });
    }
    let u = unit_rows(z)?;
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let s: f64 = u[i * d..(i + 1) * d]
                .iter()
                .zip(&u[j * d..(j + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
            values[i * m + j] = s;
            values[j * m + i] = s;
        }
    }
    Ok(SimilarityMatrix {
        values: Tensor::new([m, m], values)?,
        pairing,
    })
}

/// The `k` negatives most similar to `anchor`, excluding the anchor itself
/// and its positive. Ties go to the lowest index.
pub fn fnr_select(sim: &SimilarityMatrix, anchor: usize, k: usize) -> Result<Vec<usize>> {
    let pairing = sim.pairing();
    if anchor >= pairing.len() {
        return Err(Error::invalid("anchor", alloc::format!("{anchor} out of range")));
    }
    if k > pairing.max_removal() {
        return Err(Error::invalid(
            "k",
            alloc::format!("cannot remove {k} of {} negatives", pairing.max_removal() + 1),
        ));
    }
    let pos = pairing.positive(anchor);
    let mut negatives: Vec<usize> = (0..pairing.len()).filter(|&j| j != anchor && j != pos).collect();
    negatives.sort_by(|&a, &b| sim.get(anchor, b).total_cmp(&sim.get(anchor, a)));
    negatives.truncate(k);
    Ok(negatives)
}

/// One NT-Xent evaluation: the scalar loss node and per-anchor diagnostics.
#[derive(Debug, Clone)]
pub struct ContrastiveLoss {
    pub loss: NodeId,
    pub per_anchor: Vec<f64>,
    /// Removed negatives of each anchor (empty without removal).
    pub removed: Vec<Vec<usize>>,
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("temperature", alloc::format!("{t} must be positive")))
    }
}

/// Mean over anchors of `−log(exp(sᵢⱼ/T) / Σ_{k≠i} exp(sᵢₖ/T))`.
pub fn nt_xent(g: &mut Graph, z: NodeId, pairing: &Pairing, temperature: f64) -> Result<ContrastiveLoss> {
    nt_xent_fnr(g, z, pairing, temperature, 0)
}

/// NT-Xent with each anchor's `k` most similar negatives dropped from the
/// denominator. The positive term is always kept; `k = 0` is plain NT-Xent.
pub fn nt_xent_fnr(g: &mut Graph, z: NodeId, pairing: &Pairing, temperature: f64, k: usize) -> Result<ContrastiveLoss> {
    check_temperature(temperature)?;
    let sim = cosine_similarity_matrix(g.value(z), pairing.clone())?;
    let m = pairing.len();
    let mut removed = Vec::with_capacity(m);
    let mut mask = vec![0.0; m * m];
    let mut onehot = vec![0.0; m * m];
    for i in 0..m {
        let drop = fnr_select(&sim, i, k)?;
        mask[i * m + i] = f64::NEG_INFINITY;
        for &j in &drop {
            mask[i * m + j] = f64::NEG_INFINITY;
        }
        onehot[i * m + pairing.positive(i)] = 1.0;
        removed.push(drop);
    }

    let u = g.l2_normalize_rows(z)?;
    let ut = g.transpose(u)?;
    let s = g.matmul(u, ut)?;
    let logits = g.scalar_div(s, temperature)?;
    let mask = g.constant(Tensor::new([m, m], mask)?);
    let masked = g.add(logits, mask)?;
    let lse = g.logsumexp_rows(masked)?;
    let onehot = g.constant(Tensor::new([m, m], onehot)?);
    let pos = g.mul(logits, onehot)?;
    let pos = g.sum_rows(pos)?;
    let per_anchor = g.sub(lse, pos)?;
    let loss = g.mean(per_anchor)?;
    Ok(ContrastiveLoss {
        loss,
        per_anchor: g.value(per_anchor).data().to_vec(),
        removed,
    })
}

/// Losses of both domains and their sum.
#[derive(Debug, Clone)]
pub struct DomainLoss {
    pub source: NodeId,
    pub target: NodeId,
    pub total: NodeId,
    /// Mean number of negatives removed per anchor.
    pub removed_per_anchor: f64,
}

/// Independent NT-Xent per domain; `L_DA = L_S + L_T`.
pub fn cda_contrastive(g: &mut Graph, z_s: NodeId, z_t: NodeId, n: usize, temperature: f64) -> Result<DomainLoss> {
    fnr_da(g, z_s, z_t, n, temperature, 0)
}

/// Independent false-negative-removal NT-Xent per domain.
pub fn fnr_da(g: &mut Graph, z_s: NodeId, z_t: NodeId, n: usize, temperature: f64, k: usize) -> Result<DomainLoss> {
    let pairing = Pairing::two_view(n)?;
    let s = nt_xent_fnr(g, z_s, &pairing, temperature, k)?;
    let t = nt_xent_fnr(g, z_t, &pairing, temperature, k)?;
    let total = g.add(s.loss, t.loss)?;
    Ok(DomainLoss {
        source: s.loss,
        target: t.loss,
        total,
        removed_per_anchor: k as f64,
    })
}

/// Four views per image: per domain, one loss over views (1, 2) and one
/// over views (3, 4), rows `[0, 2N)` and `[2N, 4N)`. `k = 0` gives plain
/// NT-Xent, `k > 0` false-negative removal.
pub fn multiview_loss(
    g: &mut Graph,
    z_s: NodeId,
    z_t: NodeId,
    views: usize,
    n: usize,
    temperature: f64,
    k: usize,
) -> Result<DomainLoss> {
    if views != 4 {
        return Err(Error::invalid(
            "views",
            alloc::format!("multi-view loss needs 4 views, got {views}"),
        ));
    }
    let pairing = Pairing::two_view(n)?;
    let mut per_domain = |z: NodeId| -> Result<NodeId> {
        let a = g.slice_rows(z, 0, 2 * n)?;
        let b = g.slice_rows(z, 2 * n, 4 * n)?;
        let la = nt_xent_fnr(g, a, &pairing, temperature, k)?;
        let lb = nt_xent_fnr(g, b, &pairing, temperature, k)?;
        g.add(la.loss, lb.loss)
    };
    let source = per_domain(z_s)?;
    let target = per_domain(z_t)?;
    let total = g.add(source, target)?;
    Ok(DomainLoss {
        source,
        target,
        total,
        removed_per_anchor: k as f64,
    })
}

/// Kernel bandwidth choice for [`mmd`]. Several bandwidths are averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Bandwidth {
    /// Fixed `σ` values.
    Fixed { sigmas: Vec<f64> },
    /// `σ = f·σ_med` for each factor `f`, where `σ_med²` is the median
    /// pairwise squared distance over the joint batch. The bandwidth is
    /// computed from values and treated as a constant by backward.
    Median { factors: Vec<f64> },
}

/// RBF kernel `k(x, y) = exp(−‖x − y‖² / (2σ²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median { factors: vec![1.0] },
        }
    }
}

impl KernelConfig {
    pub fn fixed(sigma: f64) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed { sigmas: vec![sigma] },
        }
    }

    /// Median heuristic averaged over `{σ/2, σ, 2σ}`.
    pub fn multi_median() -> Self {
        Self {
            bandwidth: Bandwidth::Median {
                factors: vec![0.5, 1.0, 2.0],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let values = match &self.bandwidth {
            Bandwidth::Fixed { sigmas } => sigmas,
            Bandwidth::Median { factors } => factors,
        };
        if values.is_empty() || values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("bandwidth", "bandwidths must be positive and finite"));
        }
        Ok(())
    }

    fn sigmas(&self, a: &Tensor, b: &Tensor) -> Vec<f64> {
        match &self.bandwidth {
            Bandwidth::Fixed { sigmas } => sigmas.clone(),
            Bandwidth::Median { factors } => {
                let med = libm::sqrt(median_sq_distance(a, b));
                factors.iter().map(|f| f * med).collect()
            }
        }
    }
}

/// Median over all unordered pairs of distinct rows of `[a; b]`; falls back
/// to 1 when the median is zero.
pub fn median_sq_distance(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..a.shape()[0])
        .map(|i| a.row(i))
        .chain((0..b.shape()[0]).map(|i| b.row(i)))
        .collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(rows[i].iter().zip(rows[j]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn mean_kernel(g: &mut Graph, a: NodeId, b: NodeId, sigmas: &[f64]) -> Result<NodeId> {
    let d = g.sq_euclidean_cdist(a, b)?;
    let mut acc: Option<NodeId> = None;
    for &s in sigmas {
        let scaled = g.scalar_div(d, -2.0 * s * s)?;
        let k = g.exp(scaled)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, k)?,
            None => k,
        });
    }
    let k = g.scalar_div(acc.expect("at least one bandwidth"), sigmas.len() as f64)?;
    g.mean(k)
}

/// Biased squared MMD between the rows of `a` (`N × d`) and `b` (`M × d`):
/// `mean k(a, a′) − 2·mean k(a, b) + mean k(b, b′)`, diagonal terms included.
/// Symmetric in its arguments bit for bit.
pub fn mmd(g: &mut Graph, a: NodeId, b: NodeId, cfg: &KernelConfig) -> Result<NodeId> {
    cfg.validate()?;
    let (va, vb) = (g.value(a), g.value(b));
    match (va.dims2(), vb.dims2()) {
        (Some((_, da)), Some((_, db))) if da == db => {}
        _ => {
            return Err(Error::Shape {
                op: "mmd",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            })
        }
    }
    let sigmas = cfg.sigmas(va, vb);
    let kaa = mean_kernel(g, a, a, &sigmas)?;
    let kbb = mean_kernel(g, b, b, &sigmas)?;
    let kab = mean_kernel(g, a, b, &sigmas)?;
    let kba = mean_kernel(g, b, a, &sigmas)?;
    let within = g.add(kaa, kbb)?;
    let cross = g.add(kab, kba)?;
    g.sub(within, cross)
}
