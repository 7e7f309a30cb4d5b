use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{optimizer_step, OptimizerKind, OptimizerSpec, OptimizerState, Schedule};
use crate::data::seed::{self, tags};
use crate::data::ImageSet;
use crate::model::{init_linear_head, linear_head, Mode, Model, ParameterStore};
use crate::numerics::{Graph, Tensor};
use crate::{Error, Result};

/// Linear-probe settings. The head is trained full-batch on standardized
/// frozen features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of labeled source images held out for the source accuracy.
    pub holdout: f64,
    /// Images per encoder forward pass.
    pub chunk: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 0.5,
            momentum: 0.9,
            weight_decay: 1e-4,
            holdout: 0.1,
            chunk: 256,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.chunk == 0 {
            return Err(Error::invalid("eval", "steps and chunk must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::invalid("holdout", "must lie in [0, 1)"));
        }
        self.optimizer().validate()
    }

    fn optimizer(&self) -> OptimizerSpec {
        OptimizerSpec {
            kind: OptimizerKind::SgdMomentum,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            trust: 1.0,
            schedule: Schedule::Constant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Top-1 accuracy on the held-out source images.
    pub source_accuracy: f64,
    /// Top-1 accuracy on the full target set.
    pub target_accuracy: f64,
    pub classes: usize,
    pub source_holdout: usize,
}

/// Fraction of positions where `predicted` equals `labels`.
pub fn accuracy(predicted: &[u32], labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Encoder features of every image (`len × d_h`), eval-mode batch norm.
pub fn embed(model: &Model, params: &ParameterStore, set: &ImageSet, chunk: usize) -> Result<Tensor> {
    let d = model.feature_dim();
    let per = set.shape().len();
    let mut out = Vec::with_capacity(set.len() * d);
    for start in (0..set.len()).step_by(chunk.max(1)) {
        let end = (start + chunk).min(set.len());
        let mut g = Graph::new();
        let bound = params.bind(&mut g, |_| false);
        let h = model.encode(
            &mut g,
            &bound,
            params,
            &set.pixels()[start * per..end * per],
            end - start,
            Mode::Eval,
        )?;
        out.extend_from_slice(g.value(h.features).data());
    }
    Tensor::new([set.len(), d], out)
}

fn labels_of<'a>(set: &'a ImageSet, name: &str) -> Result<&'a [u32]> {
    set.labels()
        .ok_or_else(|| Error::Data(alloc::format!("{name} set has no labels")))
}

fn gather(features: &Tensor, rows: &[usize]) -> Vec<f64> {
    rows.iter().flat_map(|&i| features.row(i).iter().copied()).collect()
}

/// Per-column mean and standard deviation (floored at 1e-12 → 1).
fn moments(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (x.len() / d) as f64;
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
    }
    let mut sd = vec![0.0; d];
    for row in x.chunks(d) {
        sd.iter_mut()
            .zip(row)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
    }
    sd.iter_mut()
        .for_each(|s| *s = if *s > 1e-24 { libm::sqrt(*s) } else { 1.0 });
    (mean, sd)
}

fn standardize(x: &mut [f64], d: usize, mean: &[f64], sd: &[f64]) {
    for row in x.chunks_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(sd) {
            *v = (*v - m) / s;
        }
    }
}

fn predict(head: &ParameterStore, x: Vec<f64>, d: usize) -> Result<Vec<u32>> {
    let rows = x.len() / d;
    if rows == 0 {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let bound = head.bind(&mut g, |_| false);
    let h = g.constant(Tensor::new([rows, d], x)?);
    let logits = linear_head(&mut g, &bound, h)?;
    let logits = g.value(logits);
    Ok((0..rows)
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect())
}

/// Trains a softmax linear classifier on frozen encoder features of the
/// un-augmented labeled source set, then scores held-out source images and
/// the whole target set. The projector is not used.
pub fn linear_evaluate(
    model: &Model,
    params: &ParameterStore,
    source: &ImageSet,
    target: &ImageSet,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let source_labels = labels_of(source, "source")?;
    let target_labels = labels_of(target, "target")?;
    let fs = embed(model, params, source, cfg.chunk)?;
    let ft = embed(model, params, target, cfg.chunk)?;
    linear_probe(&fs, source_labels, &ft, target_labels, cfg)
}

/// Linear probe on precomputed features (`rows × d`).
pub fn linear_probe(
    fs: &Tensor,
    source_labels: &[u32],
    ft: &Tensor,
    target_labels: &[u32],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let (ns, d) = fs
        .dims2()
        .ok_or_else(|| Error::invalid("features", "expected a matrix"))?;
    if ft.dims2().map(|(_, dt)| dt) != Some(d) || source_labels.len() != ns || target_labels.len() != ft.shape()[0] {
        return Err(Error::Shape {
            op: "linear_probe",
            lhs: fs.shape().to_vec(),
            rhs: ft.shape().to_vec(),
        });
    }
    let classes = source_labels.iter().max().map_or(0, |&m| m as usize + 1);
    if classes < 2 {
        return Err(Error::Data("source labels span fewer than two classes".into()));
    }
    if let Some(&bad) = target_labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Data(alloc::format!(
            "class-count mismatch: target label {bad} but the source has {classes} classes"
        )));
    }
    if ns < 2 {
        return Err(Error::Data("source set needs at least two images".into()));
    }

    let mut order: Vec<usize> = (0..ns).collect();
    order.shuffle(&mut seed::rng(seed::derive(cfg.seed, &[tags::EVAL])));
    let hold = if cfg.holdout > 0.0 {
        (libm::round(cfg.holdout * ns as f64) as usize).clamp(1, ns - 1)
    } else {
        0
    };
    let (held, train) = order.split_at(hold);

    let mut x = gather(fs, train);
    let (mean, sd) = moments(&x, d);
    standardize(&mut x, d, &mean, &sd);

    let mut onehot = vec![0.0; train.len() * classes];
    for (r, &i) in train.iter().enumerate() {
        onehot[r * classes + source_labels[i] as usize] = 1.0;
    }
    let x = Tensor::new([train.len(), d], x)?;
    let onehot = Tensor::new([train.len(), classes], onehot)?;

    let mut head = ParameterStore::new(cfg.seed);
    init_linear_head(&mut head, d, classes)?;
    let spec = cfg.optimizer();
    let mut state = OptimizerState::new(&head);
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let bound = head.bind(&mut g, |_| true);
        let xs = g.constant(x.clone());
        let logits = linear_head(&mut g, &bound, xs)?;
        let lse = g.logsumexp_rows(logits)?;
        let y = g.constant(onehot.clone());
        let picked = g.mul(logits, y)?;
        let picked = g.sum_rows(picked)?;
        let nll = g.sub(lse, picked)?;
        let loss = g.mean(nll)?;
        let mut grads = g.backward(loss)?;
        let named: BTreeMap<String, Tensor> = bound
            .iter()
            .filter_map(|(n, id)| grads.remove(id).map(|t| (n.into(), t)))
            .collect();
        optimizer_step(&spec, spec.learning_rate, &mut head, &named, &mut state)?;
    }

    let score = |features: &Tensor, rows: &[usize], labels: &[u32]| -> Result<f64> {
        let mut xs = gather(features, rows);
        standardize(&mut xs, d, &mean, &sd);
        let truth: Vec<u32> = rows.iter().map(|&i| labels[i]).collect();
        Ok(accuracy(&predict(&head, xs, d)?, &truth))
    };
    let held_rows: &[usize] = if held.is_empty() { train } else { held };
    let all_target: Vec<usize> = (0..ft.shape()[0]).collect();
    Ok(EvalReport {
        source_accuracy: score(fs, held_rows, source_labels)?,
        target_accuracy: score(ft, &all_target, target_labels)?,
        classes,
        source_holdout: held.len(),
    })
}
