use alloc::collections::BTreeMap;
use alloc::string::String;

use super::optim::{optimizer_step, OptimizerState};
use super::{Checkpoint, LossReport, TrainConfig};
use crate::data::seed::{self, tags};
use crate::data::{make_views, Domain, EpochSampler, ImageSet};
use crate::losses::{fnr_da, mmd, multiview_loss, nt_xent_fnr, Pairing};
use crate::model::{Mode, Model, ParameterStore};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::{Error, Result};

/// Owns the parameters, optimizer state and sampler of one pretraining run.
///
/// Checkpoints taken between epochs resume bit-exactly: augmentation seeds
/// are derived from the global step, and the sampler stream is saved.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    params: ParameterStore,
    optimizer: OptimizerState,
    sampler: EpochSampler,
    epoch: u64,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = model.init_params(cfg.seed)?;
        Ok(Self {
            optimizer: OptimizerState::new(&params),
            sampler: EpochSampler::new(cfg.seed),
            model,
            cfg,
            params,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        Ok(Self {
            model: ckpt.model,
            cfg: ckpt.train,
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            sampler: EpochSampler::from_state(ckpt.sampler),
            epoch: ckpt.epoch,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.cfg.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            sampler: self.sampler.state(),
            epoch: self.epoch,
            step: self.step,
        }
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        Checkpoint {
            sampler: self.sampler.state(),
            model: self.model,
            train: self.cfg,
            params: self.params,
            optimizer: self.optimizer,
            epoch: self.epoch,
            step: self.step,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    fn domain_sizes(&self, source: &ImageSet, target: &ImageSet) -> (usize, usize) {
        if self.cfg.variant.uses_target() {
            (source.len(), target.len())
        } else {
            (source.len(), source.len())
        }
    }

    pub fn steps_per_epoch(&self, source: &ImageSet, target: &ImageSet) -> u64 {
        let (ls, lt) = self.domain_sizes(source, target);
        EpochSampler::steps_per_epoch(ls, lt, self.cfg.batch_size) as u64
    }

    fn check_data(&self, source: &ImageSet, target: &ImageSet) -> Result<()> {
        let input = self.model.encoder.input;
        let mut sets = alloc::vec![("source", source)];
        if self.cfg.variant.uses_target() {
            sets.push(("target", target));
        }
        for (name, set) in sets {
            if set.shape() != input {
                return Err(Error::Data(alloc::format!(
                    "{name} images are {:?}, the encoder expects {input:?}",
                    set.shape()
                )));
            }
            if set.len() < 2 {
                return Err(Error::Data(alloc::format!("{name} set needs at least two images")));
            }
        }
        Ok(())
    }

    /// Runs one epoch, passing each step's report to `observer`.
    pub fn run_epoch(
        &mut self,
        source: &ImageSet,
        target: &ImageSet,
        observer: &mut dyn FnMut(&LossReport),
    ) -> Result<()> {
        self.check_data(source, target)?;
        let (ls, lt) = self.domain_sizes(source, target);
        let total = self.cfg.epochs * self.steps_per_epoch(source, target);
        for (s_idx, t_idx) in self.sampler.next_epoch(ls, lt, self.cfg.batch_size) {
            let report = self.train_step(source, target, &s_idx, &t_idx, total)?;
            observer(&report);
        }
        self.epoch += 1;
        Ok(())
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, source: &ImageSet, target: &ImageSet, observer: &mut dyn FnMut(&LossReport)) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch(source, target, observer)?;
        }
        Ok(())
    }

    fn train_step(
        &mut self,
        source: &ImageSet,
        target: &ImageSet,
        s_idx: &[usize],
        t_idx: &[usize],
        total_steps: u64,
    ) -> Result<LossReport> {
        let cfg = &self.cfg;
        let (views, n) = (cfg.views(), s_idx.len());
        let step_seed = seed::derive(cfg.seed, &[tags::STEP, self.step]);
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| true);

        let encode = |g: &mut Graph, set: &ImageSet, idx: &[usize], domain: Domain| -> Result<_> {
            let batch = make_views(set, idx, views, &cfg.augmentation, step_seed, domain)?;
            let h = self
                .model
                .encode(g, &bound, &self.params, batch.data(), views * n, Mode::Train)?;
            let z = self.model.project(g, &bound, h.features)?;
            Ok((h, z))
        };
        let (hs, zs) = encode(&mut g, source, s_idx, Domain::Source)?;
        let target_side = if cfg.variant.uses_target() {
            Some(encode(&mut g, target, t_idx, Domain::Target)?)
        } else {
            None
        };

        let k = cfg.removal();
        let (cont_s, cont_t, mut total) = match &target_side {
            None => {
                let l = nt_xent_fnr(&mut g, zs, &Pairing::two_view(n)?, cfg.temperature, 0)?;
                (l.loss, None, l.loss)
            }
            Some((_, zt)) => {
                let l = if views == 4 {
                    multiview_loss(&mut g, zs, *zt, views, n, cfg.temperature, k)?
                } else {
                    fnr_da(&mut g, zs, *zt, n, cfg.temperature, k)?
                };
                (l.source, Some(l.target), l.total)
            }
        };
        let mut mmd_node = None;
        if let (true, Some((_, zt))) = (cfg.variant.uses_mmd(), &target_side) {
            let a = g.slice_rows(zs, 0, n)?;
            let b = g.slice_rows(*zt, 0, n)?;
            let m = mmd(&mut g, a, b, &cfg.kernel)?;
            let lambda = cfg.mmd_lambda();
            if lambda > 0.0 {
                let weighted = g.scalar_div(m, 1.0 / lambda)?;
                total = g.add(total, weighted)?;
            }
            mmd_node = Some(m);
        }

        let value = |id: Option<NodeId>| id.map_or(0.0, |id| g.value(id).item());
        let report = LossReport {
            step: self.step,
            epoch: self.epoch,
            cont_s: value(Some(cont_s)),
            cont_t: value(cont_t),
            mmd: value(mmd_node),
            total: value(Some(total)),
            removed_per_anchor: k as f64,
            seconds: 0.0,
        };
        if !report.all_finite() {
            return Err(Error::NonFiniteLoss(alloc::boxed::Box::new(report)));
        }

        let mut grads = g.backward(total)?;
        let named: BTreeMap<String, Tensor> = bound
            .iter()
            .filter_map(|(name, id)| grads.remove(id).map(|t| (name.into(), t)))
            .collect();
        let lr = cfg.optimizer.rate_at(self.step, total_steps);
        optimizer_step(&cfg.optimizer, lr, &mut self.params, &named, &mut self.optimizer)?;
        self.model.update_running_stats(&g, &hs, &mut self.params)?;
        if let Some((ht, _)) = &target_side {
            self.model.update_running_stats(&g, ht, &mut self.params)?;
        }
        self.step += 1;
        Ok(report)
    }
}

/// Full pretraining run from fresh parameters.
pub fn pretrain(
    model: Model,
    cfg: TrainConfig,
    source: &ImageSet,
    target: &ImageSet,
    observer: &mut dyn FnMut(&LossReport),
) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.run(source, target, observer)?;
    Ok(trainer.into_checkpoint())
}
