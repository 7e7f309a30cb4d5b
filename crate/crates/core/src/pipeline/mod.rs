//! Pretraining loop, optimizers, checkpoint state and linear evaluation.

mod eval;
mod optim;
mod train;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

pub use eval::{accuracy, embed, linear_evaluate, linear_probe, EvalConfig, EvalReport};
pub use optim::{lars_local_rate, optimizer_step, OptimizerKind, OptimizerSpec, OptimizerState, Schedule, LARS_EPS};
pub use train::{pretrain, Trainer};

use crate::data::{AugmentationPolicy, SamplerState};
use crate::losses::{KernelConfig, DEFAULT_TEMPERATURE};
use crate::model::{Model, ParameterStore};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Experimental scenario: which loss terms are active and how many views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Source-only NT-Xent pretraining.
    SimclrBase,
    CdaBase,
    CdaFnr,
    CdaMmd,
    CdaFnrMmd,
    CdaX4aug,
    CdaX4augFnr,
    CdaX4augMmd,
    CdaX4augFnrMmd,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::SimclrBase,
        Variant::CdaBase,
        Variant::CdaFnr,
        Variant::CdaMmd,
        Variant::CdaFnrMmd,
        Variant::CdaX4aug,
        Variant::CdaX4augFnr,
        Variant::CdaX4augMmd,
        Variant::CdaX4augFnrMmd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SimclrBase => "simclr_base",
            Variant::CdaBase => "cda_base",
            Variant::CdaFnr => "cda_fnr",
            Variant::CdaMmd => "cda_mmd",
            Variant::CdaFnrMmd => "cda_fnr_mmd",
            Variant::CdaX4aug => "cda_x4aug",
            Variant::CdaX4augFnr => "cda_x4aug_fnr",
            Variant::CdaX4augMmd => "cda_x4aug_mmd",
            Variant::CdaX4augFnrMmd => "cda_x4aug_fnr_mmd",
        }
    }

    pub fn views(self) -> usize {
        match self {
            Variant::CdaX4aug | Variant::CdaX4augFnr | Variant::CdaX4augMmd | Variant::CdaX4augFnrMmd => 4,
            _ => 2,
        }
    }

    pub fn uses_fnr(self) -> bool {
        matches!(
            self,
            Variant::CdaFnr | Variant::CdaFnrMmd | Variant::CdaX4augFnr | Variant::CdaX4augFnrMmd
        )
    }

    pub fn uses_mmd(self) -> bool {
        matches!(
            self,
            Variant::CdaMmd | Variant::CdaFnrMmd | Variant::CdaX4augMmd | Variant::CdaX4augFnrMmd
        )
    }

    /// Whether target images take part in pretraining.
    pub fn uses_target(self) -> bool {
        self != Variant::SimclrBase
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "variant",
                name: s.into(),
            })
    }
}

/// Pretraining hyperparameters.
///
/// `fnr_k` applies only to FNR variants and `mmd_weight` only to MMD
/// variants; other variants run with an effective value of zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub epochs: u64,
    pub temperature: f64,
    pub fnr_k: usize,
    pub mmd_weight: f64,
    pub kernel: KernelConfig,
    pub optimizer: OptimizerSpec,
    pub augmentation: AugmentationPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CdaBase,
            batch_size: 128,
            epochs: 30,
            temperature: DEFAULT_TEMPERATURE,
            fnr_k: 1,
            mmd_weight: 1.0,
            kernel: KernelConfig::default(),
            optimizer: OptimizerSpec::default(),
            augmentation: AugmentationPolicy::digits(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size", "need at least two images per batch"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature", "must be positive and finite"));
        }
        if !(self.mmd_weight >= 0.0 && self.mmd_weight.is_finite()) {
            return Err(Error::invalid("mmd_weight", "must be finite and >= 0"));
        }
        let max_k = 2 * self.batch_size - 3;
        if self.removal() > max_k {
            return Err(Error::invalid(
                "fnr_k",
                alloc::format!(
                    "{} exceeds {max_k}, the most a batch of {} allows",
                    self.fnr_k,
                    self.batch_size
                ),
            ));
        }
        self.kernel.validate()?;
        self.optimizer.validate()
    }

    pub fn views(&self) -> usize {
        self.variant.views()
    }

    /// Negatives removed per anchor.
    pub fn removal(&self) -> usize {
        if self.variant.uses_fnr() {
            self.fnr_k
        } else {
            0
        }
    }

    /// Weight of the MMD term in the total loss.
    pub fn mmd_lambda(&self) -> f64 {
        if self.variant.uses_mmd() {
            self.mmd_weight
        } else {
            0.0
        }
    }
}

/// Losses of one optimizer step. Inactive terms are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub epoch: u64,
    pub cont_s: f64,
    pub cont_t: f64,
    pub mmd: f64,
    pub total: f64,
    pub removed_per_anchor: f64,
    pub seconds: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [self.cont_s, self.cont_t, self.mmd, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Everything needed to continue or evaluate a pretraining run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub params: ParameterStore,
    pub optimizer: OptimizerState,
    pub sampler: SamplerState,
    pub epoch: u64,
    pub step: u64,
}

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    /// Every named tensor: parameters, then buffers, then velocities.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (alloc::format!("param/{n}"), t))
            .collect();
        out.extend(self.params.buffers().map(|(n, t)| (alloc::format!("buffer/{n}"), t)));
        out.extend(
            self.optimizer
                .velocities()
                .map(|(n, t)| (alloc::format!("velocity/{n}"), t)),
        );
        out
    }
}

#[cfg(test)]
mod tests;
