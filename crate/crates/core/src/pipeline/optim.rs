use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::ParameterStore;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Stabilizer in the LARS trust-ratio denominator.
pub const LARS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Lars,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the whole run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// LARS trust coefficient.
    pub trust: f64,
    pub schedule: Schedule,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-6,
            trust: 0.001,
            schedule: Schedule::Constant,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be finite and >= 0"));
        }
        if !(self.trust > 0.0 && self.trust.is_finite()) {
            return Err(Error::invalid("trust", "must be positive and finite"));
        }
        Ok(())
    }

    /// Learning rate at `step` of a run lasting `total` steps.
    pub fn rate_at(&self, step: u64, total: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let progress = step.min(total) as f64 / total.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
            }
        }
    }
}

/// `trust·‖w‖ / (‖g‖ + wd·‖w‖ + ε)`, or 1 when either norm is zero.
pub fn lars_local_rate(trust: f64, w_norm: f64, g_norm: f64, weight_decay: f64) -> f64 {
    if w_norm > 0.0 && g_norm > 0.0 {
        trust * w_norm / (g_norm + weight_decay * w_norm + LARS_EPS)
    } else {
        1.0
    }
}

/// Momentum buffers, one per parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocities: Vec<(String, Tensor)>,
}

impl OptimizerState {
    pub fn new(params: &ParameterStore) -> Self {
        Self {
            velocities: params
                .iter()
                .map(|(n, t)| (n.into(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn from_velocities(velocities: Vec<(String, Tensor)>) -> Self {
        Self { velocities }
    }

    pub fn velocities(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.velocities.iter().map(|(n, t)| (n.as_str(), t))
    }
}

/// One update of every parameter in `params` at learning rate `lr`.
///
/// SGD: `v ← m·v + g + wd·w`, `w ← w − lr·v`.
/// LARS: `v ← m·v + lr·r·(g + wd·w)`, `w ← w − v`, with `r` the local rate
/// of [`lars_local_rate`].
pub fn optimizer_step(
    spec: &OptimizerSpec,
    lr: f64,
    params: &mut ParameterStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
) -> Result<()> {
    if state.velocities.len() != params.len() {
        return Err(Error::invalid("optimizer", "state does not match the parameter set"));
    }
    let (m, wd) = (spec.momentum, spec.weight_decay);
    for ((name, w), (vname, v)) in params.iter_mut().zip(state.velocities.iter_mut()) {
        let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.into()))?;
        if vname != name || g.shape() != w.shape() || v.shape() != w.shape() {
            return Err(Error::Shape {
                op: "optimizer_step",
                lhs: w.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        match spec.kind {
            OptimizerKind::SgdMomentum => {
                for ((w, v), g) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *v = m * *v + g + wd * *w;
                    *w -= lr * *v;
                }
            }
            OptimizerKind::Lars => {
                let rate = lr * lars_local_rate(spec.trust, w.l2_norm(), g.l2_norm(), wd);
                for ((w, v), g) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *v = m * *v + rate * (g + wd * *w);
                    *w -= *v;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn single(w: f64) -> ParameterStore {
        let mut p = ParameterStore::new(0);
        p.insert("w", Tensor::vector(vec![w]).unwrap()).unwrap();
        p
    }

    fn grads(g: Vec<f64>) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".into(), Tensor::vector(g).unwrap())])
    }

    #[test]
    fn sgd_example() {
        let spec = OptimizerSpec {
            momentum: 0.0,
            weight_decay: 0.0,
            ..OptimizerSpec::default()
        };
        let mut p = single(1.0);
        let mut s = OptimizerState::new(&p);
        optimizer_step(&spec, 0.1, &mut p, &grads(vec![2.0]), &mut s).unwrap();
        assert!((p.get("w").unwrap().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let spec = OptimizerSpec {
            momentum: 0.5,
            weight_decay: 0.0,
            ..OptimizerSpec::default()
        };
        let mut p = single(0.0);
        let mut s = OptimizerState::new(&p);
        for _ in 0..2 {
            optimizer_step(&spec, 1.0, &mut p, &grads(vec![1.0]), &mut s).unwrap();
        }
        // v₁ = 1, v₂ = 1.5.
        assert_eq!(p.get("w").unwrap().item(), -2.5);
    }

    #[test]
    fn lars_local_rate_example() {
        assert!((lars_local_rate(0.001, 1.0, 2.0, 0.0) - 5e-4).abs() < 1e-12);
        assert_eq!(lars_local_rate(0.001, 0.0, 2.0, 0.0), 1.0);
        assert_eq!(lars_local_rate(0.001, 1.0, 0.0, 0.0), 1.0);
    }

    #[test]
    fn lars_step_uses_trust_ratio() {
        let spec = OptimizerSpec {
            kind: OptimizerKind::Lars,
            momentum: 0.0,
            weight_decay: 0.0,
            ..OptimizerSpec::default()
        };
        let mut p = ParameterStore::new(0);
        p.insert("w", Tensor::vector(vec![0.6, 0.8]).unwrap()).unwrap();
        let mut s = OptimizerState::new(&p);
        let g = BTreeMap::from([("w".into(), Tensor::vector(vec![0.0, 2.0]).unwrap())]);
        optimizer_step(&spec, 1.0, &mut p, &g, &mut s).unwrap();
        let expected = 0.8 - 5e-4 * 2.0;
        assert!((p.get("w").unwrap().data()[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Lars] {
            let spec = OptimizerSpec {
                kind,
                weight_decay: 0.0,
                ..OptimizerSpec::default()
            };
            let mut p = single(0.7);
            let mut s = OptimizerState::new(&p);
            for _ in 0..3 {
                optimizer_step(&spec, 0.3, &mut p, &grads(vec![0.0]), &mut s).unwrap();
            }
            assert_eq!(p.get("w").unwrap().item(), 0.7);
        }
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut p = single(1.0);
        let mut s = OptimizerState::new(&p);
        let err = optimizer_step(&OptimizerSpec::default(), 0.1, &mut p, &BTreeMap::new(), &mut s).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "w"));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let spec = OptimizerSpec {
            schedule: Schedule::Cosine,
            learning_rate: 0.2,
            ..OptimizerSpec::default()
        };
        assert_eq!(spec.rate_at(0, 100), 0.2);
        assert!((spec.rate_at(50, 100) - 0.1).abs() < 1e-15);
        assert!(spec.rate_at(100, 100).abs() < 1e-15);
        let constant = OptimizerSpec::default();
        assert_eq!(constant.rate_at(70, 100), constant.learning_rate);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            OptimizerSpec {
                learning_rate: 0.0,
                ..OptimizerSpec::default()
            },
            OptimizerSpec {
                weight_decay: -1.0,
                ..OptimizerSpec::default()
            },
            OptimizerSpec {
                momentum: 1.0,
                ..OptimizerSpec::default()
            },
        ] {
            assert!(spec.validate().is_err());
        }
    }
}
