use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::Init;
use crate::data::seed::{self, tags};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::{Error, Result};

/// Named parameters (trained) and buffers (running statistics), both kept in
/// registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    params: Vec<(String, Tensor)>,
    buffers: Vec<(String, Tensor)>,
    seed: u64,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn init(&mut self, name: String, shape: &[usize], init: Init) -> Result<()> {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zero => alloc::vec![0.0; numel],
            Init::One => alloc::vec![1.0; numel],
            Init::Uniform(fan_in) => {
                let b = Init::bound(fan_in);
                let mut rng = seed::rng(seed::derive(self.seed, &[tags::INIT, self.params.len() as u64]));
                (0..numel).map(|_| rng.random_range(-b..b)).collect()
            }
        };
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::invalid("parameter", alloc::format!("duplicate name `{name}`")));
        }
        self.params.push((name, value));
        Ok(())
    }

    pub(crate) fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|(n, _)| !n.starts_with(prefix));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::invalid("buffer", alloc::format!("unknown buffer `{name}`")))
    }

    pub(crate) fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::invalid("buffer", alloc::format!("unknown buffer `{name}`")))
    }

    pub fn set_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.buffers.iter_mut().find(|(n, _)| *n == name) {
            Some((_, t)) => *t = value,
            None => self.buffers.push((name, value)),
        }
    }

    /// Registers every parameter on `g`; those accepted by `trainable` become
    /// gradient-tracked leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let nodes = self
            .params
            .iter()
            .map(|(name, t)| {
                let id = if trainable(name) {
                    g.parameter(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), id)
            })
            .collect();
        Bound { nodes }
    }
}

/// Graph nodes of a [`ParameterStore`] for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    nodes: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("parameter", alloc::format!("`{name}` is not bound")))
    }

    /// Rebinds `name` to another node, e.g. a probe point in a gradient check.
    pub fn replace(&mut self, name: &str, node: NodeId) {
        self.nodes.insert(name.into(), node);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(n, id)| (n.as_str(), *id))
    }
}
