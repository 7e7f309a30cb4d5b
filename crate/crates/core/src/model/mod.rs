//! Encoder `f`, projection head `g` and the linear evaluation head.
//!
//! The encoder is either a plain MLP or a small CNN
//! (`conv3×3 → [bn] → relu → maxpool2` stages, then an affine map to the
//! feature dimension). The projection head has exactly two hidden ReLU layers
//! and L2-normalizes its output by default. After pretraining only the
//! encoder is used; the projection head is discarded.

mod params;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use params::{Bound, ParameterStore};

use crate::data::ImageShape;
use crate::numerics::{Graph, NodeId, Tensor, BN_EPS, BN_MOMENTUM};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderKind {
    /// Hidden layer widths.
    Mlp { hidden: Vec<usize> },
    /// Output channels of each conv stage.
    SmallCnn { channels: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    None,
    Batch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub input: ImageShape,
    pub kind: EncoderKind,
    pub norm: Norm,
    pub output_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorSpec {
    pub hidden: [usize; 2],
    pub output_dim: usize,
    pub normalize: bool,
}

impl Default for ProjectorSpec {
    fn default() -> Self {
        Self {
            hidden: [128, 128],
            output_dim: 64,
            normalize: true,
        }
    }
}

/// Whether batch norm uses batch statistics or running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output of [`Model::encode`]: the feature node plus the batch-norm nodes
/// whose statistics feed the running averages.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub features: NodeId,
    pub norm_nodes: Vec<(String, NodeId)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    pub encoder: EncoderSpec,
    pub projector: ProjectorSpec,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.output_dim < 2 {
            return Err(Error::invalid("output_dim", "feature dimension must be >= 2"));
        }
        if self.input.is_empty() {
            return Err(Error::invalid("input", "image shape has a zero dimension"));
        }
        match &self.kind {
            EncoderKind::Mlp { hidden } if hidden.is_empty() || hidden.contains(&0) => Err(Error::invalid(
                "hidden",
                "an MLP encoder needs at least one non-empty hidden layer",
            )),
            EncoderKind::SmallCnn { channels } => {
                if channels.is_empty() || channels.contains(&0) {
                    return Err(Error::invalid(
                        "channels",
                        "a CNN encoder needs at least one conv stage",
                    ));
                }
                let shrink = 1usize << channels.len();
                if self.input.height < shrink || self.input.width < shrink {
                    return Err(Error::invalid(
                        "channels",
                        format!(
                            "{} pooling stages do not fit a {}x{} image",
                            channels.len(),
                            self.input.height,
                            self.input.width
                        ),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Parameter names and shapes, in registration order.
    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let bn = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, width: usize| {
            out.push((format!("{name}.gamma"), vec![width], Init::One));
            out.push((format!("{name}.beta"), vec![width], Init::Zero));
        };
        let flat_in = match &self.kind {
            EncoderKind::Mlp { hidden } => {
                let mut fan_in = self.input.len();
                for (i, &w) in hidden.iter().enumerate() {
                    out.push((format!("encoder.fc{i}.weight"), vec![fan_in, w], Init::Uniform(fan_in)));
                    out.push((format!("encoder.fc{i}.bias"), vec![w], Init::Zero));
                    if self.norm == Norm::Batch {
                        bn(&mut out, &format!("encoder.bn{i}"), w);
                    }
                    fan_in = w;
                }
                fan_in
            }
            EncoderKind::SmallCnn { channels } => {
                let (mut c_in, mut h, mut w) = (self.input.channels, self.input.height, self.input.width);
                for (i, &c) in channels.iter().enumerate() {
                    let fan_in = c_in * 9;
                    out.push((
                        format!("encoder.conv{i}.weight"),
                        vec![c, c_in, 3, 3],
                        Init::Uniform(fan_in),
                    ));
                    out.push((format!("encoder.conv{i}.bias"), vec![c], Init::Zero));
                    if self.norm == Norm::Batch {
                        bn(&mut out, &format!("encoder.bn{i}"), c);
                    }
                    c_in = c;
                    h /= 2;
                    w /= 2;
                }
                c_in * h * w
            }
        };
        out.push((
            "encoder.out.weight".into(),
            vec![flat_in, self.output_dim],
            Init::Uniform(flat_in),
        ));
        out.push(("encoder.out.bias".into(), vec![self.output_dim], Init::Zero));
        out
    }

    fn norm_layers(&self) -> Vec<(String, usize)> {
        if self.norm == Norm::None {
            return Vec::new();
        }
        let widths = match &self.kind {
            EncoderKind::Mlp { hidden } => hidden,
            EncoderKind::SmallCnn { channels } => channels,
        };
        widths
            .iter()
            .enumerate()
            .map(|(i, &w)| (format!("encoder.bn{i}"), w))
            .collect()
    }
}

impl ProjectorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) || self.output_dim == 0 {
            return Err(Error::invalid("projector", "layer widths must be non-zero"));
        }
        Ok(())
    }

    fn layout(&self, input: usize) -> Vec<(String, Vec<usize>, Init)> {
        let [h0, h1] = self.hidden;
        vec![
            ("projector.fc0.weight".into(), vec![input, h0], Init::Uniform(input)),
            ("projector.fc0.bias".into(), vec![h0], Init::Zero),
            ("projector.fc1.weight".into(), vec![h0, h1], Init::Uniform(h0)),
            ("projector.fc1.bias".into(), vec![h1], Init::Zero),
            (
                "projector.out.weight".into(),
                vec![h1, self.output_dim],
                Init::Uniform(h1),
            ),
            ("projector.out.bias".into(), vec![self.output_dim], Init::Zero),
        ]
    }
}

/// Weight initialization scheme.
///
/// `Uniform(fan_in)` draws from `U(-b, b)` with `b = sqrt(6 / fan_in)`
/// (variance `2 / fan_in`); biases start at zero, batch-norm scales at one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Zero,
    One,
    Uniform(usize),
}

impl Init {
    pub(crate) fn bound(fan_in: usize) -> f64 {
        libm::sqrt(6.0 / fan_in as f64)
    }
}

/// Draws fresh encoder and projector parameters.
pub fn init_params(encoder: &EncoderSpec, projector: &ProjectorSpec, seed: u64) -> Result<ParameterStore> {
    Model::new(encoder.clone(), projector.clone())?.init_params(seed)
}

impl Model {
    pub fn new(encoder: EncoderSpec, projector: ProjectorSpec) -> Result<Self> {
        encoder.validate()?;
        projector.validate()?;
        Ok(Self { encoder, projector })
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output_dim
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let mut store = ParameterStore::new(seed);
        let layout = self
            .encoder
            .layout()
            .into_iter()
            .chain(self.projector.layout(self.encoder.output_dim));
        for (name, shape, init) in layout {
            store.init(name, &shape, init)?;
        }
        for (name, width) in self.encoder.norm_layers() {
            store.set_buffer(format!("{name}.running_mean"), Tensor::zeros([width]));
            store.set_buffer(format!("{name}.running_var"), Tensor::ones([width]));
        }
        Ok(store)
    }

    /// Encodes `count` channels-last images into an `N × d_h` feature node.
    pub fn encode(
        &self,
        g: &mut Graph,
        params: &Bound,
        store: &ParameterStore,
        images: &[f64],
        count: usize,
        mode: Mode,
    ) -> Result<Encoded> {
        let shape = self.encoder.input;
        if count == 0 || images.len() != count * shape.len() {
            return Err(Error::Shape {
                op: "encode",
                lhs: vec![images.len()],
                rhs: vec![count, shape.height, shape.width, shape.channels],
            });
        }
        let mut norm_nodes = Vec::new();
        let mut x = match &self.encoder.kind {
            EncoderKind::Mlp { hidden } => {
                let mut x = g.constant(Tensor::new([count, shape.len()], images.to_vec())?);
                for i in 0..hidden.len() {
                    x = g.affine(
                        x,
                        params.get(&format!("encoder.fc{i}.weight"))?,
                        params.get(&format!("encoder.fc{i}.bias"))?,
                    )?;
                    x = self.normalize(g, params, store, x, i, mode, &mut norm_nodes)?;
                    x = g.relu(x)?;
                }
                x
            }
            EncoderKind::SmallCnn { channels } => {
                let mut x = g.constant(Tensor::new(
                    [count, shape.channels, shape.height, shape.width],
                    to_channels_first(images, count, shape),
                )?);
                for i in 0..channels.len() {
                    x = g.conv2d(
                        x,
                        params.get(&format!("encoder.conv{i}.weight"))?,
                        params.get(&format!("encoder.conv{i}.bias"))?,
                        1,
                        1,
                    )?;
                    x = self.normalize(g, params, store, x, i, mode, &mut norm_nodes)?;
                    x = g.relu(x)?;
                    x = g.max_pool(x, 2, 2)?;
                }
                let flat = g.value(x).len() / count;
                g.reshape(x, [count, flat])?
            }
        };
        x = g.affine(x, params.get("encoder.out.weight")?, params.get("encoder.out.bias")?)?;
        Ok(Encoded {
            features: x,
            norm_nodes,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &self,
        g: &mut Graph,
        params: &Bound,
        store: &ParameterStore,
        x: NodeId,
        layer: usize,
        mode: Mode,
        norm_nodes: &mut Vec<(String, NodeId)>,
    ) -> Result<NodeId> {
        if self.encoder.norm == Norm::None {
            return Ok(x);
        }
        let name = format!("encoder.bn{layer}");
        let gamma = params.get(&format!("{name}.gamma"))?;
        let beta = params.get(&format!("{name}.beta"))?;
        let y = match mode {
            Mode::Train => g.batch_norm_train(x, gamma, beta, BN_EPS)?,
            Mode::Eval => {
                let mean = g.constant(store.buffer(&format!("{name}.running_mean"))?.clone());
                let var = g.constant(store.buffer(&format!("{name}.running_var"))?.clone());
                g.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)?
            }
        };
        norm_nodes.push((name, y));
        Ok(y)
    }

    /// Projects features to the contrastive space; rows are unit-norm when
    /// the projector's `normalize` flag is set.
    pub fn project(&self, g: &mut Graph, params: &Bound, h: NodeId) -> Result<NodeId> {
        let mut z = h;
        for layer in ["fc0", "fc1"] {
            z = g.affine(
                z,
                params.get(&format!("projector.{layer}.weight"))?,
                params.get(&format!("projector.{layer}.bias"))?,
            )?;
            z = g.relu(z)?;
        }
        z = g.affine(
            z,
            params.get("projector.out.weight")?,
            params.get("projector.out.bias")?,
        )?;
        if self.projector.normalize {
            z = g.l2_normalize_rows(z)?;
        }
        Ok(z)
    }

    /// Folds the batch statistics of a training-mode forward pass into the
    /// running averages: `running ← (1 − m)·running + m·batch`.
    pub fn update_running_stats(&self, g: &Graph, encoded: &Encoded, store: &mut ParameterStore) -> Result<()> {
        for (name, node) in &encoded.norm_nodes {
            let Some((mean, var)) = g.batch_stats(*node) else {
                continue;
            };
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let buf = store.buffer_mut(&format!("{name}.{suffix}"))?;
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
        Ok(())
    }
}

fn to_channels_first(images: &[f64], count: usize, shape: ImageShape) -> Vec<f64> {
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let mut out = vec![0.0; images.len()];
    for n in 0..count {
        let base = n * h * w * c;
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[base + (ch * h + y) * w + x] = images[base + (y * w + x) * c + ch];
                }
            }
        }
    }
    out
}

/// Adds a zero-initialized linear classifier `head.weight: d_h × C`,
/// `head.bias: C` to the store, replacing any previous head.
pub fn init_linear_head(store: &mut ParameterStore, feature_dim: usize, classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::invalid("classes", "a classifier needs at least two classes"));
    }
    store.remove_prefix("head.");
    store.insert("head.weight", Tensor::zeros([feature_dim, classes]))?;
    store.insert("head.bias", Tensor::zeros([classes]))?;
    Ok(())
}

/// Class logits `H·W + b`; no activation.
pub fn linear_head(g: &mut Graph, params: &Bound, h: NodeId) -> Result<NodeId> {
    let w = params.get("head.weight")?;
    let b = params.get("head.bias")?;
    g.affine(h, w, b)
}
