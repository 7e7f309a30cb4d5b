//! Experiment configuration files (TOML, unknown keys rejected).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use cda_core::data::{synth_digits, synth_domain_pair, DigitSpec, Domain, ImageSet, ImageShape, Shift};
use cda_core::model::{EncoderKind, EncoderSpec, Model, Norm, ProjectorSpec};
use cda_core::pipeline::{EvalConfig, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::idx::read_idx_set;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of the run directories.
    pub out: PathBuf,
    /// One run per seed. The seed replaces `train.seed` and `eval.seed`.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs"),
            seeds: vec![0],
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub pairs: Vec<PairSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pairs: vec![PairSpec::default()],
        }
    }
}

/// One source → target domain pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PairSpec {
    /// Procedural digits as the source and a shifted copy as the target.
    Synthetic {
        #[serde(default)]
        name: Option<String>,
        #[serde(default = "default_digits")]
        digits: DigitSpec,
        #[serde(default = "default_shift")]
        shift: Shift,
        #[serde(default)]
        shift_seed: u64,
    },
    /// IDX files; relative paths resolve against the config file.
    Idx {
        name: String,
        source_images: PathBuf,
        source_labels: Option<PathBuf>,
        target_images: PathBuf,
        target_labels: Option<PathBuf>,
    },
}

fn default_digits() -> DigitSpec {
    DigitSpec {
        count: 2000,
        classes: 4,
        size: 16,
        seed: 1,
    }
}

fn default_shift() -> Shift {
    Shift::AffineJitter {
        max_shift: 4.0,
        max_rotation: 1.0,
    }
}

impl Default for PairSpec {
    fn default() -> Self {
        PairSpec::Synthetic {
            name: None,
            digits: default_digits(),
            shift: default_shift(),
            shift_seed: 2,
        }
    }
}

impl PairSpec {
    pub fn name(&self) -> String {
        match self {
            PairSpec::Synthetic { name: Some(n), .. } | PairSpec::Idx { name: n, .. } => n.clone(),
            PairSpec::Synthetic { shift, .. } => format!("digits_{}", shift.name()),
        }
    }

    /// Loads or generates `(source, target)`.
    pub fn load(&self, base_dir: &Path) -> Result<(ImageSet, ImageSet)> {
        match self {
            PairSpec::Synthetic {
                digits,
                shift,
                shift_seed,
                ..
            } => {
                let base = synth_digits(digits)?;
                Ok(synth_domain_pair(&base, *shift, *shift_seed)?)
            }
            PairSpec::Idx {
                source_images,
                source_labels,
                target_images,
                target_labels,
                ..
            } => {
                let at = |p: &PathBuf| base_dir.join(p);
                let source = read_idx_set(
                    &at(source_images),
                    source_labels.as_ref().map(at).as_deref(),
                    Domain::Source,
                )?;
                let target = read_idx_set(
                    &at(target_images),
                    target_labels.as_ref().map(at).as_deref(),
                    Domain::Target,
                )?;
                if source.shape() != target.shape() {
                    return Err(Error::Data(format!(
                        "pair `{}`: source images are {:?} but target images are {:?}",
                        self.name(),
                        source.shape(),
                        target.shape()
                    )));
                }
                Ok((source, target))
            }
        }
    }
}

/// Model shape without the input size, which comes from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorSpec,
}

/// Encoder architecture; `norm` and `output_dim` may be omitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderConfig {
    Mlp {
        hidden: Vec<usize>,
        #[serde(default)]
        norm: Norm,
        #[serde(default = "default_feature_dim")]
        output_dim: usize,
    },
    SmallCnn {
        channels: Vec<usize>,
        #[serde(default)]
        norm: Norm,
        #[serde(default = "default_feature_dim")]
        output_dim: usize,
    },
}

fn default_feature_dim() -> usize {
    64
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            projector: ProjectorSpec {
                hidden: [64, 64],
                output_dim: 32,
                normalize: true,
            },
        }
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::SmallCnn {
            channels: vec![16, 32],
            norm: Norm::Batch,
            output_dim: default_feature_dim(),
        }
    }
}

impl EncoderConfig {
    pub fn spec(&self, input: ImageShape) -> EncoderSpec {
        let (kind, norm, output_dim) = match self {
            EncoderConfig::Mlp {
                hidden,
                norm,
                output_dim,
            } => (EncoderKind::Mlp { hidden: hidden.clone() }, *norm, *output_dim),
            EncoderConfig::SmallCnn {
                channels,
                norm,
                output_dim,
            } => (
                EncoderKind::SmallCnn {
                    channels: channels.clone(),
                },
                *norm,
                *output_dim,
            ),
        };
        EncoderSpec {
            input,
            kind,
            norm,
            output_dim,
        }
    }
}

impl ModelConfig {
    pub fn build(&self, input: ImageShape) -> Result<Model> {
        Model::new(self.encoder.spec(input), self.projector.clone()).map_err(|e| Error::Config(format!("model: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            variants: vec![Variant::SimclrBase, Variant::CdaBase, Variant::CdaFnr],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: cda_core::Error| Error::Config(e.to_string());
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must list at least one seed".into()));
        }
        if self.data.pairs.is_empty() {
            return Err(Error::Config("`data.pairs` must list at least one domain pair".into()));
        }
        let names: BTreeSet<String> = self.data.pairs.iter().map(PairSpec::name).collect();
        if names.len() != self.data.pairs.len() {
            return Err(Error::Config("`data.pairs` names must be unique".into()));
        }
        if self.bench.variants.is_empty() {
            return Err(Error::Config("`bench.variants` must list at least one variant".into()));
        }
        self.train.validate().map_err(config)?;
        self.eval.validate().map_err(config)?;
        Ok(())
    }

    pub fn pair(&self, name: Option<&str>) -> Result<&PairSpec> {
        match name {
            None => Ok(&self.data.pairs[0]),
            Some(n) => self
                .data
                .pairs
                .iter()
                .find(|p| p.name() == n)
                .ok_or_else(|| Error::Config(format!("no domain pair named `{n}`"))),
        }
    }

    /// Training settings of one `(variant, seed)` cell.
    pub fn train_for(&self, variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            variant,
            seed,
            ..self.train.clone()
        }
    }

    pub fn eval_for(&self, seed: u64) -> EvalConfig {
        EvalConfig {
            seed,
            ..self.eval.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn defaults_survive_a_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn misspelled_keys_are_rejected() {
        for text in [
            "seedz = [1]",
            "[train]\nbatch = 4",
            "[train.optimizer]\nlearningrate = 0.1",
            "[model.encoder]\nkind = \"mlp\"\nhidden = [8]\nwidth = 3",
            "[[data.pairs]]\nkind = \"synthetic\"\ncolour = true",
        ] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn invalid_variant_names_the_field() {
        let msg = ExperimentConfig::from_toml("[train]\nvariant = \"cda_turbo\"")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("variant") && msg.contains("cda_turbo"), "{msg}");
    }

    #[test]
    fn full_config_parses() {
        let text = r#"
            out = "runs/x"
            seeds = [1, 2, 3]

            [[data.pairs]]
            kind = "synthetic"
            name = "inv"
            digits = { count = 64, classes = 4, size = 16, seed = 3 }
            shift = { kind = "invert" }

            [[data.pairs]]
            kind = "idx"
            name = "files"
            source_images = "a.idx"
            target_images = "b.idx"

            [model.encoder]
            kind = "mlp"
            hidden = [32]
            output_dim = 8

            [train]
            variant = "cda_fnr_mmd"
            batch_size = 16
            fnr_k = 2
            kernel = { bandwidth = { kind = "fixed", sigmas = [1.0] } }
            augmentation = [{ kind = "gaussian_noise", sigma = 0.1 }]

            [train.optimizer]
            kind = "lars"
            schedule = "cosine"

            [bench]
            variants = ["cda_base", "cda_x4aug"]
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.pair(Some("inv")).unwrap().name(), "inv");
        let spec = cfg.model.encoder.spec(ImageShape::new(16, 16, 1));
        assert_eq!(
            (spec.kind, spec.norm, spec.output_dim),
            (EncoderKind::Mlp { hidden: vec![32] }, Norm::None, 8)
        );
        assert_eq!(cfg.train.fnr_k, 2);
        assert_eq!(cfg.train_for(Variant::CdaMmd, 9).seed, 9);
        assert!(cfg.pair(Some("nope")).is_err());
    }

    #[test]
    fn duplicate_pair_names_are_rejected() {
        let text = "[[data.pairs]]\nkind = \"synthetic\"\n[[data.pairs]]\nkind = \"synthetic\"";
        assert!(ExperimentConfig::from_toml(text).is_err());
    }
}
