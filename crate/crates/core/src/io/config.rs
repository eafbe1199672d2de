//! Run configuration (TOML). Relative paths are resolved against the
//! directory containing the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::builder::EnsembleConfig;
use crate::error::{Error, Result};
use crate::gating::GatingConfig;
use crate::io::{idx::load_idx, synth::synth_dataset};
use crate::nn::LayerSpec;
use crate::partition::{LabeledDataset, SuperclassMap};
use crate::scalar::Scalar;
use crate::training::TrainConfig;

/// Deterministic synthetic stand-in for the IDX files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    #[serde(default = "default_size")]
    pub size: usize,
}

fn default_size() -> usize {
    28
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub synthetic: Option<SynthSection>,
    /// Superclass map used for training and evaluation.
    pub map: PathBuf,
    /// Map with one appended superclass, used by `add-expert`.
    pub increment_map: Option<PathBuf>,
    /// Keep only the first `n` samples (0 = all).
    #[serde(default)]
    pub train_limit: usize,
    #[serde(default)]
    pub test_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSection {
    #[serde(default = "default_input")]
    pub input_shape: Vec<usize>,
    /// Convolutional trunk; defaults to two 5×5 conv/ReLU/pool blocks with `channels`.
    pub base_spec: Option<Vec<LayerSpec>>,
    #[serde(default = "default_channels")]
    pub channels: [usize; 2],
    #[serde(default = "default_width")]
    pub expert_head_width: usize,
    #[serde(default = "default_width")]
    pub mediator_head_width: usize,
    #[serde(default = "default_hidden")]
    pub hidden_layers: usize,
    /// Shared conv layers (k).
    #[serde(default)]
    pub shared_prefix_len: usize,
    /// Confidence head attachment layer (j).
    #[serde(default = "default_j")]
    pub confidence_layer_index: usize,
}

fn default_input() -> Vec<usize> {
    vec![1, 28, 28]
}
fn default_channels() -> [usize; 2] {
    [8, 16]
}
fn default_width() -> usize {
    64
}
fn default_hidden() -> usize {
    1
}
fn default_j() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_t_list")]
    pub t_list: Vec<f64>,
    #[serde(default)]
    pub k_list: Vec<usize>,
}

fn default_t_list() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0]
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            t_list: default_t_list(),
            k_list: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub data: DataSection,
    pub architecture: ArchitectureSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub gating: GatingConfig,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn default_seed() -> u64 {
    1
}
fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn require_file(what: &str, p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} `{}` does not exist",
            p.display()
        )))
    }
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let d = &mut cfg.data;
        for p in [
            &mut d.train_images,
            &mut d.train_labels,
            &mut d.test_images,
            &mut d.test_labels,
            &mut d.increment_map,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base_dir, p);
        }
        resolve(base_dir, &mut d.map);
        resolve(base_dir, &mut cfg.out);
        Ok(cfg)
    }

    /// Reads, resolves and validates a config file. Errors carry the file name.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let with_name = |e: Error| Error::Config(format!("{}: {e}", path.display()));
        let cfg = Self::parse(&text, base).map_err(with_name)?;
        cfg.validate().map_err(with_name)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match (
            &d.synthetic,
            &d.train_images,
            &d.train_labels,
            &d.test_images,
            &d.test_labels,
        ) {
            (Some(s), None, None, None, None) => {
                if s.classes < 2 || s.train_per_class == 0 || s.test_per_class == 0 {
                    return Err(Error::Config(
                        "synthetic data needs >= 2 classes and samples per class".into(),
                    ));
                }
            }
            (None, Some(a), Some(b), Some(c), Some(e)) => {
                require_file("train_images", a)?;
                require_file("train_labels", b)?;
                require_file("test_images", c)?;
                require_file("test_labels", e)?;
            }
            _ => {
                return Err(Error::Config(
                    "[data] needs either all four IDX paths or a `synthetic` table, not both"
                        .into(),
                ))
            }
        }
        require_file("map", &d.map)?;
        if let Some(p) = &d.increment_map {
            require_file("increment_map", p)?;
        }
        if self.gating.threshold.is_nan() || self.gating.threshold <= 0.0 {
            return Err(Error::Config(format!(
                "gating.threshold must be > 0, got {}",
                self.gating.threshold
            )));
        }
        self.gating.validate()?;
        self.training.validate()?;
        if let Some(t) = self.sweep.t_list.iter().find(|t| t.is_nan() || **t <= 0.0) {
            return Err(Error::Config(format!(
                "sweep.t_list entries must be > 0, got {t}"
            )));
        }
        let map = self.map()?;
        self.ensemble_config(map.n_superclasses())?.validate()?;
        Ok(())
    }

    pub fn map(&self) -> Result<SuperclassMap> {
        SuperclassMap::load(&self.data.map)
    }

    pub fn increment_map(&self) -> Result<SuperclassMap> {
        let p = self
            .data
            .increment_map
            .as_ref()
            .ok_or_else(|| Error::Config("[data] increment_map is not set".into()))?;
        SuperclassMap::load(p)
    }

    pub fn ensemble_config(&self, n_experts: usize) -> Result<EnsembleConfig> {
        let a = &self.architecture;
        let mut cfg = EnsembleConfig::mnist_slim(
            n_experts,
            (a.channels[0], a.channels[1]),
            a.expert_head_width,
        );
        cfg.input_shape = a.input_shape.clone();
        if let Some(spec) = &a.base_spec {
            cfg.base_spec = spec.clone();
        }
        cfg.mediator_head_width = a.mediator_head_width;
        cfg.hidden_layers = a.hidden_layers;
        cfg.shared_prefix_len = a.shared_prefix_len;
        cfg.confidence_layer_index = a.confidence_layer_index;
        Ok(cfg)
    }

    /// Training parameters with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.training.clone()
        }
    }

    fn dataset<S: Scalar>(&self, train: bool) -> Result<LabeledDataset<S>> {
        let d = &self.data;
        let (ds, limit) = match &d.synthetic {
            Some(s) => {
                let per_class = if train {
                    s.train_per_class
                } else {
                    s.test_per_class
                };
                let tag = if train { "synth-train" } else { "synth-test" };
                let seed = crate::ensemble::derive_seed(self.seed, tag, 0);
                (
                    synth_dataset(seed, s.classes, per_class, s.size)?,
                    if train { d.train_limit } else { d.test_limit },
                )
            }
            None => {
                let (i, l, limit) = if train {
                    (&d.train_images, &d.train_labels, d.train_limit)
                } else {
                    (&d.test_images, &d.test_labels, d.test_limit)
                };
                (
                    load_idx(i.as_deref().unwrap(), l.as_deref().unwrap())?,
                    limit,
                )
            }
        };
        Ok(if limit > 0 && limit < ds.len() {
            ds.take(limit)
        } else {
            ds
        })
    }

    pub fn train_data<S: Scalar>(&self) -> Result<LabeledDataset<S>> {
        self.dataset(true)
    }

    pub fn test_data<S: Scalar>(&self) -> Result<LabeledDataset<S>> {
        self.dataset(false)
    }
}
