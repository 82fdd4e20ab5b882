//! Run configuration files (TOML).
//!
//! ```toml
//! version = 1
//!
//! [data]
//! images = "data/mnist-5k/images.idx.gz"   # relative to this file
//! labels = "data/mnist-5k/labels.idx.gz"
//! synth = "rot"            # rot | scale | none
//!
//! [model]
//! input = [1, 28, 28]
//! classes = 10
//! layout = "R4"
//! groups = 8
//! layers = ["conv k=3 s=1 p=1", "bn", "relu", "maxpool k=2 s=2", "gap", "linear"]
//!
//! [train]                  # optional, see TrainConfig for defaults
//! mini_profile = true
//!
//! [equiv]                  # optional
//! groups = ["R4"]
//! beta = 1.0               # or one weight per conv block
//! alpha = 1.0              # or { R4 = 1.0 }
//! policy = "all"           # or "sample:1"
//! meter = "R4"             # group the meter reads, default groups[0]
//! ```
//!
//! Unknown keys anywhere are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{synth_rot_mnist, synth_scale_mnist, Dataset};
use crate::equiv::{ElementPolicy, EquivConfig};
use crate::error::{Error, Result};
use crate::group::GroupSpec;
use crate::model::{build_model, pooled_channel_count, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{TrainConfig, Trainer};

pub const CONFIG_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_VERSION
}
fn default_synth() -> String {
    "rot".into()
}
fn default_seed() -> u64 {
    1
}
fn default_train_count() -> usize {
    2000
}
fn default_val_count() -> usize {
    1000
}
fn default_meter_sample() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub images: String,
    pub labels: String,
    #[serde(default = "default_synth")]
    pub synth: String,
    #[serde(default = "default_seed")]
    pub synth_seed: u64,
    #[serde(default = "default_seed")]
    pub split_seed: u64,
    #[serde(default = "default_train_count")]
    pub train: usize,
    #[serde(default = "default_val_count")]
    pub val: usize,
    /// Validation images the equivariance meter reads.
    #[serde(default = "default_meter_sample")]
    pub meter_sample: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weights {
    Uniform(f64),
    PerLayer(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupWeights {
    Uniform(f64),
    PerGroup(BTreeMap<String, f64>),
}

fn default_groups() -> Vec<String> {
    vec!["R4".into()]
}
fn default_beta() -> Weights {
    Weights::Uniform(1.0)
}
fn default_alpha() -> GroupWeights {
    GroupWeights::Uniform(1.0)
}
fn default_policy() -> String {
    "all".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivSection {
    #[serde(default = "default_groups")]
    pub groups: Vec<String>,
    #[serde(default = "default_beta")]
    pub beta: Weights,
    #[serde(default = "default_alpha")]
    pub alpha: GroupWeights,
    #[serde(default = "default_policy")]
    pub policy: String,
    /// Seed of the element sampler; the training seed when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_seed: Option<u64>,
    /// Group the meter reads; the first of `groups` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meter: Option<String>,
}

impl Default for EquivSection {
    fn default() -> Self {
        EquivSection {
            groups: default_groups(),
            beta: default_beta(),
            alpha: default_alpha(),
            policy: default_policy(),
            policy_seed: None,
            meter: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub equiv: EquivSection,
    /// Directory relative data paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn cfg_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Parses `"all"` or `"sample:k"`.
pub fn parse_policy(text: &str, seed: u64) -> Result<ElementPolicy> {
    match text.trim() {
        "all" => Ok(ElementPolicy::All),
        t => {
            let k = t
                .strip_prefix("sample:")
                .and_then(|k| k.trim().parse::<usize>().ok())
                .filter(|k| *k > 0)
                .ok_or_else(|| cfg_err("equiv.policy", format!("expected `all` or `sample:k`, got `{t}`")))?;
            Ok(ElementPolicy::Sample { k, seed })
        }
    }
}

impl RunConfig {
    /// Parses and validates TOML text.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| cfg_err("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| cfg_err(&path.display().to_string(), e.to_string()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical TOML with every default written out.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(cfg_err(
                "version",
                format!("schema version {} is not supported (expected {CONFIG_VERSION})", self.version),
            ));
        }
        if !["rot", "scale", "none"].contains(&self.data.synth.as_str()) {
            return Err(cfg_err("data.synth", format!("expected rot, scale or none, got `{}`", self.data.synth)));
        }
        if self.data.train == 0 || self.data.val == 0 {
            return Err(cfg_err("data.train", "split sizes must be positive"));
        }
        if self.data.meter_sample == 0 || self.data.meter_sample > self.data.val {
            return Err(cfg_err("data.meter_sample", "must be between 1 and the validation size"));
        }
        self.train.validate()?;
        let blocks = pooled_channel_count(&self.model)
            .map_err(|e| cfg_err("model", e.to_string()))?
            .len();
        self.meter_group()?;
        self.equiv_config(blocks).map(|_| ())
    }

    pub fn meter_group(&self) -> Result<GroupSpec> {
        let name = match (&self.equiv.meter, self.equiv.groups.first()) {
            (Some(m), _) => m,
            (None, Some(g)) => g,
            (None, None) => return Err(cfg_err("equiv.meter", "no group to meter")),
        };
        GroupSpec::parse(name).map_err(|e| cfg_err("equiv.meter", e.to_string()))
    }

    /// The unsynthesized source digits.
    pub fn load_base(&self) -> Result<Dataset> {
        Dataset::load(self.resolve(&self.data.images), self.resolve(&self.data.labels), "base")
    }

    /// Applies the configured synthesis to `base`.
    pub fn synthesize(&self, base: &Dataset) -> Result<Dataset> {
        match self.data.synth.as_str() {
            "rot" => synth_rot_mnist(base, self.data.synth_seed),
            "scale" => synth_scale_mnist(base, self.data.synth_seed),
            _ => Ok(base.clone()),
        }
    }

    /// Train and validation splits.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let all = self.synthesize(&self.load_base()?)?;
        all.split(self.data.split_seed, self.data.train, self.data.val)
    }

    /// The leading validation images the meter reads.
    pub fn meter_sample(&self, val: &Dataset) -> Result<Tensor<f32>> {
        let n = self.data.meter_sample.min(val.len());
        Ok(val.gather::<f32>(&(0..n).collect::<Vec<_>>())?.0)
    }

    /// A fresh trainer; `seed` overrides `train.seed` and also seeds the
    /// weights.
    pub fn trainer(&self, seed: Option<u64>) -> Result<Trainer<f32>> {
        let mut train = self.train.clone();
        if let Some(s) = seed {
            train.seed = s;
        }
        let mut cfg = self.clone();
        cfg.train.seed = train.seed;
        let model = build_model::<f32>(&self.model, train.seed)?;
        let equiv = cfg.equiv_config(model.num_blocks())?;
        Trainer::new(model, train, equiv)
    }

    /// Runtime equivariance settings for a model with `blocks` conv blocks.
    pub fn equiv_config(&self, blocks: usize) -> Result<EquivConfig> {
        let e = &self.equiv;
        let groups = e
            .groups
            .iter()
            .map(|g| GroupSpec::parse(g).map_err(|err| cfg_err("equiv.groups", err.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let beta = match &e.beta {
            Weights::Uniform(b) => vec![*b; blocks],
            Weights::PerLayer(v) => {
                if v.len() != blocks {
                    return Err(cfg_err(
                        "equiv.beta",
                        format!("{} weights for {blocks} conv blocks", v.len()),
                    ));
                }
                v.clone()
            }
        };
        if let Some(b) = beta.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
            return Err(cfg_err("equiv.beta", format!("{b} is not a finite non-negative weight")));
        }
        let alpha = match &e.alpha {
            GroupWeights::Uniform(a) => groups.iter().map(|g| (g.name().to_string(), *a)).collect(),
            GroupWeights::PerGroup(m) => {
                if let Some(k) = m.keys().find(|k| !groups.iter().any(|g| g.name() == k.as_str())) {
                    return Err(cfg_err(&format!("equiv.alpha.{k}"), "not one of equiv.groups"));
                }
                m.clone()
            }
        };
        if let Some((k, a)) = alpha.iter().find(|(_, a)| !(**a >= 0.0 && a.is_finite())) {
            return Err(cfg_err(&format!("equiv.alpha.{k}"), format!("{a} is not a finite non-negative weight")));
        }
        let policy = parse_policy(&e.policy, e.policy_seed.unwrap_or(self.train.seed))?;
        Ok(EquivConfig {
            groups,
            beta,
            alpha,
            policy,
        })
    }
}
