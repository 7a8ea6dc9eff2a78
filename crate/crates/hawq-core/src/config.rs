//! TOML run configuration. Unknown keys are rejected; every field has a
//! documented default except the model and data sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, synth_blobs_with_separation, Dataset};
use crate::error::{Error, Result};
use crate::hessian::ProbeConfig;
use crate::model::ModelSpec;
use crate::planner::{ActBitsPolicy, BitPalette, Budget};
use crate::trainer::OptimizerConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for model init and training shuffles.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub model: ModelSpec,
    pub data: DataConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Deterministic Gaussian blobs.
    Synth {
        train_n: usize,
        #[serde(default)]
        eval_n: usize,
        dim: usize,
        classes: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        seed: u64,
        /// Defaults to seed+1.
        #[serde(default)]
        eval_seed: Option<u64>,
    },
    /// IDX image/label pair, optionally with a held-out evaluation pair.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        eval_images: Option<PathBuf>,
        #[serde(default)]
        eval_labels: Option<PathBuf>,
    },
}

fn default_separation() -> f64 {
    6.0
}

impl DataConfig {
    pub fn load_train(&self) -> Result<Dataset> {
        match self {
            DataConfig::Synth {
                train_n,
                dim,
                classes,
                separation,
                seed,
                ..
            } => synth_blobs_with_separation(*train_n, *classes, *dim, *seed, *separation),
            DataConfig::Idx { images, labels, .. } => load_idx(images, labels),
        }
    }

    /// Held-out evaluation set, when configured.
    pub fn load_eval(&self) -> Result<Option<Dataset>> {
        match self {
            DataConfig::Synth {
                eval_n,
                dim,
                classes,
                separation,
                seed,
                eval_seed,
                ..
            } => {
                if *eval_n == 0 {
                    return Ok(None);
                }
                let s = eval_seed.unwrap_or(seed.wrapping_add(1));
                Ok(Some(synth_blobs_with_separation(
                    *eval_n,
                    *classes,
                    *dim,
                    s,
                    *separation,
                )?))
            }
            DataConfig::Idx {
                eval_images,
                eval_labels,
                ..
            } => match (eval_images, eval_labels) {
                (Some(i), Some(l)) => Ok(Some(load_idx(i, l)?)),
                (None, None) => Ok(None),
                _ => Err(Error::Config(
                    "eval_images and eval_labels must be given together".into(),
                )),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    /// Allowed weight bit widths, strictly descending.
    pub palette: Vec<u32>,
    /// Target minimum weight-compression ratio (exclusive with budget_bits).
    pub budget_compression: Option<f64>,
    /// Maximum weight size in bits (exclusive with budget_compression).
    pub budget_bits: Option<u64>,
    /// Global activation bit width.
    pub a_bits: u32,
    /// Override for the first activation site.
    pub a_bits_first: Option<u32>,
    /// Override for the last activation site.
    pub a_bits_last: Option<u32>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            palette: vec![8, 6, 4, 3, 2],
            budget_compression: None,
            budget_bits: None,
            a_bits: 4,
            a_bits_first: None,
            a_bits_last: None,
        }
    }
}

impl PlanConfig {
    pub fn palette(&self) -> Result<BitPalette> {
        BitPalette::new(self.palette.clone())
    }

    pub fn budget(&self) -> Result<Budget> {
        match (self.budget_compression, self.budget_bits) {
            (Some(r), None) => {
                if !(r >= 1.0) {
                    return Err(Error::Config(format!(
                        "budget_compression must be >= 1, got {r}"
                    )));
                }
                Ok(Budget::MinWeightCompression(r))
            }
            (None, Some(b)) => Ok(Budget::MaxSizeBits(b)),
            (None, None) => Err(Error::Config(
                "plan needs budget_compression or budget_bits".into(),
            )),
            (Some(_), Some(_)) => Err(Error::Config(
                "budget_compression and budget_bits are mutually exclusive".into(),
            )),
        }
    }

    pub fn act_policy(&self) -> ActBitsPolicy {
        ActBitsPolicy {
            bits: self.a_bits,
            first: self.a_bits_first,
            last: self.a_bits_last,
        }
    }
}

impl RunConfig {
    pub fn from_str_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.optimizer.validate().map_err(|e| Error::Config(e.to_string()))?;
        cfg.probe.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
seed = 42
out_dir = "runs/demo"

[model]
arch = "mini-resnet"
input_dim = 8
width = 16
residual_blocks = 3
classes = 4

[data]
kind = "synth"
train_n = 500
eval_n = 100
dim = 8
classes = 4
separation = 5.0
seed = 7

[plan]
budget_compression = 10.0
a_bits = 4
a_bits_first = 8
a_bits_last = 8

[optimizer]
lr = 0.01
max_epochs = 4
"#;

    #[test]
    fn parses_and_loads_data() {
        let cfg = RunConfig::from_str_toml(GOOD).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.probe.max_iters, 20); // default
        assert_eq!(cfg.optimizer.lr, 0.01);
        assert_eq!(cfg.optimizer.momentum, 0.9); // default
        let train = cfg.data.load_train().unwrap();
        assert_eq!(train.len(), 500);
        let eval = cfg.data.load_eval().unwrap().unwrap();
        assert_eq!(eval.len(), 100);
        assert!(train.features().elems() != eval.features().elems());
        cfg.plan.palette().unwrap();
        assert!(matches!(cfg.plan.budget().unwrap(), crate::planner::Budget::MinWeightCompression(r) if r == 10.0));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = GOOD.replace("seed = 42", "seed = 42\ntypo_key = 1");
        let err = RunConfig::from_str_toml(&bad).unwrap_err();
        assert!(err.to_string().contains("typo_key"), "got: {err}");

        let bad = GOOD.replace("lr = 0.01", "lr = 0.01\nlearning_rate = 0.1");
        assert!(RunConfig::from_str_toml(&bad).is_err());
    }

    #[test]
    fn budget_must_be_exactly_one_kind() {
        let none = GOOD.replace("budget_compression = 10.0", "");
        let cfg = RunConfig::from_str_toml(&none).unwrap();
        assert!(cfg.plan.budget().is_err());

        let both = GOOD.replace(
            "budget_compression = 10.0",
            "budget_compression = 10.0\nbudget_bits = 100",
        );
        let cfg = RunConfig::from_str_toml(&both).unwrap();
        assert!(cfg.plan.budget().is_err());
    }

    #[test]
    fn invalid_optimizer_rejected_at_parse() {
        let bad = GOOD.replace("lr = 0.01", "lr = -1.0");
        assert!(RunConfig::from_str_toml(&bad).is_err());
    }

    #[test]
    fn act_policy_comes_from_plan_section() {
        let cfg = RunConfig::from_str_toml(GOOD).unwrap();
        let policy = cfg.plan.act_policy();
        assert_eq!(policy.bits, 4);
        assert_eq!(policy.first, Some(8));
        assert_eq!(policy.last, Some(8));
    }
}
