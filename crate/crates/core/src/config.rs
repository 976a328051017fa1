//! Declarative run configuration (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, FewShotDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gradcheck::GradcheckSpec;
use crate::instrument::ZapDivConfig;
use crate::optim::OptimizerKind;
use crate::protocols::{PretrainConfig, PretrainMode, TransferConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// ZAPDATA1 file or a folder of per-class PNG folders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// Target image size (height, width).
    #[serde(default = "default_size")]
    pub size: (usize, usize),
}

fn default_size() -> (usize, usize) {
    (28, 28)
}

impl DatasetSpec {
    pub fn load(&self, base: &Path) -> Result<FewShotDataset> {
        match (&self.path, &self.synthetic) {
            (Some(p), None) => {
                let p = if p.is_relative() { base.join(p) } else { p.clone() };
                data::load_dataset(&p, self.size)
            }
            (None, Some(s)) => {
                if (s.size, s.size) != self.size {
                    return Err(Error::Config(format!(
                        "synthetic size {} differs from dataset size {:?}",
                        s.size, self.size
                    )));
                }
                data::make_synthetic(s)
            }
            _ => Err(Error::Config("dataset needs exactly one of `path` or `synthetic`".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub channels: usize,
    pub norm_eps: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            channels: 64,
            norm_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassSplit {
    /// Leading classes used for pre-training.
    pub pretrain: usize,
    /// Following classes used for transfer.
    pub transfer: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for ClassSplit {
    fn default() -> Self {
        ClassSplit {
            pretrain: 30,
            transfer: 20,
            n_train: 15,
            n_test: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub optimizers: Vec<OptimizerKind>,
    pub zapped: Vec<bool>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            optimizers: vec![OptimizerKind::Sgd, OptimizerKind::Adam],
            zapped: vec![true, false],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub dataset: DatasetSpec,
    /// Pre-training mode.
    pub mode: PretrainMode,
    /// Master seed; replicate r runs with seed + r.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub classes: ClassSplit,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
    #[serde(default)]
    pub zapdiv: ZapDivConfig,
    /// Whether the model for `zapdiv` is pre-trained with zapping.
    #[serde(default)]
    pub zapdiv_pretrain_zap: bool,
    /// Learning rates to run; empty = the lr of the relevant optimizer.
    #[serde(default)]
    pub lrs: Vec<f64>,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub gradcheck: GradcheckSpec,
    /// Pre-trained model for `transfer`/`zapdiv`; pre-trains in-process if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Cap on parallel sweep cells (ZAPNET_THREADS overrides).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

fn default_run_id() -> String {
    "run".into()
}

fn one() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.path.is_some() == self.dataset.synthetic.is_some() {
            return Err(Error::Config("dataset needs exactly one of `path` or `synthetic`".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.classes.pretrain == 0 || self.classes.transfer == 0 {
            return Err(Error::Config("class counts must be positive".into()));
        }
        if self.lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        for (name, bs) in [
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("transfer.batch_size", self.transfer.batch_size),
            ("zapdiv.batch_size", self.zapdiv.batch_size),
        ] {
            if bs == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn replicate_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text)
}
