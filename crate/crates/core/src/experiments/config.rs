use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{CloudSimConfig, GapConfig, SplitConfig};
use crate::distill::LabelMode;
use crate::irm::RhoClamp;
use crate::learning::{Architecture, OptimizerConfig, OptimizerKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    OursIrm,
    OursNoIrm,
    FinetuneOpt,
    FinetuneSar,
    KdSoftOpt,
    SupervisedFusion,
    LateFusion,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::OursIrm,
        Method::OursNoIrm,
        Method::FinetuneOpt,
        Method::FinetuneSar,
        Method::KdSoftOpt,
        Method::SupervisedFusion,
        Method::LateFusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::OursIrm => "ours-irm",
            Method::OursNoIrm => "ours-no-irm",
            Method::FinetuneOpt => "finetune-opt",
            Method::FinetuneSar => "finetune-sar",
            Method::KdSoftOpt => "kd-soft-opt",
            Method::SupervisedFusion => "supervised-fusion",
            Method::LateFusion => "late-fusion",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Where the target dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    /// Generator settings, used when `path` is unset.
    pub synthetic: GapConfig,
    /// A saved dataset directory. Clouds and the split are applied on load
    /// unless the dataset already carries them.
    pub path: Option<PathBuf>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            synthetic: GapConfig {
                signal: 0.6,
                ..GapConfig::default()
            },
            path: None,
        }
    }
}

/// The cloud-free source task used to pretrain the source encoder: the
/// same generator with a different template family and class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceTaskConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub template_salt: u64,
    pub epochs: usize,
}

impl Default for SourceTaskConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            samples_per_class: 200,
            template_salt: 1,
            epochs: 60,
        }
    }
}

/// Per-stage epoch budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpochConfig {
    pub finetune: usize,
    pub f1: usize,
    pub f2: usize,
    /// Supervised baselines trained on the labeled pairs.
    pub baseline: usize,
}

impl Default for EpochConfig {
    fn default() -> Self {
        Self {
            finetune: 500,
            f1: 40,
            f2: 40,
            baseline: 100,
        }
    }
}

/// Switches for the transfer stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSwitches {
    pub label_mode: LabelMode,
    pub warm_start: bool,
    pub supervised_term: bool,
    pub freeze_encoder: bool,
    /// Train supervised baselines on every training pair instead of only
    /// the labeled ones.
    pub supervised_full_train: bool,
}

impl Default for DistillSwitches {
    fn default() -> Self {
        Self {
            label_mode: LabelMode::Soft,
            warm_start: false,
            supervised_term: false,
            freeze_encoder: true,
            supervised_full_train: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub epochs: EpochConfig,
    pub clamp: RhoClamp,
    pub model: Architecture,
    pub data: DataSpec,
    pub clouds: CloudSimConfig,
    pub split: SplitConfig,
    pub source: SourceTaskConfig,
    pub distill: DistillSwitches,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::OursIrm,
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            batch_size: 64,
            optimizer: OptimizerConfig {
                lr: 1e-3,
                decay: 0.0,
                kind: OptimizerKind::Adam {
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                },
            },
            epochs: EpochConfig::default(),
            clamp: RhoClamp::default(),
            model: Architecture::default(),
            data: DataSpec::default(),
            clouds: CloudSimConfig::default(),
            split: SplitConfig::default(),
            source: SourceTaskConfig::default(),
            distill: DistillSwitches::default(),
        }
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidInput(m) | Error::Shape(m) => Error::Config(m),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.source.classes < 2 || self.source.samples_per_class == 0 {
            return Err(Error::Config("source task needs >= 2 classes and samples".into()));
        }
        self.optimizer.validate().map_err(as_config)?;
        self.clamp.validate()?;
        self.model.validate().map_err(as_config)?;
        if self.data.path.is_none() {
            self.data.synthetic.validate().map_err(as_config)?;
        }
        self.clouds.validate().map_err(as_config)?;
        if !(0.0..1.0).contains(&self.split.test_fraction) {
            return Err(Error::Config("split.test_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for text in ["lr = 0.1", "[data.synthetic]\nsignall = 0.2", "[clamp]\nmin = 0.1\nmx = 2"] {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "batch_size = 0",
            "[optimizer]\nlr = -1.0",
            "[clamp]\nmin = 3.0\nmax = 1.0",
            "[clouds]\nimage_level_fraction = 1.5",
            "[data.synthetic]\nclasses = 1",
            "method = \"nope\"",
        ] {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "method = \"late-fusion\"\nseeds = [1, 2]\n[epochs]\nf2 = 3\n[optimizer]\nlr = 0.01\n",
        )
        .unwrap();
        assert_eq!(cfg.method, Method::LateFusion);
        assert_eq!(cfg.epochs.f2, 3);
        assert_eq!(cfg.epochs.f1, EpochConfig::default().f1);
        assert_eq!(cfg.optimizer.kind, OptimizerKind::Sgd { momentum: 0.0 });
    }

    #[test]
    fn methods_parse_from_their_names() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
    }
}
