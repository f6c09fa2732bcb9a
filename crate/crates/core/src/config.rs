//! Run configuration: model + training recipe + dataset + output location.
//!
//! One JSON document describes a run; unknown keys are rejected. Precedence
//! is flags over file over built-in defaults (the CLI applies flag overrides
//! after parsing the file). The fully resolved config is echoed into the run
//! directory, which is named by a hash of that resolved config plus the seed
//! so distinct runs never overwrite each other.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar10, load_mnist, make_synthetic, Dataset, Split};
use crate::error::{GodeError, Result};
use crate::model::ModelSpec;
use crate::scalar::Scalar;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Synthetic,
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Synthetic => "synthetic",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// Train-split subset size (synthetic: the generated size).
    pub subset: Option<usize>,
    /// Test-split subset size.
    pub test_subset: Option<usize>,
    pub precision: Precision,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            dataset: DatasetKind::Synthetic,
            data_dir: None,
            subset: None,
            test_subset: None,
            precision: Precision::F32,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| GodeError::Config(format!("config parse: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GodeError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        match self.dataset {
            DatasetKind::Mnist => {
                if self.model.in_channels != 1 {
                    return Err(GodeError::Config(
                        "mnist images have 1 channel; set in_channels = 1".into(),
                    ));
                }
            }
            DatasetKind::Cifar10 => {
                if self.model.in_channels != 3 {
                    return Err(GodeError::Config(
                        "cifar10 images have 3 channels; set in_channels = 3".into(),
                    ));
                }
            }
            DatasetKind::Synthetic => {
                if self.model.in_channels != 1 {
                    return Err(GodeError::Config(
                        "synthetic images have 1 channel; set in_channels = 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Hash of the resolved config (FNV-1a over its canonical JSON).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }

    /// Per-run output directory: `<out_dir>/<hash>-s<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir
            .join(format!("{}-s{}", self.hash(), self.train.seed))
    }

    pub fn load_split<S: Scalar>(&self, split: Split) -> Result<Dataset<S>> {
        let subset = match split {
            Split::Train => self.subset,
            Split::Test => self.test_subset,
        };
        match self.dataset {
            DatasetKind::Synthetic => {
                let (n, seed) = match split {
                    Split::Train => (subset.unwrap_or(1000), self.train.seed ^ 0x7261_696e),
                    Split::Test => (subset.unwrap_or(200), self.train.seed ^ 0x7465_7374),
                };
                make_synthetic(n, seed, split)
            }
            DatasetKind::Mnist | DatasetKind::Cifar10 => {
                let dir = self.data_dir.as_ref().ok_or_else(|| {
                    GodeError::Config(format!("dataset {} needs --data-dir", self.dataset))
                })?;
                let ds = match self.dataset {
                    DatasetKind::Mnist => load_mnist(dir, split)?,
                    _ => load_cifar10(dir, split)?,
                };
                match subset {
                    Some(k) => ds.subset(k, self.train.seed),
                    None => Ok(ds),
                }
            }
        }
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"modle": {}}"#).unwrap_err();
        assert!(err.to_string().contains("modle"));
        assert!(RunConfig::from_json(r#"{"model": {"widht": 3}}"#).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn run_dir_embeds_hash_and_seed() {
        let mut cfg = RunConfig::default();
        cfg.train.seed = 42;
        let dir = cfg.run_dir();
        let name = dir.file_name().unwrap().to_str().unwrap();
        assert!(name.ends_with("-s42"));
        assert!(name.len() > 16);
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let mut cfg = RunConfig {
            dataset: DatasetKind::Cifar10,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(GodeError::Config(_))));
        cfg.model.in_channels = 3;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn synthetic_split_sizes() {
        let cfg = RunConfig {
            subset: Some(50),
            test_subset: Some(20),
            ..Default::default()
        };
        let train: Dataset<f32> = cfg.load_split(Split::Train).unwrap();
        let test: Dataset<f32> = cfg.load_split(Split::Test).unwrap();
        assert_eq!(train.len(), 50);
        assert_eq!(test.len(), 20);
        // train and test draw different noise
        assert_ne!(train.image(0), test.image(0));
    }
}
