//! Experiment configuration files.

use std::path::{Path, PathBuf};

use lrds_core::data::{gen_blobs, load_csv, load_idx, BlobSpec, Dataset};
use lrds_core::influence::InfluenceConfig;
use lrds_core::model::ModelSpec;
use lrds_core::trainer::DistillConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    Blobs {
        train: BlobSpec,
        #[serde(default)]
        test: Option<BlobSpec>,
    },
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        /// Declared class count; labels at or above it are rejected.
        #[serde(default)]
        class_count: Option<usize>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
    /// Small datasets written directly in the config, one row per sample.
    Inline {
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        #[serde(default)]
        class_count: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TeacherConfig {
    Mlp {
        model: ModelSpec,
        /// Optimiser settings for teacher training; defaults to the `distill` section.
        #[serde(default)]
        training: Option<DistillConfig>,
    },
    /// One-parameter model fitting the mean of feature 0.
    MeanEstimator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub student: Option<ModelSpec>,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub influence: InfluenceConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_format_version() -> u32 {
    CONFIG_FORMAT_VERSION
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A loaded configuration with paths resolved against the config file's directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    /// Hex SHA-256 of the configuration as written (after any seed override).
    pub hash: String,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(&canonical))
    }

    /// Sets every seed except the dataset's.
    pub fn override_seed(&mut self, seed: u64) {
        self.distill.seed = seed;
        if let Some(s) = &mut self.student {
            s.seed = seed;
        }
        if let TeacherConfig::Mlp { model, training } = &mut self.teacher {
            model.seed = seed;
            if let Some(t) = training {
                t.seed = seed;
            }
        }
    }

    pub fn teacher_training(&self) -> DistillConfig {
        match &self.teacher {
            TeacherConfig::Mlp { training: Some(t), .. } => t.clone(),
            _ => self.distill.clone(),
        }
    }

    pub fn student_spec(&self) -> Result<&ModelSpec, CliError> {
        self.student
            .as_ref()
            .ok_or_else(|| CliError::Usage("config has no student section".into()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(CliError::Usage(format!(
                "config format_version {} is not supported (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let usage = |e: lrds_core::Error| CliError::Usage(e.to_string());
        match &self.dataset {
            DatasetConfig::Blobs { train, test } => {
                train.validate().map_err(usage)?;
                if let Some(t) = test {
                    t.validate().map_err(usage)?;
                }
            }
            DatasetConfig::Csv { train, test, .. } => {
                require_file(train)?;
                if let Some(t) = test {
                    require_file(t)?;
                }
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                require_file(train_images)?;
                require_file(train_labels)?;
                match (test_images, test_labels) {
                    (Some(i), Some(l)) => {
                        require_file(i)?;
                        require_file(l)?;
                    }
                    (None, None) => {}
                    _ => return Err(CliError::Usage("test_images and test_labels must be given together".into())),
                }
            }
            DatasetConfig::Inline { features, labels, .. } => {
                if features.len() != labels.len() {
                    return Err(CliError::Usage(format!(
                        "inline dataset has {} rows but {} labels",
                        features.len(),
                        labels.len()
                    )));
                }
            }
        }
        if let TeacherConfig::Mlp { model, training } = &self.teacher {
            model.validate().map_err(usage)?;
            if let Some(t) = training {
                t.validate().map_err(usage)?;
            }
        }
        if let Some(s) = &self.student {
            s.validate().map_err(usage)?;
        }
        self.distill.validate().map_err(usage)?;
        self.influence.validate().map_err(usage)?;
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetConfig::Csv { train, test, .. } => {
                fix(train);
                if let Some(t) = test {
                    fix(t);
                }
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                fix(train_images);
                fix(train_labels);
                if let Some(p) = test_images {
                    fix(p);
                }
                if let Some(p) = test_labels {
                    fix(p);
                }
            }
            _ => {}
        }
        fix(&mut self.output_dir);
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{}: file not found", path.display())));
    }
    Ok(())
}

impl Experiment {
    /// Reads, hashes, resolves and validates a config file.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = ExperimentConfig::from_json(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_config_with_base(&mut config, base, seed)
    }

    /// As [`Experiment::load`] for an in-memory config; relative paths resolve against `base`.
    pub fn from_config(mut config: ExperimentConfig, base: &Path, seed: Option<u64>) -> Result<Self, CliError> {
        Self::from_config_with_base(&mut config, base, seed)
    }

    fn from_config_with_base(config: &mut ExperimentConfig, base: &Path, seed: Option<u64>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            config.override_seed(s);
        }
        let hash = config.hash();
        config.resolve_paths(base);
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            hash,
        })
    }

    pub fn output_dir(&self) -> &Path {
        &self.config.output_dir
    }

    /// Training set and optional test set.
    pub fn load_data(&self) -> Result<(Dataset, Option<Dataset>), CliError> {
        Ok(match &self.config.dataset {
            DatasetConfig::Blobs { train, test } => {
                let tr = gen_blobs(train)?;
                let te = test.as_ref().map(gen_blobs).transpose()?;
                (tr, te)
            }
            DatasetConfig::Csv {
                train,
                test,
                class_count,
            } => {
                let tr = load_csv(train, *class_count)?;
                let te = test
                    .as_ref()
                    .map(|t| load_csv(t, Some(class_count.unwrap_or(tr.class_count()))))
                    .transpose()?;
                (tr, te)
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let tr = load_idx(train_images, train_labels)?;
                let te = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some(load_idx(i, l)?),
                    _ => None,
                };
                (tr, te)
            }
            DatasetConfig::Inline {
                features,
                labels,
                class_count,
            } => {
                let dim = features.first().map_or(0, Vec::len);
                if features.iter().any(|r| r.len() != dim) {
                    return Err(CliError::Usage("inline rows must all have the same length".into()));
                }
                let c = class_count.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
                let flat = features.iter().flatten().copied().collect();
                (Dataset::new("inline", flat, dim, labels.clone(), c)?, None)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"{
        "dataset": {"source": "inline", "features": [[1.0], [2.0], [3.0]], "labels": [0, 0, 0]},
        "teacher": {"kind": "mean_estimator"}
    }"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg = ExperimentConfig::from_json(TOY).unwrap();
        assert_eq!(cfg.format_version, 1);
        assert_eq!(cfg.distill, DistillConfig::default());
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        let exp = Experiment::from_config(cfg, Path::new("/tmp/x"), None).unwrap();
        assert_eq!(exp.output_dir(), Path::new("/tmp/x/out"));
        let (train, test) = exp.load_data().unwrap();
        assert_eq!((train.len(), train.dim(), train.class_count()), (3, 1, 1));
        assert!(test.is_none());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = TOY.replacen('{', r#"{"outptu_dir": "x","#, 1);
        assert!(matches!(ExperimentConfig::from_json(&text), Err(CliError::Usage(_))));
    }

    #[test]
    fn hash_tracks_seed_override() {
        let cfg = ExperimentConfig::from_json(TOY).unwrap();
        let a = Experiment::from_config(cfg.clone(), Path::new("."), None).unwrap();
        let b = Experiment::from_config(cfg.clone(), Path::new("/elsewhere"), None).unwrap();
        let c = Experiment::from_config(cfg, Path::new("."), Some(7)).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_ne!(a.hash, c.hash);
        assert_eq!(c.config.distill.seed, 7);
    }

    #[test]
    fn missing_data_file_is_a_usage_error() {
        let text = r#"{
            "dataset": {"source": "csv", "train": "nope.csv"},
            "teacher": {"kind": "mean_estimator"}
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        match Experiment::from_config(cfg, Path::new("/nonexistent"), None) {
            Err(CliError::Usage(m)) => assert!(m.contains("nope.csv")),
            other => panic!("{other:?}"),
        }
    }
}
