//! The experiment file: one TOML document whose defaults give the full
//! ResNet50 focal-loss protocol.

use std::path::{Path, PathBuf};

use lesionkit::augment::{TransformSpec, DEFAULT_TTA_N};
use lesionkit::models::ModelSpec;
use lesionkit::trainer::TrainConfig;
use lesionkit::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Overrides `dataset.images_root`.
pub const DATA_ROOT_ENV: &str = "LESIONKIT_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub metadata_path: PathBuf,
    pub images_root: PathBuf,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            metadata_path: "data/HAM10000_metadata.csv".into(),
            images_root: "data/images".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    pub test_fraction: f64,
    /// Share of the lesions left after the test slice.
    pub val_fraction: f64,
    pub k: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            seed: 0,
            test_fraction: 0.2,
            val_fraction: 0.2,
            k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub tta_n: usize,
    pub tta_seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            tta_n: DEFAULT_TTA_N,
            tta_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub augmentation: TransformSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: "runs".into(),
            dataset: DatasetConfig::default(),
            split: SplitConfig::default(),
            augmentation: TransformSpec::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            ensemble: EnsembleConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))
    }

    /// Reads `path`, resolving relative paths against its directory and
    /// applying the data-root environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()) {
            cfg.dataset.images_root = PathBuf::from(root);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.dataset.metadata_path);
        fix(&mut self.dataset.images_root);
        if let Some(w) = self.model.pretrained_weights.as_mut() {
            fix(w);
        }
    }

    /// Reseeds the split, model initialisation, training and TTA streams.
    pub fn set_seed(&mut self, seed: u64) {
        self.split.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
        self.ensemble.tta_seed = seed;
    }

    /// The training configuration with the augmentation table attached.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            augmentation: self.augmentation.clone(),
            ..self.train.clone()
        }
    }

    /// Numeric ranges only; see [`ExperimentConfig::check_paths`].
    pub fn validate(&self) -> Result<()> {
        let s = &self.split;
        for (name, f) in [("test_fraction", s.test_fraction), ("val_fraction", s.val_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("split.{name} must lie in (0, 1), got {f}")));
            }
        }
        if s.k == 1 {
            return Err(Error::Config("split.k must be 0 (no folds) or at least 2".into()));
        }
        if self.ensemble.tta_n == 0 {
            return Err(Error::Config("ensemble.tta_n must be at least 1".into()));
        }
        self.augmentation.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn check_paths(&self) -> Result<()> {
        let d = &self.dataset;
        if !d.metadata_path.is_file() {
            return Err(Error::Io {
                path: d.metadata_path.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "metadata file not found"),
            });
        }
        if !d.images_root.is_dir() {
            return Err(Error::Io {
                path: d.images_root.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "image directory not found"),
            });
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Hex SHA-256 of the serialized config.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lesionkit::losses::LossKind;
    use lesionkit::models::BackboneKind;

    #[test]
    fn empty_file_is_the_default_protocol() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.train.initial_lr, 1e-4);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.model.dropout_rate, 0.5);
        assert!(cfg.model.use_gap && cfg.train.use_gap);
        assert_eq!(cfg.train.loss, LossKind::Focal);
        assert_eq!(cfg.split.k, 5);
        assert_eq!(cfg.model.backbone, BackboneKind::Resnet50);
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trip_and_partial_tables() {
        let cfg = ExperimentConfig::from_toml(
            "[model]\nbackbone = \"tiny_test\"\npretrained = false\n[train]\nmax_epochs = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.model.backbone, BackboneKind::TinyTest);
        assert_eq!(cfg.model.hidden_width, 512);
        assert_eq!(cfg.train.max_epochs, 3);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.digest().unwrap(), cfg.digest().unwrap());
    }

    #[test]
    fn malformed_and_out_of_range_are_config_errors() {
        for bad in ["[train\n", "[train]\nbogus = 1\n", "[model]\nbackbone = \"alexnet\"\n"] {
            let err = ExperimentConfig::from_toml(bad).unwrap_err();
            assert_eq!(err.kind(), lesionkit::ErrorKind::Config, "{bad}");
        }
        let cfg = ExperimentConfig::from_toml("[split]\ntest_fraction = 1.5\n").unwrap();
        assert_eq!(cfg.validate().unwrap_err().kind(), lesionkit::ErrorKind::Config);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            "output_dir = \"out\"\n[dataset]\nmetadata_path = \"/abs/meta.csv\"\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.output_dir, dir.path().join("out"));
        assert_eq!(cfg.dataset.metadata_path, PathBuf::from("/abs/meta.csv"));
        let err = cfg.check_paths().unwrap_err();
        assert_eq!(err.kind(), lesionkit::ErrorKind::Data);
        assert!(err.to_string().contains("/abs/meta.csv"));
    }

    #[test]
    fn guide_example_parses() {
        let guide = include_str!("../../../book/src/cli.md");
        let block = guide.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
        let cfg = ExperimentConfig::from_toml(block).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.ensemble.tta_n, 10);
    }
}
