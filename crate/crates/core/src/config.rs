//! TOML run configuration.
//!
//! ```toml
//! output_dir = "runs/teacher"
//!
//! [input]
//! height = 8
//! width = 8
//! channels = 1
//! classes = 4
//!
//! [[layers]]
//! kind = "conv"
//! in_channels = 1
//! out_channels = 16
//! kernel = 3
//! padding = 1
//! activation = "relu"
//!
//! [[layers]]
//! kind = "alf-conv"
//! in_channels = 16
//! out_channels = 16
//! kernel = 3
//! padding = 1
//!
//! [[layers]]
//! kind = "global-avg-pool"
//!
//! [[layers]]
//! kind = "linear"
//! in_features = 16
//! out_features = 4
//!
//! [training]
//! epochs = 20
//! pr = 0.5
//!
//! [dataset]
//! kind = "synthetic"
//! train_size = 4000
//! test_size = 1000
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar10, Dataset, Split, SyntheticTeacher, TeacherSpec, TEACHER_SIDE};
use crate::error::{AlfError, Result};
use crate::model::{Architecture, InputSpec, LayerSpec};
use crate::trainer::TrainingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Cifar10,
}

impl std::str::FromStr for DatasetKind {
    type Err = AlfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "cifar10" => Ok(Self::Cifar10),
            other => Err(AlfError::Config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// CIFAR-10 binary directory or file.
    pub path: Option<PathBuf>,
    /// Teacher seed for the synthetic task.
    pub seed: u64,
    /// Caps on the number of samples used; the synthetic task draws exactly
    /// this many.
    pub train_size: usize,
    pub test_size: usize,
    pub rank: usize,
    pub width: usize,
    pub classes: usize,
    pub margin_quantile: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let t = TeacherSpec::default();
        Self {
            kind: DatasetKind::Synthetic,
            path: None,
            seed: t.seed,
            train_size: 4000,
            test_size: 1000,
            rank: t.rank,
            width: t.width,
            classes: t.classes,
            margin_quantile: t.margin_quantile,
        }
    }
}

impl DatasetConfig {
    /// Input geometry the dataset produces.
    pub fn input_shape(&self) -> (usize, usize, usize, usize) {
        match self.kind {
            DatasetKind::Synthetic => (TEACHER_SIDE, TEACHER_SIDE, 1, self.classes),
            DatasetKind::Cifar10 => (32, 32, 3, 10),
        }
    }

    pub fn teacher_spec(&self) -> TeacherSpec {
        TeacherSpec {
            seed: self.seed,
            rank: self.rank,
            width: self.width,
            classes: self.classes,
            margin_quantile: self.margin_quantile,
        }
    }

    /// Loads `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self.kind {
            DatasetKind::Synthetic => {
                let teacher = SyntheticTeacher::new(self.teacher_spec())?;
                Ok((teacher.generate(self.train_size, 0)?, teacher.generate(self.test_size, 1)?))
            }
            DatasetKind::Cifar10 => {
                let path = self
                    .path
                    .as_deref()
                    .ok_or_else(|| AlfError::Config("cifar10 dataset needs a path".into()))?;
                let train = load_cifar10(path, Split::Train)?;
                let test = load_cifar10(path, Split::Test)?;
                Ok((truncate(train, self.train_size)?, truncate(test, self.test_size)?))
            }
        }
    }
}

fn truncate(d: Dataset, n: usize) -> Result<Dataset> {
    if n == 0 || n >= d.len() {
        return Ok(d);
    }
    let (x, y) = d.range(0, n);
    Dataset::new(x, y, d.classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
}

impl RunConfig {
    /// Parses and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| AlfError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AlfError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| AlfError::Config(e.to_string()))
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input: self.input,
            layers: self.layers.clone(),
        }
    }

    /// Checks the channel chain, training hyperparameters and the fit between
    /// dataset and input layer. Touches no data.
    pub fn validate(&self) -> Result<()> {
        self.architecture().validate()?;
        self.training.validate()?;
        let (h, w, c, classes) = self.dataset.input_shape();
        let i = &self.input;
        if (i.height, i.width, i.channels, i.classes) != (h, w, c, classes) {
            return Err(AlfError::Config(format!(
                "input {}×{}×{} with {} classes does not match the {:?} dataset ({h}×{w}×{c}, {classes} classes)",
                i.height, i.width, i.channels, i.classes, self.dataset.kind
            )));
        }
        if self.dataset.kind == DatasetKind::Synthetic {
            SyntheticTeacher::new(self.dataset.teacher_spec())?;
        }
        Ok(())
    }
}
