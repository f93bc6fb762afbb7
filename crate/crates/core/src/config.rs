//! Run configuration in TOML. Every section is optional and falls back to
//! its defaults; unknown keys are rejected. `to_canonical_toml` writes the
//! fully resolved configuration, which reads back to the same value.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate, read_csv, read_dfd, split, CorruptionLevels, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::pipelines::ModelSettings;
use crate::sweep::SweepPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SynthSpec),
    /// A DFD1 file, or a CSV with columns `f0..` and `label`.
    File { path: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SynthSpec::default())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the split of unsplit data and the corruption noise.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub model: ModelSettings,
    pub sweep: SweepPlan,
    pub corruption: CorruptionLevels,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_canonical_toml(&self) -> String {
        toml::to_string(self).expect("run configuration always serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        self.model.validate()?;
        self.sweep.validate()?;
        self.corruption.validate()
    }

    /// The configured dataset, split with `seed` unless the file already
    /// carries split tags.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let data = match &self.dataset {
            DatasetSource::Synthetic(spec) => generate(spec)?,
            DatasetSource::File { path } => read_dataset_file(path)?,
        };
        match data.splits() {
            Some(_) => Ok(data),
            None => split(&data, self.seed),
        }
    }
}

/// Reads DFD1 or, for a `.csv` extension, CSV.
pub fn read_dataset_file(path: &Path) -> Result<Dataset> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        read_csv(path)
    } else {
        read_dfd(path)
    }
}
