//! Experiment configuration read from a JSON document.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use diva_core::data::{load_csv, load_idx, Dataset, IncrementalSchedule};
use diva_core::diva::{DivaConfig, DpmmFitConfig, PriorConfig, UpdateConfig};
use diva_core::vae::VaeConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Idx,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub format: DataFormat,
    /// IDX image file or CSV table.
    pub path: PathBuf,
    /// IDX label file.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// CSV column holding integer labels.
    #[serde(default)]
    pub label_column: Option<String>,
    /// Keep only rows with these labels.
    #[serde(default)]
    pub classes: Option<Vec<u64>>,
}

impl DatasetConfig {
    /// Relative paths are taken from `base`, the directory of the config file.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        let path = base.join(&self.path);
        let ds = match self.format {
            DataFormat::Idx => {
                let Some(labels) = &self.labels else {
                    bail!("IDX datasets need a labels file");
                };
                if self.label_column.is_some() {
                    bail!("label_column applies to CSV datasets only");
                }
                load_idx(&path, &base.join(labels))?
            }
            DataFormat::Csv => {
                if self.labels.is_some() {
                    bail!("labels applies to IDX datasets only; use label_column");
                }
                load_csv(&path, self.label_column.as_deref())?
            }
        };
        match &self.classes {
            None => Ok(ds),
            Some(classes) => {
                let Some(labels) = &ds.labels else {
                    bail!("class filter on an unlabeled dataset");
                };
                let rows: Vec<usize> = (0..ds.len()).filter(|&i| classes.contains(&labels[i])).collect();
                if rows.is_empty() {
                    bail!("no rows carry the labels {classes:?}");
                }
                Ok(ds.select(&rows)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Option<DatasetConfig>,
    pub vae: VaeConfig,
    pub prior: PriorConfig,
    pub update: UpdateConfig,
    pub max_epochs: usize,
    pub seed: u64,
    pub schedule: Option<IncrementalSchedule>,
    pub output_dir: PathBuf,
    /// Save both model halves every this many epochs; the final models are always saved.
    pub checkpoint_interval: Option<usize>,
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let diva = DivaConfig::default();
        Self {
            dataset: None,
            vae: diva.vae,
            prior: diva.prior,
            update: diva.update,
            max_epochs: diva.max_epochs,
            seed: diva.seed,
            schedule: None,
            output_dir: PathBuf::from("runs"),
            checkpoint_interval: None,
            record_timing: diva.record_timing,
        }
    }
}

/// A parsed config together with the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base: PathBuf,
}

impl LoadedConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base })
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let Some(ds) = &self.config.dataset else {
            bail!("config has no dataset");
        };
        ds.load(&self.base)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.base.join(&self.config.output_dir)
    }
}

impl ExperimentConfig {
    pub fn diva(&self) -> DivaConfig {
        DivaConfig {
            vae: self.vae.clone(),
            prior: self.prior.clone(),
            update: self.update.clone(),
            max_epochs: self.max_epochs,
            seed: self.seed,
            record_timing: self.record_timing,
        }
    }

    pub fn dpmm_fit(&self) -> DpmmFitConfig {
        DpmmFitConfig {
            prior: self.prior.clone(),
            update: self.update.clone(),
            epochs: self.max_epochs,
            seed: self.seed,
            record_timing: self.record_timing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.diva().validate()?;
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        if self.checkpoint_interval == Some(0) {
            bail!("checkpoint_interval must be positive");
        }
        Ok(())
    }
}
