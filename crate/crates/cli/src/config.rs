use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use csai_core::trainer::TrainConfig;
use csai_core::tsdata::{generate_synthetic, load_table, split_dataset, Dataset, SplitIndices, SyntheticConfig, TableSchema};

use crate::CliError;

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    /// Synthetic MNAR data with heterogeneous missing rates.
    Desk {
        n_samples: usize,
        n_steps: usize,
        n_features: usize,
    },
    /// Synthetic MNAR data with every generator setting spelled out.
    Synthetic { config: SyntheticConfig },
    /// A delimited file in the ingestion format.
    Table {
        path: PathBuf,
        #[serde(default)]
        schema: TableSchema,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.7, val: 0.15, test: 0.15 }
    }
}

/// One experiment. The seed is required in config files; every random
/// choice derives from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitRatios,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("csai-out")
}

/// Seed streams of the experiment-level draws.
const STREAM_DATA: u64 = 1;
const STREAM_SPLIT: u64 = 2;

/// Masking rates used in the published protocol.
const PROTOCOL_RATES: [f64; 3] = [0.05, 0.10, 0.20];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSource::Desk { n_samples: 200, n_steps: 24, n_features: 8 },
            split: SplitRatios::default(),
            train: TrainConfig::default(),
            out_dir: default_out_dir(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    /// Check values and referenced paths; copy the seed into the training block.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.train.seed = self.seed;
        self.train.validate()?;
        let r = &self.split;
        if [r.train, r.val, r.test].iter().any(|x| !(0.0..=1.0).contains(x)) || (r.train + r.val + r.test - 1.0).abs() > 1e-9 {
            return Err(CliError::Validation(format!(
                "split ratios {}/{}/{} must lie in [0, 1] and sum to 1",
                r.train, r.val, r.test
            )));
        }
        match &self.data {
            DataSource::Table { path, .. } if !path.exists() => {
                return Err(CliError::Validation(format!("data table {} does not exist", path.display())));
            }
            DataSource::Desk { n_samples, n_steps, n_features } if *n_samples == 0 || *n_steps == 0 || *n_features == 0 => {
                return Err(CliError::Validation("synthetic dimensions must be positive".into()));
            }
            _ => {}
        }
        let rate = self.train.masking.rate;
        if !PROTOCOL_RATES.iter().any(|&p| (p - rate).abs() < 1e-12) {
            log::warn!("masking rate {rate} is outside the usual 0.05 / 0.10 / 0.20 protocol");
        }
        Ok(self)
    }

    pub fn synthetic(&self) -> Option<SyntheticConfig> {
        match &self.data {
            DataSource::Desk { n_samples, n_steps, n_features } => {
                Some(SyntheticConfig::desk_scale(*n_samples, *n_steps, *n_features))
            }
            DataSource::Synthetic { config } => Some(config.clone()),
            DataSource::Table { .. } => None,
        }
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        Ok(match (&self.data, self.synthetic()) {
            (_, Some(cfg)) => generate_synthetic(&cfg, csai_core::rng::derive_seed(self.seed, STREAM_DATA))?,
            (DataSource::Table { path, schema }, None) => load_table(path, schema)?,
            _ => unreachable!("every source is synthetic or a table"),
        })
    }

    pub fn split_indices(&self, dataset: &Dataset) -> Result<SplitIndices, CliError> {
        let r = &self.split;
        Ok(split_dataset(
            dataset.len(),
            dataset.batch.labels(),
            (r.train, r.val, r.test),
            csai_core::rng::derive_seed(self.seed, STREAM_SPLIT),
        )?)
    }
}
