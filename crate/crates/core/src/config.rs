//! Run configuration shared by the command-line tool and the service.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::actions::DiscretizationSpec;
use crate::dataset::CollectionConfig;
use crate::error::{Error, Result};
use crate::harness::ExperimentPlan;
use crate::model::{InverseModelSpec, TrainHyper};
use crate::sim::SimConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable naming the directory that default paths live in.
pub const DATA_DIR_ENV: &str = "ROPEWEAVER_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectionPlan {
    pub random: usize,
    pub active: usize,
    /// Goal images for active collection.
    pub goals: usize,
    /// Random actions from reset used to make each goal.
    pub goal_actions: usize,
    /// Epochs of the intermediate model that drives active collection.
    pub bootstrap_epochs: usize,
    pub records: CollectionConfig,
}

impl Default for CollectionPlan {
    fn default() -> Self {
        Self {
            random: 20_000,
            active: 20_000,
            goals: 64,
            goal_actions: 4,
            bootstrap_epochs: 4,
            records: CollectionConfig::default(),
        }
    }
}

/// Unset entries fall back to files under the data directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
    pub trace_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub sim: SimConfig,
    pub discretization: DiscretizationSpec,
    pub model: InverseModelSpec,
    pub train: TrainHyper,
    pub collection: CollectionPlan,
    pub experiment: ExperimentPlan,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            sim: SimConfig::default(),
            discretization: DiscretizationSpec::default(),
            model: InverseModelSpec::default(),
            train: TrainHyper::default(),
            collection: CollectionPlan::default(),
            experiment: ExperimentPlan::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Parses JSON text. Errors carry the dotted path of the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::InvalidConfig(if path == "." { inner.to_string() } else { format!("at `{path}`: {inner}") })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "at `version`: unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let ctx = |section: &str, e: Error| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("in `{section}`: {m}")),
            other => other,
        };
        self.sim.validate().map_err(|e| ctx("sim", e))?;
        self.discretization.validate().map_err(|e| ctx("discretization", e))?;
        self.model.validate().map_err(|e| ctx("model", e))?;
        self.collection.records.validate().map_err(|e| ctx("collection.records", e))?;
        self.experiment.validate().map_err(|e| ctx("experiment", e))?;
        if self.train.batch_size == 0 {
            return Err(Error::InvalidConfig("at `train.batch_size`: must be ≥ 1".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::InvalidConfig("at `train.lr`: must be > 0".into()));
        }
        if self.model.grid != self.discretization.grid
            || self.model.n_theta != self.discretization.n_theta
            || self.model.n_len != self.discretization.n_len
        {
            return Err(Error::InvalidConfig("at `model`: head sizes disagree with `discretization`".into()));
        }
        if (self.model.input_width, self.model.input_height) != (self.sim.raster_width, self.sim.raster_height) {
            return Err(Error::InvalidConfig("at `model.input_width`: input size differs from the sim raster".into()));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths
            .data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("ropeweaver-data"))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.paths.dataset.clone().unwrap_or_else(|| self.data_dir().join("dataset.rwd"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.data_dir().join("model.ckpt"))
    }

    pub fn train_log_path(&self) -> PathBuf {
        self.paths.train_log.clone().unwrap_or_else(|| self.data_dir().join("train_log.csv"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.paths.report_dir.clone().unwrap_or_else(|| self.data_dir().join("report"))
    }

    pub fn trace_dir(&self) -> PathBuf {
        self.paths.trace_dir.clone().unwrap_or_else(|| self.data_dir().join("traces"))
    }
}
