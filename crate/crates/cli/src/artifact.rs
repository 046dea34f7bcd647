//! Trained-model files.
//!
//! `model.json` holds the experiment snapshot, the named parameters and the
//! training record, plus a probe bag with the prediction made at save time.
//! Loading recomputes the probe prediction and refuses the file if it moved
//! by more than [`PROBE_TOL`].

use std::fs;
use std::path::{Path, PathBuf};

use quantnet::classic::ClassicQuantifier;
use quantnet::data::PrevalenceVector;
use quantnet::deep::{DeepQuantifier, TrainingHistory};
use quantnet::diffcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const GRID_FILE: &str = "grid.csv";
pub const PROBE_TOL: f64 = 1e-12;
/// Rows of the probe bag kept in the artifact.
pub const PROBE_ROWS: usize = 32;

/// One classical hyperparameter candidate and its validation score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub l2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    /// Mean validation loss; absent when there were no validation bags.
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum TrainedModel {
    Deep { model: DeepQuantifier, history: TrainingHistory },
    Classic { model: ClassicQuantifier, grid: Vec<GridPoint> },
}

impl TrainedModel {
    pub fn quantify(&self, features: &Tensor) -> Result<PrevalenceVector> {
        match self {
            TrainedModel::Deep { model, .. } => Ok(model.quantify(features)?),
            TrainedModel::Classic { model, .. } => Ok(model.quantify(features)),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            TrainedModel::Deep { model, .. } => model.config.classes,
            TrainedModel::Classic { model, .. } => model.classes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub features: Tensor,
    pub prediction: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub arch: String,
    pub experiment: ExperimentConfig,
    pub model: TrainedModel,
    pub probe: Probe,
}

impl ModelArtifact {
    /// Wraps a trained model, recording its prediction on `probe_features`.
    pub fn new(experiment: ExperimentConfig, model: TrainedModel, probe_features: Tensor) -> Result<Self> {
        let prediction = model.quantify(&probe_features)?.into_inner();
        Ok(ModelArtifact {
            format_version: FORMAT_VERSION,
            arch: experiment.quantifier.kind.name().to_string(),
            experiment,
            model,
            probe: Probe { features: probe_features, prediction },
        })
    }

    pub fn classes(&self) -> usize {
        self.model.classes()
    }

    pub fn quantify(&self, features: &Tensor) -> Result<PrevalenceVector> {
        self.model.quantify(features)
    }

    /// Recomputes the probe prediction.
    pub fn verify(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(CliError::Config(format!(
                "artifact format {} is not supported (expected {})",
                self.format_version, FORMAT_VERSION
            )));
        }
        let now = self.quantify(&self.probe.features)?;
        let dev = now.as_slice().iter().zip(&self.probe.prediction).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if now.len() != self.probe.prediction.len() || dev.is_nan() || dev > PROBE_TOL {
            return Err(CliError::Core(quantnet::Error::Validation(format!(
                "probe bag check failed: prediction moved by {:e}",
                dev
            ))));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self).map_err(quantnet::Error::from)? + "\n")
    }

    /// Writes `model.json` and the training record CSV into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(MODEL_FILE);
        write(&path, &self.to_json()?)?;
        match &self.model {
            TrainedModel::Deep { history, .. } => write(&dir.join(HISTORY_FILE), &history.to_csv())?,
            TrainedModel::Classic { grid, .. } => write(&dir.join(GRID_FILE), &grid_csv(grid))?,
        }
        Ok(path)
    }

    /// Loads and verifies an artifact; `path` may be the file or its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MODEL_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| io_err(&file, e))?;
        let a: ModelArtifact = serde_json::from_str(&text).map_err(quantnet::Error::from)?;
        a.verify()?;
        Ok(a)
    }
}

fn grid_csv(grid: &[GridPoint]) -> String {
    let mut s = String::from("l2,bins,val_loss\n");
    for g in grid {
        let bins = g.bins.map(|b| b.to_string()).unwrap_or_default();
        let val = g.val_loss.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", g.l2, bins, val));
    }
    s
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(quantnet::Error::Io { path: path.to_path_buf(), source: e })
}

pub(crate) fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}
