//! Run configuration shared by every pipeline stage.
//!
//! A [`RunConfig`] is a plain JSON document so a run can be reproduced from
//! the file alone. The digest of the canonical serialization is recorded in
//! every stage manifest, which ties artifacts back to the exact settings
//! that produced them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ingest::CalibrationConfig;
use crate::manifest::sha256_bytes;
use crate::predict::{Architecture, ModelConfig, ALL_ARCHITECTURES};
use crate::preprocess::area::{Area, AreaConfig};
use crate::subclass::{CriteriaThresholds, SvmConfig};
use crate::synthgen::{AnomalyKind, ScenarioConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to {action} config at {path}: {source}")]
    Io {
        action: &'static str,
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config at {path}: {source}")]
    Malformed {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Input and output locations. `tracks` and `spat` are the preprocessed
/// LiDAR track table and the SPaT event log; when a synth stage is
/// configured they point into its output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathsConfig {
    pub tracks: PathBuf,
    pub spat: PathBuf,
    pub out_dir: PathBuf,
}

/// Optional synthetic-scene stage run before ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthStageConfig {
    pub scenario: ScenarioConfig,
    /// Re-simulates one normal agent with the given behaviour.
    pub anomaly: Option<AnomalyKind>,
}

/// Sliding-window extraction and the trajectory-level splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentStageConfig {
    /// Window lengths to materialize, in frames.
    pub windows: Vec<usize>,
    /// Random per-window subsample size, `None` keeps everything.
    pub sample: Option<usize>,
    /// Fraction of trajectories assigned to training, rest is held out.
    pub train_ratio: f64,
    /// Fraction of the training trajectories carved off for validation.
    pub val_ratio: f64,
}

/// Which cells of the architecture x window grid to train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStageConfig {
    pub architectures: Vec<Architecture>,
    /// Must be a subset of `augment.windows`.
    pub windows: Vec<usize>,
    /// Trains each cell twice, with and without the sub-class flag.
    pub ablation: bool,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: Option<SynthStageConfig>,
    pub calibration: CalibrationConfig,
    pub areas: AreaConfig,
    pub phase_map: BTreeMap<Area, u32>,
    pub criteria: CriteriaThresholds,
    pub svm: SvmConfig,
    pub augment: AugmentStageConfig,
    pub train: TrainStageConfig,
    /// Safety margin added to predicted arrival when deciding feasibility.
    pub buffer_seconds: f64,
}

/// One model to train: a grid cell with its derived per-cell seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub architecture: Architecture,
    pub window: usize,
    pub with_subclass: bool,
    pub seed: u64,
}

/// Splitmix-style odd multiplier; decorrelates per-cell seeds from the
/// run seed without an RNG.
const CELL_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

impl RunConfig {
    /// A full synthetic run: generated scene, all four architectures at a
    /// ten-frame window, ablation on. Iteration count is kept small enough
    /// for a default end-to-end run; raise it to paper scale explicitly.
    pub fn synthetic_default(out_dir: &Path, seed: u64) -> Self {
        let scenario = ScenarioConfig::default_scene(seed);
        let synth_dir = out_dir.join("synth");
        RunConfig {
            seed,
            paths: PathsConfig {
                tracks: synth_dir.join("tracks.csv"),
                spat: synth_dir.join("spat.csv"),
                out_dir: out_dir.to_path_buf(),
            },
            calibration: CalibrationConfig::default(),
            areas: AreaConfig {
                crossings: scenario.areas.crossings.clone(),
            },
            phase_map: scenario.phase_map.clone(),
            synth: Some(SynthStageConfig {
                scenario,
                anomaly: None,
            }),
            criteria: CriteriaThresholds::default(),
            svm: SvmConfig {
                seed,
                ..SvmConfig::default()
            },
            augment: AugmentStageConfig {
                windows: vec![10],
                sample: None,
                train_ratio: 0.76,
                val_ratio: 0.15,
            },
            train: TrainStageConfig {
                architectures: ALL_ARCHITECTURES.to_vec(),
                windows: vec![10],
                ablation: true,
                iterations: 600,
                batch_size: 30,
                learning_rate: 0.000_15,
                log_every: 100,
            },
            buffer_seconds: 3.0,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            action: "read",
            path: path.to_path_buf(),
            source,
        })?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Malformed {
                path: path.to_path_buf(),
                source,
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|source| ConfigError::Io {
            action: "write",
            path: path.to_path_buf(),
            source,
        })
    }

    /// Digest of the canonical serialization; stamped into stage manifests.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        sha256_bytes(&canonical)
    }

    /// Points every seeded component at `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.svm.seed = seed;
        if let Some(synth) = &mut self.synth {
            synth.scenario.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.areas
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.criteria
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.svm
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for area in Area::CROSSINGS {
            if !self.phase_map.contains_key(&area) {
                return Err(ConfigError::Invalid(format!(
                    "phase_map is missing {area:?}"
                )));
            }
        }
        if !(3.0..=5.0).contains(&self.buffer_seconds) {
            return Err(ConfigError::Invalid(format!(
                "buffer_seconds must lie in [3, 5], got {}",
                self.buffer_seconds
            )));
        }
        if self.augment.windows.is_empty() {
            return Err(ConfigError::Invalid("augment.windows is empty".into()));
        }
        if self.augment.windows.iter().any(|&w| w < 2) {
            return Err(ConfigError::Invalid(
                "augment.windows entries must be at least 2 frames".into(),
            ));
        }
        if !(0.0 < self.augment.train_ratio && self.augment.train_ratio < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "augment.train_ratio must lie in (0, 1), got {}",
                self.augment.train_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.augment.val_ratio) {
            return Err(ConfigError::Invalid(format!(
                "augment.val_ratio must lie in [0, 1), got {}",
                self.augment.val_ratio
            )));
        }
        if self.augment.sample == Some(0) {
            return Err(ConfigError::Invalid(
                "augment.sample of 0 would discard every window".into(),
            ));
        }
        if self.train.architectures.is_empty() {
            return Err(ConfigError::Invalid("train.architectures is empty".into()));
        }
        if self.train.windows.is_empty() {
            return Err(ConfigError::Invalid("train.windows is empty".into()));
        }
        for &w in &self.train.windows {
            if !self.augment.windows.contains(&w) {
                return Err(ConfigError::Invalid(format!(
                    "train window {w} is not materialized by the augment stage"
                )));
            }
        }
        if self.train.iterations == 0 || self.train.batch_size == 0 || self.train.log_every == 0 {
            return Err(ConfigError::Invalid(
                "train iterations, batch_size, and log_every must be positive".into(),
            ));
        }
        if !(self.train.learning_rate.is_finite() && self.train.learning_rate > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "train.learning_rate must be positive, got {}",
                self.train.learning_rate
            )));
        }
        if let Some(synth) = &self.synth {
            synth
                .scenario
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            // The ingest stage must see the same geometry the scene was
            // simulated with; compare serialized forms to sidestep floats.
            let same_areas = serde_json::to_string(&synth.scenario.areas).unwrap()
                == serde_json::to_string(&self.areas).unwrap();
            if !same_areas {
                return Err(ConfigError::Invalid(
                    "synth.scenario.areas differs from top-level areas".into(),
                ));
            }
            if synth.scenario.phase_map != self.phase_map {
                return Err(ConfigError::Invalid(
                    "synth.scenario.phase_map differs from top-level phase_map".into(),
                ));
            }
            if synth.scenario.seed != self.seed {
                return Err(ConfigError::Invalid(format!(
                    "synth.scenario.seed {} differs from run seed {}",
                    synth.scenario.seed, self.seed
                )));
            }
        }
        Ok(())
    }

    /// Expands the train section into concrete grid cells. Ablation doubles
    /// the grid with sub-class-blind twins. Each cell gets its own seed so
    /// shuffling streams never collide across cells.
    pub fn grid_cells(&self) -> Vec<GridCell> {
        let subclass_variants: &[bool] = if self.train.ablation {
            &[true, false]
        } else {
            &[true]
        };
        let mut cells = Vec::new();
        for &architecture in &self.train.architectures {
            for &window in &self.train.windows {
                for &with_subclass in subclass_variants {
                    let index = cells.len() as u64;
                    cells.push(GridCell {
                        architecture,
                        window,
                        with_subclass,
                        seed: self.seed ^ (index.wrapping_add(1).wrapping_mul(CELL_SEED_MIX)),
                    });
                }
            }
        }
        cells
    }

    /// Builds the model configuration for one grid cell, applying the
    /// train-section overrides on top of the architecture defaults.
    pub fn model_config(&self, cell: &GridCell) -> ModelConfig {
        let mut config = ModelConfig::new(
            cell.architecture,
            cell.window,
            cell.with_subclass,
            cell.seed,
        );
        config.iterations = self.train.iterations;
        config.batch_size = self.train.batch_size;
        config.learning_rate = self.train.learning_rate;
        config.log_every = self.train.log_every;
        config
    }
}
