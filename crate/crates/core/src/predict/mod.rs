//! Arrival-time regression: per-point feature vectors, four window
//! regressors, and the seeded training loop.
//!
//! Predictions are raw seconds and may go negative; clamping happens at the
//! decision layer only, never inside the loss.

pub mod models;
pub mod tape;

pub use models::{param_count, Architecture, ParamSet, ALL_ARCHITECTURES};

use crate::augment::TrainingWindow;
use crate::exec;
use crate::ingest::{IngestError, PhaseTimeline};
use crate::linalg::Mat;
use crate::preprocess::Trajectory;
use crate::subclass::SubClassResult;
use models::{build_loss, build_predictions, Adam, BoundParams, DimCheck};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use tape::Tape;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("timeline does not cover timestamp {timestamp_ms} ms")]
    TimelineGap { timestamp_ms: i64 },
    #[error(
        "feature matrix is {got_rows}x{got_cols}, model expects {expected_rows}x{expected_cols}"
    )]
    DimensionMismatch {
        expected_rows: usize,
        expected_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("training diverged at step {step}: loss is not finite")]
    DivergedTraining { step: usize },
    #[error("trajectory {agent_id} has {got} usable points, window needs {needed}")]
    TrajectoryTooShort {
        agent_id: u64,
        needed: usize,
        got: usize,
    },
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("failed to {action} {path}")]
    Io {
        action: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad model file {path}: {source}")]
    BadModel {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

pub const FEATURE_DIM_WITH_SUBCLASS: usize = 13;
pub const FEATURE_DIM_WITHOUT_SUBCLASS: usize = 12;

pub fn feature_dim(include_subclass: bool) -> usize {
    if include_subclass {
        FEATURE_DIM_WITH_SUBCLASS
    } else {
        FEATURE_DIM_WITHOUT_SUBCLASS
    }
}

/// Column layout of one per-point feature row. The two area flags are
/// mutually exclusive; the subclass column exists only when D = 13.
pub const FEATURE_COLUMNS: [&str; FEATURE_DIM_WITH_SUBCLASS] = [
    "spent_time",
    "left_phase_time",
    "current_phase",
    "pos_x",
    "pos_y",
    "area_crossing",
    "area_vehicle",
    "box_width",
    "box_length",
    "box_height",
    "yaw",
    "speed",
    "subclass_flag",
];

/// Per-point feature rows for one window, W x D, in time order. Signal
/// lookups use the window's governing crossing.
pub fn build_features(
    window: &TrainingWindow,
    timeline: &PhaseTimeline,
    include_subclass: bool,
    subclass: &SubClassResult,
) -> Result<Mat, PredictError> {
    let d = feature_dim(include_subclass);
    let mut out = Mat::zeros(window.points.len(), d);
    for (i, p) in window.points.iter().enumerate() {
        if !timeline.covers(p.timestamp_ms) {
            return Err(PredictError::TimelineGap {
                timestamp_ms: p.timestamp_ms,
            });
        }
        let (state, left) = timeline.query(p.timestamp_ms, window.governing_area)?;
        let row = out.row_mut(i);
        row[0] = p.spent_time;
        row[1] = left;
        row[2] = state.flag();
        row[3] = p.pos_x;
        row[4] = p.pos_y;
        row[5] = if p.area.is_crossing() { 1.0 } else { 0.0 };
        row[6] = if p.area.is_crossing() { 0.0 } else { 1.0 };
        row[7] = p.box_width;
        row[8] = p.box_length;
        row[9] = p.box_height;
        row[10] = p.yaw;
        row[11] = p.speed;
        if include_subclass {
            row[12] = subclass.label.flag();
        }
    }
    Ok(out)
}

/// Featureized windows ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Mat>,
    pub targets: Vec<f64>,
    pub agent_ids: Vec<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Build feature matrices for every window. Agents missing from the
/// sub-class map fall back to the unknown flag with a debug log.
pub fn build_dataset(
    windows: &[TrainingWindow],
    timeline: &PhaseTimeline,
    include_subclass: bool,
    subclass_by_agent: &BTreeMap<u64, SubClassResult>,
) -> Result<Dataset, PredictError> {
    let unknown = SubClassResult {
        label: crate::subclass::SubClassLabel::Unknown,
        source: crate::subclass::LabelSource::FallbackUnknown,
        confidence: 0.0,
    };
    let features = exec::map_collect(windows, |win| {
        let subclass = subclass_by_agent.get(&win.agent_id).unwrap_or_else(|| {
            log::debug!("no sub-class result for agent {}; using unknown", win.agent_id);
            &unknown
        });
        build_features(win, timeline, include_subclass, subclass)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        features,
        targets: windows.iter().map(|w| w.target).collect(),
        agent_ids: windows.iter().map(|w| w.agent_id).collect(),
    })
}

/// Hyperparameters for one (architecture, window) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub window: usize,
    pub input_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Loss is recorded every this many steps (plus step 0 and the last).
    pub log_every: usize,
    pub ff_widths: Vec<usize>,
    pub rnn_hidden: usize,
    pub rnn_layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_inner: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Reference sizes: feedforward 256/512/256/128/64, recurrent hidden 32
    /// x 2 layers, attention embed 32 with 4 heads and 3+3 layers, batch 30,
    /// learning rate 0.00015, 10000 iterations.
    pub fn new(architecture: Architecture, window: usize, include_subclass: bool, seed: u64) -> Self {
        ModelConfig {
            architecture,
            window,
            input_dim: feature_dim(include_subclass),
            batch_size: 30,
            learning_rate: 0.00015,
            iterations: 10_000,
            log_every: 100,
            ff_widths: vec![256, 512, 256, 128, 64],
            rnn_hidden: 32,
            rnn_layers: 2,
            embed_dim: 32,
            heads: 4,
            encoder_layers: 3,
            decoder_layers: 3,
            ff_inner: 64,
            seed,
        }
    }

    pub fn includes_subclass(&self) -> bool {
        self.input_dim == FEATURE_DIM_WITH_SUBCLASS
    }

    pub fn validate(&self) -> Result<(), PredictError> {
        let bad = |msg: String| Err(PredictError::BadConfig(msg));
        if self.window < 2 {
            return bad(format!("window {} must be at least 2", self.window));
        }
        if self.input_dim != FEATURE_DIM_WITH_SUBCLASS
            && self.input_dim != FEATURE_DIM_WITHOUT_SUBCLASS
        {
            return bad(format!("input_dim {} is not 12 or 13", self.input_dim));
        }
        if self.batch_size == 0 || self.iterations == 0 || self.log_every == 0 {
            return bad("batch_size, iterations and log_every must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.ff_widths.is_empty() || self.ff_widths.iter().any(|w| *w == 0) {
            return bad("feedforward widths must be nonempty and positive".into());
        }
        if self.rnn_hidden == 0 || self.rnn_layers == 0 {
            return bad("recurrent sizes must be positive".into());
        }
        if self.embed_dim == 0
            || self.heads == 0
            || self.embed_dim % self.heads != 0
            || self.encoder_layers == 0
            || self.decoder_layers == 0
            || self.ff_inner == 0
        {
            return bad("attention sizes must be positive with embed_dim divisible by heads".into());
        }
        Ok(())
    }
}

/// Per-dimension z-scoring statistics fitted on the training set only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[Mat]) -> Self {
        let d = features.first().map_or(0, Mat::cols);
        let mut means = vec![0.0; d];
        let mut count = 0usize;
        for m in features {
            for i in 0..m.rows() {
                for (acc, v) in means.iter_mut().zip(m.row(i)) {
                    *acc += v;
                }
            }
            count += m.rows();
        }
        let n = count.max(1) as f64;
        for m in &mut means {
            *m /= n;
        }
        let mut vars = vec![0.0; d];
        for m in features {
            for i in 0..m.rows() {
                for ((acc, mean), v) in vars.iter_mut().zip(&means).zip(m.row(i)) {
                    let diff = v - mean;
                    *acc += diff * diff;
                }
            }
        }
        let stds = vars
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { means, stds }
    }

    pub fn apply(&self, features: &Mat) -> Mat {
        assert_eq!(features.cols(), self.means.len(), "standardizer width mismatch");
        Mat::from_fn(features.rows(), features.cols(), |i, j| {
            (features.get(i, j) - self.means[j]) / self.stds[j]
        })
    }
}

/// Loss curve point kept inside the checkpoint (no wall clock, so

/// checkpoints hash identically across reruns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub step: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

/// One training-log row; the CSV additionally records wall-clock seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub step: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub wall_seconds: f64,
}

pub const TRAINING_LOG_HEADER: &str = "step,train_mse,val_mse,wall_seconds";

pub fn write_training_log(path: &Path, entries: &[TrainLogEntry]) -> Result<(), PredictError> {
    let io_err = |action, source| PredictError::Io {
        action,
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(|e| io_err("create", e))?;
    let mut out = std::io::BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(out, "{TRAINING_LOG_HEADER}")?;
        for e in entries {
            let val = e.val_mse.map_or(String::new(), |v| v.to_string());
            writeln!(out, "{},{},{},{}", e.step, e.train_mse, val, e.wall_seconds)?;
        }
        out.flush()
    })();
    res.map_err(|e| io_err("write", e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub standardizer: Standardizer,
    pub history: Vec<HistoryPoint>,
}

/// Output of one training run: the final-iteration model, the
/// best-validation snapshot, and the wall-clock log.
#[derive(Debug)]
pub struct TrainingRun {
    pub model: TrainedModel,
    pub best: Option<TrainedModel>,
    pub log: Vec<TrainLogEntry>,
}

impl TrainedModel {
    fn dim_check(&self) -> DimCheck {
        DimCheck {
            expected_rows: self.config.window,
            expected_cols: self.config.input_dim,
        }
    }

    /// Predicted arrival seconds for one raw (unstandardized) W x D window.
    pub fn forward(&self, features: &Mat) -> Result<f64, PredictError> {
        self.dim_check().check(features)?;
        Ok(self.forward_standardized(&[self.standardizer.apply(features)])[0])
    }

    /// Forward over many raw windows, chunked.
    pub fn batch_forward(&self, features: &[Mat]) -> Result<Vec<f64>, PredictError> {
        let check = self.dim_check();
        for f in features {
            check.check(f)?;
        }
        let standardized: Vec<Mat> =
            exec::map_collect(features, |f| self.standardizer.apply(f));
        let chunks: Vec<&[Mat]> = standardized.chunks(256).collect();
        let per_chunk = exec::map_collect(&chunks, |chunk| self.forward_standardized(chunk));
        Ok(per_chunk.into_iter().flatten().collect())
    }

    fn forward_standardized(&self, batch: &[Mat]) -> Vec<f64> {
        if batch.is_empty() {
            return Vec::new();
        }
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params);
        let preds = build_predictions(&mut tape, &self.config, &bound, batch);
        preds.values(&tape)
    }

    pub fn save(&self, path: &Path) -> Result<(), PredictError> {
        let json = serde_json::to_string(self).expect("TrainedModel serializes");
        std::fs::write(path, json).map_err(|source| PredictError::Io {
            action: "write",
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PredictError> {
        let text = std::fs::read_to_string(path).map_err(|source| PredictError::Io {
            action: "read",
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| PredictError::BadModel {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn dataset_mse(model_config: &ModelConfig, params: &ParamSet, std_features: &[Mat], targets: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (chunk_f, chunk_t) in std_features.chunks(256).zip(targets.chunks(256)) {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params);
        let preds = build_predictions(&mut tape, model_config, &bound, chunk_f);
        for (p, t) in preds.values(&tape).iter().zip(chunk_t) {
            let d = p - t;
            sum += d * d;
        }
    }
    sum / targets.len() as f64
}

/// Minimize batch MSE for `iterations` steps of Adam. Fully seeded: the
/// same config and data reproduce the identical model bit for bit.
pub fn train(
    config: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<TrainingRun, PredictError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(PredictError::EmptyTrainSet);
    }
    let check = DimCheck {
        expected_rows: config.window,
        expected_cols: config.input_dim,
    };
    for f in train_set.features.iter().chain(&val_set.features) {
        check.check(f)?;
    }

    let standardizer = Standardizer::fit(&train_set.features);
    let train_std: Vec<Mat> =
        exec::map_collect(&train_set.features, |f| standardizer.apply(f));
    let val_std: Vec<Mat> = exec::map_collect(&val_set.features, |f| standardizer.apply(f));

    let mut params = models::init_params(config);
    let mut adam = Adam::new(config.learning_rate, &params);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    batch_rng.set_stream(1);

    let n = train_std.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut batch_rng);
    let mut cursor = 0usize;

    let mut history = Vec::new();
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamSet)> = None;
    let started = Instant::now();

    for step in 0..config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        let mut targets = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == n {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            batch.push(train_std[idx].clone());
            targets.push(train_set.targets[idx]);
        }

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let (loss_id, _) = build_loss(&mut tape, config, &bound, &batch, &targets);
        let loss = tape.scalar(loss_id);
        if !loss.is_finite() {
            return Err(PredictError::DivergedTraining { step });
        }

        let grads = tape.backward(loss_id);
        let grad_refs: Vec<Option<&Mat>> =
            bound.ids.iter().map(|&id| grads.get(id)).collect();
        adam.step(&mut params, &grad_refs);

        let last = step + 1 == config.iterations;
        if step % config.log_every == 0 || last {
            let val_mse = if val_std.is_empty() {
                None
            } else {
                Some(dataset_mse(config, &params, &val_std, &val_set.targets))
            };
            if let Some(v) = val_mse {
                if !v.is_finite() {
                    return Err(PredictError::DivergedTraining { step });
                }
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, params.clone()));
                }
            }
            history.push(HistoryPoint {
                step,
                train_mse: loss,
                val_mse,
            });
            log.push(TrainLogEntry {
                step,
                train_mse: loss,
                val_mse,
                wall_seconds: started.elapsed().as_secs_f64(),
            });
            log::debug!(
                "{} W={} step {step}: train {loss:.4}{}",
                config.architecture,
                config.window,
                val_mse.map_or(String::new(), |v| format!(" val {v:.4}"))
            );
        }
    }

    let model = TrainedModel {
        config: config.clone(),
        params,
        standardizer: standardizer.clone(),
        history: history.clone(),
    };
    let best = best.map(|(_, best_params)| TrainedModel {
        config: config.clone(),
        params: best_params,
        standardizer,
        history,
    });
    Ok(TrainingRun { model, best, log })
}

/// One prediction aligned to a window's last point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPrediction {
    pub last_index: usize,
    pub timestamp_ms: i64,
    pub predicted: f64,
    pub target: f64,
}

/// Slide the model's window along a trajectory: one prediction per valid
/// window position, aligned to each window's last point.
pub fn predict_trajectory(
    model: &TrainedModel,
    traj: &Trajectory,
    timeline: &PhaseTimeline,
    subclass: &SubClassResult,
) -> Result<Vec<PointPrediction>, PredictError> {
    let w = model.config.window;
    let windows = crate::augment::range_selection(traj, w);
    if windows.is_empty() {
        let usable = traj
            .points
            .iter()
            .rposition(|p| p.area.is_crossing())
            .map_or(0, |exit| exit + 1);
        return Err(PredictError::TrajectoryTooShort {
            agent_id: traj.agent_id,
            needed: w,
            got: usable,
        });
    }
    let include = model.config.includes_subclass();
    let features = windows
        .iter()
        .map(|win| build_features(win, timeline, include, subclass))
        .collect::<Result<Vec<_>, _>>()?;
    let predicted = model.batch_forward(&features)?;
    Ok(windows
        .iter()
        .zip(predicted)
        .map(|(win, pred)| PointPrediction {
            last_index: win.window_start_index + w - 1,
            timestamp_ms: win.points[w - 1].timestamp_ms,
            predicted: pred,
            target: win.target,
        })
        .collect())
}

#[cfg(test)]
mod tests;
