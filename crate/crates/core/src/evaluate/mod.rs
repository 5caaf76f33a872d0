//! Metrics, the sub-class ablation, box-plot summaries, and the final
//! crossing-feasibility decision.
//!
//! Wall-clock numbers never enter report.json; they are written to a
//! separate timings.json so reruns produce byte-identical reports.

pub mod plot;

use crate::augment;
use crate::exec;
use crate::ingest::{IngestError, PhaseTimeline};
use crate::predict::{
    build_dataset, predict_trajectory, Architecture, PointPrediction, PredictError, TrainedModel,
};
use crate::preprocess::area::Area;
use crate::preprocess::Trajectory;
use crate::subclass::SubClassResult;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no test windows to evaluate")]
    EmptyTestSet,
    #[error("timeline does not cover timestamp {timestamp_ms} ms")]
    TimelineGap { timestamp_ms: i64 },
    #[error("failed to {action} {path}")]
    Io {
        action: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to render {path}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("bad report file {path}: {source}")]
    BadReport {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// Mean squared error. Panics on empty or mismatched slices; callers gate
/// with EmptyTestSet first.
pub fn mse(predictions: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(predictions.len(), targets.len(), "prediction/target mismatch");
    assert!(!predictions.is_empty(), "mse over empty slice");
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    sum / predictions.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRmse {
    pub agent_id: u64,
    pub n_windows: usize,
    pub mse: f64,
    pub rmse: f64,
}

/// Five-number summary with 1.5 x IQR whiskers. Quartiles use linear
/// interpolation between order statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPlotSummary {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub lower_whisker: f64,
    pub upper_whisker: f64,
    pub outliers: Vec<f64>,
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BoxPlotSummary {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        let q1 = quantile_sorted(&sorted, 0.25);
        let median = quantile_sorted(&sorted, 0.5);
        let q3 = quantile_sorted(&sorted, 0.75);
        let iqr = q3 - q1;
        let lower_fence = q1 - 1.5 * iqr;
        let upper_fence = q3 + 1.5 * iqr;
        let inside: Vec<f64> = sorted
            .iter()
            .copied()
            .filter(|v| (lower_fence..=upper_fence).contains(v))
            .collect();
        // Fences always contain the quartiles, so `inside` is nonempty.
        let lower_whisker = inside[0];
        let upper_whisker = inside[inside.len() - 1];
        let outliers = sorted
            .iter()
            .copied()
            .filter(|v| !(lower_fence..=upper_fence).contains(v))
            .collect();
        Some(BoxPlotSummary {
            n: sorted.len(),
            min: sorted[0],
            q1,
            median,
            q3,
            max: sorted[sorted.len() - 1],
            lower_whisker,
            upper_whisker,
            outliers,
        })
    }
}

/// One grid cell: architecture x window x subclass-feature flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellKey {
    pub architecture: Architecture,
    pub window: usize,
    pub with_subclass: bool,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}_w{}_{}",
            self.architecture,
            self.window,
            if self.with_subclass { "with_subclass" } else { "without_subclass" }
        )
    }
}

impl CellKey {
    pub fn of(model: &TrainedModel) -> Self {
        CellKey {
            architecture: model.config.architecture,
            window: model.config.window,
            with_subclass: model.config.includes_subclass(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub key: CellKey,
    pub n_windows: usize,
    pub test_mse: f64,
    pub test_rmse: f64,
    pub per_trajectory: Vec<TrajectoryRmse>,
    pub box_plot: Option<BoxPlotSummary>,
}

/// MSE_without - MSE_with for one (architecture, window) pair; positive
/// means the sub-class feature helped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPair {
    pub architecture: Architecture,
    pub window: usize,
    pub mse_with: f64,
    pub mse_without: f64,
    pub improvement: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<CellMetrics>,
    /// Key of the lowest-MSE cell; first in input order on ties.
    pub best: Option<CellKey>,
    pub ablation: Vec<AblationPair>,
    /// Wall clock per cell; serialized to timings.json, never report.json.
    #[serde(skip)]
    pub wall_seconds: BTreeMap<String, f64>,
}

impl EvalReport {
    /// Largest gap between a cell's aggregate MSE and the window-count
    /// weighted mean of its per-trajectory MSEs.
    pub fn max_consistency_gap(&self) -> f64 {
        self.cells
            .iter()
            .map(|cell| {
                let weighted: f64 = cell
                    .per_trajectory
                    .iter()
                    .map(|t| t.mse * t.n_windows as f64)
                    .sum();
                let n: usize = cell.per_trajectory.iter().map(|t| t.n_windows).sum();
                (cell.test_mse - weighted / n as f64).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Writes report.json (metrics only) and timings.json (wall clock).
    pub fn save(&self, dir: &Path) -> Result<(), EvalError> {
        let write = |path: PathBuf, json: String| -> Result<(), EvalError> {
            std::fs::write(&path, json).map_err(|source| EvalError::Io {
                action: "write",
                path,
                source,
            })
        };
        write(
            dir.join("report.json"),
            serde_json::to_string_pretty(self).expect("report serializes"),
        )?;
        write(
            dir.join("timings.json"),
            serde_json::to_string_pretty(&self.wall_seconds).expect("timings serialize"),
        )
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            action: "read",
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| EvalError::BadReport {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Score one model on held-out trajectories: windows are cut at the model's
/// own length, grouped per trajectory for the box-plot view.
pub fn evaluate_model(
    model: &TrainedModel,
    test_trajectories: &[Trajectory],
    timeline: &PhaseTimeline,
    subclass_by_agent: &BTreeMap<u64, SubClassResult>,
) -> Result<CellMetrics, EvalError> {
    let windows = augment::augment_trajectories(test_trajectories, model.config.window);
    if windows.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let ds = build_dataset(
        &windows,
        timeline,
        model.config.includes_subclass(),
        subclass_by_agent,
    )?;
    let predictions = model.batch_forward(&ds.features)?;

    let mut groups: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for ((pred, target), agent) in predictions.iter().zip(&ds.targets).zip(&ds.agent_ids) {
        let sq = (pred - target) * (pred - target);
        total += sq;
        let entry = groups.entry(*agent).or_insert((0.0, 0));
        entry.0 += sq;
        entry.1 += 1;
    }
    let per_trajectory: Vec<TrajectoryRmse> = groups
        .into_iter()
        .map(|(agent_id, (sum_sq, n))| {
            let traj_mse = sum_sq / n as f64;
            TrajectoryRmse {
                agent_id,
                n_windows: n,
                mse: traj_mse,
                rmse: traj_mse.sqrt(),
            }
        })
        .collect();
    let test_mse = total / predictions.len() as f64;
    let rmses: Vec<f64> = per_trajectory.iter().map(|t| t.rmse).collect();
    Ok(CellMetrics {
        key: CellKey::of(model),
        n_windows: predictions.len(),
        test_mse,
        test_rmse: test_mse.sqrt(),
        per_trajectory,
        box_plot: BoxPlotSummary::from_values(&rmses),
    })
}

/// Pair up cells that differ only in the sub-class flag.
pub fn ablation_pairs(cells: &[CellMetrics]) -> Vec<AblationPair> {
    let mut pairs = Vec::new();
    for with in cells.iter().filter(|c| c.key.with_subclass) {
        let twin = cells.iter().find(|c| {
            !c.key.with_subclass
                && c.key.architecture == with.key.architecture
                && c.key.window == with.key.window
        });
        if let Some(without) = twin {
            pairs.push(AblationPair {
                architecture: with.key.architecture,
                window: with.key.window,
                mse_with: with.test_mse,
                mse_without: without.test_mse,
                improvement: without.test_mse - with.test_mse,
            });
        }
    }
    pairs
}

/// Evaluate every model of the grid against the same held-out trajectories;
/// cells run in parallel.
pub fn evaluate_grid(
    models: &[TrainedModel],
    test_trajectories: &[Trajectory],
    timeline: &PhaseTimeline,
    subclass_by_agent: &BTreeMap<u64, SubClassResult>,
) -> Result<EvalReport, EvalError> {
    if models.is_empty() || test_trajectories.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let outcomes = exec::map_collect(models, |model| {
        let started = Instant::now();
        let cell = evaluate_model(model, test_trajectories, timeline, subclass_by_agent);
        (cell, started.elapsed().as_secs_f64())
    });
    let mut cells = Vec::with_capacity(models.len());
    let mut wall_seconds = BTreeMap::new();
    for (cell, wall) in outcomes {
        let cell = cell?;
        wall_seconds.insert(cell.key.to_string(), wall);
        cells.push(cell);
    }
    let best = cells
        .iter()
        .min_by(|a, b| a.test_mse.partial_cmp(&b.test_mse).expect("finite MSE"))
        .map(|c| c.key);
    let ablation = ablation_pairs(&cells);
    Ok(EvalReport {
        cells,
        best,
        ablation,
        wall_seconds,
    })
}

/// Per-trajectory RMSE distribution for one model, for box plots.
pub fn per_trajectory_rmse(
    model: &TrainedModel,
    trajectories: &[Trajectory],
    timeline: &PhaseTimeline,
    subclass_by_agent: &BTreeMap<u64, SubClassResult>,
) -> Result<(Vec<TrajectoryRmse>, BoxPlotSummary), EvalError> {
    let cell = evaluate_model(model, trajectories, timeline, subclass_by_agent)?;
    let summary = cell.box_plot.expect("nonempty cell has a box plot");
    Ok((cell.per_trajectory, summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    CanCross,
    CannotCross,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::CanCross => "can_cross",
            Verdict::CannotCross => "cannot_cross",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingDecision {
    pub agent_id: u64,
    pub t_now_ms: i64,
    /// Clamped to zero; raw model output may be negative.
    pub predicted_arrival: f64,
    /// Remaining green seconds at t_now; zero when the phase is not green.
    pub left_green: f64,
    pub buffer: f64,
    pub green_now: bool,
    pub verdict: Verdict,
}

/// The final feasibility call: can_cross iff the phase is green now and
/// clamp(predicted, 0) + buffer <= left_green.
pub fn decide_crossing(
    agent_id: u64,
    predicted_arrival: f64,
    timeline: &PhaseTimeline,
    area: Area,
    t_now_ms: i64,
    buffer: f64,
) -> Result<CrossingDecision, EvalError> {
    if !timeline.covers(t_now_ms) {
        return Err(EvalError::TimelineGap { timestamp_ms: t_now_ms });
    }
    let (state, left) = timeline.query(t_now_ms, area)?;
    let predicted = predicted_arrival.max(0.0);
    let (green_now, left_green) = if state.is_green() { (true, left) } else { (false, 0.0) };
    let verdict = if green_now && predicted + buffer <= left_green {
        Verdict::CanCross
    } else {
        Verdict::CannotCross
    };
    Ok(CrossingDecision {
        agent_id,
        t_now_ms,
        predicted_arrival: predicted,
        left_green,
        buffer,
        green_now,
        verdict,
    })
}

/// One decision per valid window position along a trajectory, each taken at
/// the window's last point against that trajectory's governing crossing.
pub fn decide_for_trajectory(
    model: &TrainedModel,
    traj: &Trajectory,
    timeline: &PhaseTimeline,
    subclass: &SubClassResult,
    buffer: f64,
) -> Result<Vec<CrossingDecision>, EvalError> {
    let area = traj
        .governing_crossing()
        .ok_or(EvalError::EmptyTestSet)?;
    let predictions = predict_trajectory(model, traj, timeline, subclass)?;
    predictions
        .iter()
        .map(|p| decide_crossing(traj.agent_id, p.predicted, timeline, area, p.timestamp_ms, buffer))
        .collect()
}

pub const DECISIONS_HEADER: &str =
    "agent_id,t_now_ms,predicted_arrival,left_green,buffer,green_now,verdict";

pub fn write_decisions_csv(path: &Path, decisions: &[CrossingDecision]) -> Result<(), EvalError> {
    let io_err = |action, source| EvalError::Io {
        action,
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(|e| io_err("create", e))?;
    let mut out = std::io::BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(out, "{DECISIONS_HEADER}")?;
        for d in decisions {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                d.agent_id,
                d.t_now_ms,
                d.predicted_arrival,
                d.left_green,
                d.buffer,
                d.green_now,
                d.verdict
            )?;
        }
        out.flush()
    })();
    res.map_err(|e| io_err("write", e))
}

/// Per-point |prediction - target| over a trajectory, seconds since the
/// first prediction. This is the artifact's reading of the per-figure L1
/// series; the loss itself is never clamped.
pub fn abs_error_series(predictions: &[PointPrediction]) -> Vec<(f64, f64)> {
    let Some(first) = predictions.first() else {
        return Vec::new();
    };
    predictions
        .iter()
        .map(|p| {
            (
                (p.timestamp_ms - first.timestamp_ms) as f64 / 1000.0,
                (p.predicted - p.target).abs(),
            )
        })
        .collect()
}
