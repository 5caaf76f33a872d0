//! Pedestrian sub-classification: per-trajectory size/motion features, the
//! four labeling criteria, a PCA separability check, and an SVM that
//! relabels whatever the criteria could not decide.
//!
//! Criteria order matters: 1-3 (any of them) label a trajectory normal,
//! criterion 4 labels it wheelchair only when 1-3 all failed, and the rest
//! fall through to unknown.

pub mod pca;
pub mod svm;

pub use pca::{fit_pca, pc1_separation, PcaModel};
pub use svm::{relabel_unknowns, train_svm, AccuracyReport, SvmConfig, SvmKernel, SvmModel};

use crate::exec;
use crate::ingest::{normalize_angle, PhaseTimeline};
use crate::preprocess::Trajectory;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const LABELED_FEATURES_HEADER: &str =
    "agent_id,mean_height,mean_width,mean_length,yaw_std,mean_speed,max_speed,label,source";

#[derive(Debug, Error)]
pub enum SubClassError {
    #[error("trajectory {agent_id} has no crossing-area points")]
    DegenerateTrajectory { agent_id: u64 },
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("every feature is constant across samples")]
    AllFeaturesConstant,
    #[error("training split contains a single class")]
    SingleClassTrainingSet,
    #[error("model has no support vectors; train it first")]
    UntrainedModel,
    #[error("failed to {action} {path}")]
    Io {
        action: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad labeled-features row at line {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error("bad model file {path}: {source}")]
    BadModel {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Label encoding follows the training convention: normal pedestrian 1,
/// wheelchair user 0, unknown 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubClassLabel {
    Wheelchair,
    Normal,
    Unknown,
}

impl SubClassLabel {
    pub fn code(self) -> u8 {
        match self {
            SubClassLabel::Wheelchair => 0,
            SubClassLabel::Normal => 1,
            SubClassLabel::Unknown => 2,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(SubClassLabel::Wheelchair),
            1 => Some(SubClassLabel::Normal),
            2 => Some(SubClassLabel::Unknown),
            _ => None,
        }
    }

    /// Value of the sub-class feature fed to the predictors.
    pub fn flag(self) -> f64 {
        match self {
            SubClassLabel::Wheelchair => 0.0,
            SubClassLabel::Normal => 1.0,
            SubClassLabel::Unknown => 0.5,
        }
    }
}

impl fmt::Display for SubClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SubClassLabel::Wheelchair => "wheelchair",
            SubClassLabel::Normal => "normal",
            SubClassLabel::Unknown => "unknown",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Criterion1,
    Criterion2,
    Criterion3,
    Criterion4,
    FallbackUnknown,
    Svm,
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LabelSource::Criterion1 => "criterion_1",
            LabelSource::Criterion2 => "criterion_2",
            LabelSource::Criterion3 => "criterion_3",
            LabelSource::Criterion4 => "criterion_4",
            LabelSource::FallbackUnknown => "fallback_unknown",
            LabelSource::Svm => "svm",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for LabelSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "criterion_1" => Ok(LabelSource::Criterion1),
            "criterion_2" => Ok(LabelSource::Criterion2),
            "criterion_3" => Ok(LabelSource::Criterion3),
            "criterion_4" => Ok(LabelSource::Criterion4),
            "fallback_unknown" => Ok(LabelSource::FallbackUnknown),
            "svm" => Ok(LabelSource::Svm),
            _ => Err(format!("unknown label source {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubClassResult {
    pub label: SubClassLabel,
    pub source: LabelSource,
    /// 1.0 for criteria labels, margin-derived for SVM labels, 0.0 for the
    /// unknown fallback.
    pub confidence: f64,
}

pub const FEATURE_DIM: usize = 6;
pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "mean_height",
    "mean_width",
    "mean_length",
    "yaw_std",
    "mean_speed",
    "max_speed",
];

/// Size and motion statistics of one trajectory, computed over its
/// crossing-area points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubClassFeatures {
    pub mean_height: f64,
    pub mean_width: f64,
    pub mean_length: f64,
    pub yaw_std: f64,
    pub mean_speed: f64,
    pub max_speed: f64,
}

impl SubClassFeatures {
    pub fn as_array(&self) -> [f64; FEATURE_DIM] {
        [
            self.mean_height,
            self.mean_width,
            self.mean_length,
            self.yaw_std,
            self.mean_speed,
            self.max_speed,
        ]
    }

    pub fn from_array(a: [f64; FEATURE_DIM]) -> Self {
        SubClassFeatures {
            mean_height: a[0],
            mean_width: a[1],
            mean_length: a[2],
            yaw_std: a[3],
            mean_speed: a[4],
            max_speed: a[5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaThresholds {
    /// Criterion 2: mean speed strictly above this is a normal pedestrian.
    pub speed_normal: f64,
    /// Criterion 1: seconds before the phase change whose mean speed is
    /// compared against the earlier portion.
    pub accel_window: f64,
    /// Criterion 1: required ratio of late to early mean speed (strict).
    pub accel_ratio: f64,
    /// Criterion 3: yaw standard deviation strictly above this is normal.
    pub yaw_std_high: f64,
    /// Criterion 4: inclusive box-height band for wheelchairs.
    pub wheelchair_height_min: f64,
    pub wheelchair_height_max: f64,
    /// Criterion 4: maximum relative width/length gap still "square".
    pub squareness_tol: f64,
}

impl Default for CriteriaThresholds {
    fn default() -> Self {
        CriteriaThresholds {
            speed_normal: 1.5,
            accel_window: 3.0,
            accel_ratio: 1.3,
            yaw_std_high: 0.5,
            wheelchair_height_min: 1.1,
            wheelchair_height_max: 1.5,
            squareness_tol: 0.25,
        }
    }
}

impl CriteriaThresholds {
    pub fn validate(&self) -> Result<(), SubClassError> {
        let all_positive = [
            self.speed_normal,
            self.accel_window,
            self.accel_ratio,
            self.yaw_std_high,
            self.wheelchair_height_min,
            self.wheelchair_height_max,
            self.squareness_tol,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        if !all_positive || self.wheelchair_height_min >= self.wheelchair_height_max {
            return Err(SubClassError::InsufficientSamples { needed: 0, got: 0 });
        }
        Ok(())
    }
}

/// Means/extremes over crossing-area points; yaw std on unwrapped angles so
/// a heading fluctuating around +-pi does not explode.
pub fn extract_features(traj: &Trajectory) -> Result<SubClassFeatures, SubClassError> {
    let points: Vec<_> = traj.points.iter().filter(|p| p.area.is_crossing()).collect();
    if points.is_empty() {
        return Err(SubClassError::DegenerateTrajectory {
            agent_id: traj.agent_id,
        });
    }
    let n = points.len() as f64;
    let mean = |f: &dyn Fn(&crate::preprocess::TrajectoryPoint) -> f64| {
        points.iter().map(|p| f(p)).sum::<f64>() / n
    };
    let mean_height = mean(&|p| p.box_height);
    let mean_width = mean(&|p| p.box_width);
    let mean_length = mean(&|p| p.box_length);
    let mean_speed = mean(&|p| p.speed);
    let max_speed = points.iter().map(|p| p.speed).fold(f64::NEG_INFINITY, f64::max);

    let mut unwrapped = Vec::with_capacity(points.len());
    let mut prev = points[0].yaw;
    let mut acc = prev;
    unwrapped.push(acc);
    for p in &points[1..] {
        acc += normalize_angle(p.yaw - prev);
        prev = p.yaw;
        unwrapped.push(acc);
    }
    let yaw_mean = unwrapped.iter().sum::<f64>() / n;
    let yaw_var = unwrapped.iter().map(|y| (y - yaw_mean).powi(2)).sum::<f64>() / n;
    let yaw_std = yaw_var.sqrt();

    Ok(SubClassFeatures {
        mean_height,
        mean_width,
        mean_length,
        yaw_std,
        mean_speed,
        max_speed,
    })
}

/// Criterion 1: the agent speeds up in the `accel_window` seconds before its
/// crossing's green phase ends. Compares the windowed mean speed against the
/// mean over all earlier points; false when the trajectory sees no green end
/// or either segment is empty.
pub fn criterion1_accelerates_before_phase_change(
    traj: &Trajectory,
    timeline: &PhaseTimeline,
    th: &CriteriaThresholds,
) -> bool {
    let Some(area) = traj.governing_crossing() else {
        return false;
    };
    let (Some(first), Some(last)) = (traj.first_timestamp_ms(), traj.last_timestamp_ms()) else {
        return false;
    };
    let change_ms = match timeline.first_green_end_in(first, last, area) {
        Ok(Some(t)) => t,
        Ok(None) => return false,
        Err(e) => {
            log::debug!("criterion 1 skipped for agent {}: {e}", traj.agent_id);
            return false;
        }
    };
    let window_start = change_ms - (th.accel_window * 1000.0).round() as i64;
    let (mut late_sum, mut late_n) = (0.0, 0usize);
    let (mut early_sum, mut early_n) = (0.0, 0usize);
    for p in &traj.points {
        if p.timestamp_ms >= window_start && p.timestamp_ms <= change_ms {
            late_sum += p.speed;
            late_n += 1;
        } else if p.timestamp_ms < window_start {
            early_sum += p.speed;
            early_n += 1;
        }
    }
    if late_n == 0 || early_n == 0 {
        return false;
    }
    let late = late_sum / late_n as f64;
    let early = early_sum / early_n as f64;
    early > 0.0 && late > th.accel_ratio * early
}

/// Criterion 2: mean speed strictly above the normal-walking threshold.
pub fn criterion2_fast(features: &SubClassFeatures, th: &CriteriaThresholds) -> bool {
    features.mean_speed > th.speed_normal
}

/// Criterion 3: yaw standard deviation strictly above threshold.
pub fn criterion3_high_yaw_variance(features: &SubClassFeatures, th: &CriteriaThresholds) -> bool {
    features.yaw_std > th.yaw_std_high
}

/// Criterion 4: wheelchair-height box with a near-square footprint.
pub fn criterion4_wheelchair_shape(features: &SubClassFeatures, th: &CriteriaThresholds) -> bool {
    let in_band = features.mean_height >= th.wheelchair_height_min
        && features.mean_height <= th.wheelchair_height_max;
    if !in_band {
        return false;
    }
    let longer = features.mean_width.max(features.mean_length);
    if longer <= 0.0 {
        return false;
    }
    let gap = (features.mean_width - features.mean_length).abs() / longer;
    gap <= th.squareness_tol
}

/// Criteria 1-3 (in order) label normal, then criterion 4 labels wheelchair,
/// else unknown. `source` records the first criterion that fired.
pub fn apply_criteria(
    traj: &Trajectory,
    features: &SubClassFeatures,
    timeline: &PhaseTimeline,
    th: &CriteriaThresholds,
) -> SubClassResult {
    if criterion1_accelerates_before_phase_change(traj, timeline, th) {
        return SubClassResult {
            label: SubClassLabel::Normal,
            source: LabelSource::Criterion1,
            confidence: 1.0,
        };
    }
    if criterion2_fast(features, th) {
        return SubClassResult {
            label: SubClassLabel::Normal,
            source: LabelSource::Criterion2,
            confidence: 1.0,
        };
    }
    if criterion3_high_yaw_variance(features, th) {
        return SubClassResult {
            label: SubClassLabel::Normal,
            source: LabelSource::Criterion3,
            confidence: 1.0,
        };
    }
    if criterion4_wheelchair_shape(features, th) {
        return SubClassResult {
            label: SubClassLabel::Wheelchair,
            source: LabelSource::Criterion4,
            confidence: 1.0,
        };
    }
    SubClassResult {
        label: SubClassLabel::Unknown,
        source: LabelSource::FallbackUnknown,
        confidence: 0.0,
    }
}

/// One classified trajectory, ready for the labeled-features file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFeatures {
    pub agent_id: u64,
    pub features: SubClassFeatures,
    pub result: SubClassResult,
}

/// Features + criteria labels for every trajectory, in input order.
pub fn classify_all(
    trajectories: &[Trajectory],
    timeline: &PhaseTimeline,
    th: &CriteriaThresholds,
) -> Result<Vec<LabeledFeatures>, SubClassError> {
    let results = exec::map_collect(trajectories, |traj| {
        extract_features(traj).map(|features| LabeledFeatures {
            agent_id: traj.agent_id,
            features,
            result: apply_criteria(traj, &features, timeline, th),
        })
    });
    results.into_iter().collect()
}

pub fn write_labeled_features(
    path: &Path,
    rows: &[LabeledFeatures],
) -> Result<(), SubClassError> {
    let io_err = |action, source| SubClassError::Io {
        action,
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(|e| io_err("create", e))?;
    let mut w = std::io::BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(w, "{LABELED_FEATURES_HEADER}")?;
        for row in rows {
            let f = &row.features;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                row.agent_id,
                f.mean_height,
                f.mean_width,
                f.mean_length,
                f.yaw_std,
                f.mean_speed,
                f.max_speed,
                row.result.label.code(),
                row.result.source,
            )?;
        }
        w.flush()
    })();
    res.map_err(|e| io_err("write", e))
}

pub fn read_labeled_features(path: &Path) -> Result<Vec<LabeledFeatures>, SubClassError> {
    let file = std::fs::File::open(path).map_err(|source| SubClassError::Io {
        action: "open",
        path: path.to_path_buf(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| SubClassError::Io {
            action: "read",
            path: path.to_path_buf(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (idx == 0 && trimmed == LABELED_FEATURES_HEADER) {
            continue;
        }
        let bad = |reason: String| SubClassError::BadRow {
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 9 {
            return Err(bad(format!("expected 9 fields, found {}", fields.len())));
        }
        let num = |s: &str, name: &str| -> Result<f64, SubClassError> {
            s.parse().map_err(|_| bad(format!("bad {name}: {s:?}")))
        };
        let agent_id = fields[0]
            .parse()
            .map_err(|_| bad(format!("bad agent_id {:?}", fields[0])))?;
        let features = SubClassFeatures {
            mean_height: num(fields[1], "mean_height")?,
            mean_width: num(fields[2], "mean_width")?,
            mean_length: num(fields[3], "mean_length")?,
            yaw_std: num(fields[4], "yaw_std")?,
            mean_speed: num(fields[5], "mean_speed")?,
            max_speed: num(fields[6], "max_speed")?,
        };
        let label_code: i64 = fields[7]
            .parse()
            .map_err(|_| bad(format!("bad label {:?}", fields[7])))?;
        let label = SubClassLabel::from_code(label_code)
            .ok_or_else(|| bad(format!("unknown label code {label_code}")))?;
        let source: LabelSource = fields[8].parse().map_err(bad)?;
        let confidence = match source {
            LabelSource::FallbackUnknown => 0.0,
            _ => 1.0,
        };
        rows.push(LabeledFeatures {
            agent_id,
            features,
            result: SubClassResult {
                label,
                source,
                confidence,
            },
        });
    }
    Ok(rows)
}
