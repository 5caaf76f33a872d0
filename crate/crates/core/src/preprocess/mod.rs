//! Turns calibrated track records into per-agent trajectories and filters
//! them down to the pedestrian trajectories that actually use a crossing.
//!
//! Three rules gate a trajectory into the study set:
//! 1. at least half of its frames are labeled pedestrian,
//! 2. at least one point lies inside a crossing polygon,
//! 3. it has more than 10 points.

pub mod area;

pub use area::{Area, AreaConfig, AreaError, ConvexPolygon};

use crate::exec;
use crate::ingest::{apply_calibration, AgentLabel, CalibrationConfig, TrackRecord};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Rule 3 threshold: strictly more points than this survive.
pub const MIN_TRAJECTORY_POINTS: usize = 10;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error(transparent)]
    Area(#[from] AreaError),
    #[error(transparent)]
    Calibration(#[from] crate::ingest::IngestError),
    #[error("trajectory {agent_id} is empty")]
    EmptyTrajectory { agent_id: u64 },
    #[error("failed to {action} {path}")]
    Io {
        action: &'static str,
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad trajectory record at line {line}: {source}")]
    BadTrajectoryRecord {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// One frame of a trajectory, carrying everything downstream feature
/// extraction needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub timestamp_ms: i64,
    pub label: AgentLabel,
    pub confidence: f64,
    pub pos_x: f64,
    pub pos_y: f64,
    pub box_length: f64,
    pub box_width: f64,
    pub box_height: f64,
    pub yaw: f64,
    pub vel_x: f64,
    pub vel_y: f64,
    pub tracking_status: i64,
    /// Planar speed in m/s, `hypot(vel_x, vel_y)`.
    pub speed: f64,
    /// Seconds since the trajectory's first frame; 0 at the first point.
    pub spent_time: f64,
    pub area: Area,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub agent_id: u64,
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first_timestamp_ms(&self) -> Option<i64> {
        self.points.first().map(|p| p.timestamp_ms)
    }

    pub fn last_timestamp_ms(&self) -> Option<i64> {
        self.points.last().map(|p| p.timestamp_ms)
    }

    /// Fraction of points labeled pedestrian.
    pub fn pedestrian_ratio(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let ped = self
            .points
            .iter()
            .filter(|p| p.label == AgentLabel::Pedestrian)
            .count();
        ped as f64 / self.points.len() as f64
    }

    /// The crossing this trajectory belongs to: the crossing area its points
    /// fall in most often, ties broken by area order. `None` when no point
    /// touches a crossing.
    pub fn governing_crossing(&self) -> Option<Area> {
        let mut counts = [0usize; 4];
        for p in &self.points {
            if let Some(i) = p.area.crossing_index() {
                counts[i] += 1;
            }
        }
        let (best, &n) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
        if n == 0 {
            None
        } else {
            Area::from_crossing_index(best)
        }
    }

    /// Timestamp of the last point inside any crossing; the observed exit
    /// time. `None` when the trajectory never touches one.
    pub fn exit_timestamp_ms(&self) -> Option<i64> {
        self.points
            .iter()
            .rev()
            .find(|p| p.area.is_crossing())
            .map(|p| p.timestamp_ms)
    }

    pub fn mean_speed(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.points.iter().map(|p| p.speed).sum::<f64>() / self.points.len() as f64
    }
}

/// Rule 1: pedestrian-labeled frames make up at least half the trajectory.
pub fn rule1_pedestrian_majority(traj: &Trajectory) -> bool {
    traj.pedestrian_ratio() >= 0.5
}

/// Rule 2: some point lies inside a crossing polygon.
pub fn rule2_touches_crossing(traj: &Trajectory, areas: &AreaConfig) -> bool {
    traj.points.iter().any(|p| {
        areas
            .crossings
            .iter()
            .any(|poly| poly.contains((p.pos_x, p.pos_y)))
    })
}

/// Rule 3: strictly more than [`MIN_TRAJECTORY_POINTS`] points.
pub fn rule3_min_points(traj: &Trajectory) -> bool {
    traj.len() > MIN_TRAJECTORY_POINTS
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub input_records: usize,
    pub duplicate_records_dropped: usize,
    pub input_trajectories: usize,
    pub rejected_rule1: usize,
    pub rejected_rule2: usize,
    pub rejected_rule3: usize,
    pub kept_trajectories: usize,
}

#[derive(Debug, Clone)]
pub struct PreprocessOutcome {
    pub trajectories: Vec<Trajectory>,
    pub report: PreprocessReport,
}

/// Groups records by agent id, ordered by id. Input must already be sorted
/// by `(timestamp_ms, agent_id)`; duplicate `(agent_id, timestamp_ms)` pairs
/// keep the first occurrence. Returns the number of duplicates dropped.
///
/// `area` is a placeholder ([`Area::VehicleArea`]) until [`assign_areas`]
/// runs; `speed` and `spent_time` are final.
pub fn group_by_id(records: &[TrackRecord]) -> (Vec<Trajectory>, usize) {
    let mut by_agent: BTreeMap<u64, Vec<&TrackRecord>> = BTreeMap::new();
    let mut duplicates = 0usize;
    for rec in records {
        let entry = by_agent.entry(rec.agent_id).or_default();
        if entry.last().is_some_and(|p| p.timestamp_ms == rec.timestamp_ms) {
            duplicates += 1;
            continue;
        }
        entry.push(rec);
    }
    let trajectories = by_agent
        .into_iter()
        .map(|(agent_id, recs)| {
            let t0 = recs[0].timestamp_ms;
            let points = recs
                .iter()
                .map(|r| TrajectoryPoint {
                    timestamp_ms: r.timestamp_ms,
                    label: r.label,
                    confidence: r.confidence,
                    pos_x: r.pos_x,
                    pos_y: r.pos_y,
                    box_length: r.box_length,
                    box_width: r.box_width,
                    box_height: r.box_height,
                    yaw: r.yaw,
                    vel_x: r.vel_x,
                    vel_y: r.vel_y,
                    tracking_status: r.tracking_status,
                    speed: r.speed(),
                    spent_time: (r.timestamp_ms - t0) as f64 / 1000.0,
                    area: Area::VehicleArea,
                })
                .collect();
            Trajectory { agent_id, points }
        })
        .collect();
    (trajectories, duplicates)
}

/// Annotates every point with the area containing it. Fails if any point is
/// claimed by two crossing polygons.
pub fn assign_areas(
    mut traj: Trajectory,
    areas: &AreaConfig,
) -> Result<Trajectory, PreprocessError> {
    for p in &mut traj.points {
        p.area = areas.classify((p.pos_x, p.pos_y))?;
    }
    Ok(traj)
}

/// Full preprocessing: calibrate, group, annotate areas, then filter through
/// rules 1-3 in order. Rejection counts attribute each dropped trajectory to
/// the first rule it fails.
pub fn preprocess_pipeline(
    records: &[TrackRecord],
    areas: &AreaConfig,
    calibration: &CalibrationConfig,
) -> Result<PreprocessOutcome, PreprocessError> {
    areas.validate()?;
    let calibrated = apply_calibration(records, calibration)?;
    let (grouped, duplicate_records_dropped) = group_by_id(&calibrated);
    let input_trajectories = grouped.len();

    let annotated: Vec<Result<Trajectory, PreprocessError>> =
        exec::map_into(grouped, |t| assign_areas(t, areas));
    let mut trajectories = Vec::with_capacity(annotated.len());
    for t in annotated {
        trajectories.push(t?);
    }

    let mut report = PreprocessReport {
        input_records: records.len(),
        duplicate_records_dropped,
        input_trajectories,
        ..PreprocessReport::default()
    };
    let mut kept = Vec::new();
    for traj in trajectories {
        if !rule1_pedestrian_majority(&traj) {
            report.rejected_rule1 += 1;
        } else if !rule2_touches_crossing(&traj, areas) {
            report.rejected_rule2 += 1;
        } else if !rule3_min_points(&traj) {
            report.rejected_rule3 += 1;
        } else {
            kept.push(traj);
        }
    }
    report.kept_trajectories = kept.len();
    log::info!(
        "preprocess: {} records -> {} trajectories -> {} kept ({}/{}/{} rejected by rule 1/2/3)",
        report.input_records,
        report.input_trajectories,
        report.kept_trajectories,
        report.rejected_rule1,
        report.rejected_rule2,
        report.rejected_rule3,
    );
    Ok(PreprocessOutcome {
        trajectories: kept,
        report,
    })
}

/// Writes trajectories as JSON lines, one trajectory per line, in input
/// order.
pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<(), PreprocessError> {
    let io_err = |action, source| PreprocessError::Io {
        action,
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(|e| io_err("create", e))?;
    let mut w = io::BufWriter::new(file);
    for traj in trajectories {
        let line = serde_json::to_string(traj).expect("trajectory serializes");
        writeln!(w, "{line}").map_err(|e| io_err("write", e))?;
    }
    w.flush().map_err(|e| io_err("write", e))
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, PreprocessError> {
    let file = std::fs::File::open(path).map_err(|e| PreprocessError::Io {
        action: "open",
        path: path.to_path_buf(),
        source: e,
    })?;
    let reader = io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| PreprocessError::Io {
            action: "read",
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let traj = serde_json::from_str(&line)
            .map_err(|e| PreprocessError::BadTrajectoryRecord { line: i + 1, source: e })?;
        out.push(traj);
    }
    Ok(out)
}
