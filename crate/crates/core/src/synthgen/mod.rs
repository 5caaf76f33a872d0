//! Seeded synthetic intersection scenes: track records, SPaT logs, and
//! ground-truth labels with true crossing-exit times, in the exact formats
//! `ingest` consumes. Scenes include distractor vehicles, loitering
//! bystanders, and sub-10-point noise tracks so the preprocessing rules have
//! something to reject.
//!
//! Only three distribution anchors come from the problem domain: the 1.5 m/s
//! normal-walking threshold, the wheelchair reference speed 70.4 +/- 21.1
//! m/min (1.173 m/s mean), and the 1.1-1.5 m wheelchair box-height band.
//! Everything else is a synthetic-world constant chosen so each generated
//! class is recoverable by the labeling criteria.

use crate::ingest::{AgentLabel, SpatEvent, TrackRecord};
use crate::ingest::{normalize_angle, PhaseEventKind};
use crate::preprocess::{Area, AreaConfig, ConvexPolygon};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const GROUND_TRUTH_HEADER: &str = "agent_id,true_class,true_exit_time_ms,anomaly";

/// Scene timestamps start here (a Friday afternoon, ms since epoch).
pub const SCENE_EPOCH_MS: i64 = 1_633_719_600_000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("unknown anomaly kind {0:?}")]
    UnknownAnomaly(String),
    #[error("no eligible agent to replace with an anomaly")]
    UnknownAgent,
    #[error("failed to {action} {path}")]
    Io {
        action: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] crate::ingest::IngestError),
    #[error("bad ground truth row at line {line}: {reason}")]
    BadGroundTruthRow { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrueClass {
    Normal,
    Wheelchair,
    Vehicle,
    Bystander,
    Noise,
}

impl TrueClass {
    pub fn is_crosser(self) -> bool {
        matches!(self, TrueClass::Normal | TrueClass::Wheelchair)
    }
}

impl fmt::Display for TrueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TrueClass::Normal => "normal",
            TrueClass::Wheelchair => "wheelchair",
            TrueClass::Vehicle => "vehicle",
            TrueClass::Bystander => "bystander",
            TrueClass::Noise => "noise",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TrueClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(TrueClass::Normal),
            "wheelchair" => Ok(TrueClass::Wheelchair),
            "vehicle" => Ok(TrueClass::Vehicle),
            "bystander" => Ok(TrueClass::Bystander),
            "noise" => Ok(TrueClass::Noise),
            _ => Err(format!("unknown true class {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    WaitsForGreenMidCrossing,
    ViolationCrosser,
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AnomalyKind::WaitsForGreenMidCrossing => "waits_for_green_mid_crossing",
            AnomalyKind::ViolationCrosser => "violation_crosser",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for AnomalyKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "waits_for_green_mid_crossing" => Ok(AnomalyKind::WaitsForGreenMidCrossing),
            "violation_crosser" => Ok(AnomalyKind::ViolationCrosser),
            _ => Err(SynthError::UnknownAnomaly(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub agent_id: u64,
    pub true_class: TrueClass,
    /// Timestamp of the agent's last noise-free position inside a crossing;
    /// empty for agents that never cross.
    pub true_exit_time_ms: Option<i64>,
    pub anomaly: Option<AnomalyKind>,
}

/// Per-class population parameters. Speeds in m/s, dims in meters, yaw noise
/// in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub speed_mean: f64,
    pub speed_std: f64,
    pub speed_clip: (f64, f64),
    pub height_mean: f64,
    pub height_std: f64,
    pub height_clip: (f64, f64),
    pub footprint_length: f64,
    pub footprint_width: f64,
    /// Per-agent uniform jitter applied to both footprint dims.
    pub footprint_jitter: f64,
    /// Per-agent yaw-noise std drawn uniformly from this range.
    pub yaw_noise_range: (f64, f64),
    /// Chance the agent follows the accelerate-before-phase-change template.
    pub accel_probability: f64,
    /// Speed multiplier applied from 3 s before the green end.
    pub accel_factor: f64,
    /// Speed multiplier for the second half of the path (1.0 = constant
    /// speed). Lets a scene make class membership the only predictor of
    /// future speed.
    pub late_speed_factor: f64,
}

/// Fixed-cycle signal plan: per phase, a half-open green window inside
/// every cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub cycle_ms: i64,
    pub horizon_ms: i64,
    /// phase id -> (green start offset, green end offset) within a cycle.
    pub greens: BTreeMap<u32, (i64, i64)>,
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.cycle_ms <= 0 || self.horizon_ms < self.cycle_ms {
            return Err(SynthError::InvalidConfig(format!(
                "cycle {} ms / horizon {} ms",
                self.cycle_ms, self.horizon_ms
            )));
        }
        for (&phase, &(start, end)) in &self.greens {
            if !(0 <= start && start < end && end <= self.cycle_ms) {
                return Err(SynthError::InvalidConfig(format!(
                    "phase {phase} green [{start}, {end}) outside cycle"
                )));
            }
        }
        Ok(())
    }

    pub fn cycles(&self) -> i64 {
        self.horizon_ms / self.cycle_ms
    }

    /// All begin/end events over the horizon, offset by `base_ms`.
    pub fn events(&self, base_ms: i64) -> Vec<SpatEvent> {
        let mut events = Vec::new();
        for c in 0..self.cycles() {
            let cycle_base = base_ms + c * self.cycle_ms;
            for (&phase_id, &(start, end)) in &self.greens {
                events.push(SpatEvent {
                    timestamp_ms: cycle_base + start,
                    phase_id,
                    event: PhaseEventKind::Begin,
                });
                events.push(SpatEvent {
                    timestamp_ms: cycle_base + end,
                    phase_id,
                    event: PhaseEventKind::End,
                });
            }
        }
        events.sort_by_key(|e| (e.timestamp_ms, e.phase_id, matches!(e.event, PhaseEventKind::End) as u8));
        events
    }

    /// Absolute (green start, green end) of phase in cycle `c`.
    fn green_abs(&self, base_ms: i64, phase_id: u32, cycle: i64) -> Option<(i64, i64)> {
        self.greens.get(&phase_id).map(|&(s, e)| {
            let b = base_ms + cycle * self.cycle_ms;
            (b + s, b + e)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub areas: AreaConfig,
    pub phase_map: BTreeMap<Area, u32>,
    pub schedule: PhaseSchedule,
    pub n_normal: usize,
    pub n_wheelchair: usize,
    pub n_vehicles: usize,
    pub n_bystanders: usize,
    pub n_noise_tracks: usize,
    pub normal: ClassSpec,
    pub wheelchair: ClassSpec,
    pub frame_interval_ms: i64,
    /// Additive Gaussian noise stds on measured positions, box dims, and
    /// velocity components.
    pub pos_noise: f64,
    pub box_noise: f64,
    pub vel_noise: f64,
    /// Per-frame chance a pedestrian frame is mislabeled cyclist.
    pub label_flip_prob: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    /// Four rectangular crosswalks around a two-road intersection; phase 2
    /// governs the north/south pair, phase 6 the east/west pair.
    fn base(seed: u64) -> Self {
        let areas = AreaConfig {
            crossings: [
                ConvexPolygon::axis_aligned_rect(-8.0, 10.0, 8.0, 14.0), // north
                ConvexPolygon::axis_aligned_rect(-8.0, -14.0, 8.0, -10.0), // south
                ConvexPolygon::axis_aligned_rect(10.0, -8.0, 14.0, 8.0), // east
                ConvexPolygon::axis_aligned_rect(-14.0, -8.0, -10.0, 8.0), // west
            ],
        };
        let mut phase_map = BTreeMap::new();
        phase_map.insert(Area::Crossing1, 2);
        phase_map.insert(Area::Crossing2, 2);
        phase_map.insert(Area::Crossing3, 6);
        phase_map.insert(Area::Crossing4, 6);
        let mut greens = BTreeMap::new();
        greens.insert(2, (0, 15_000));
        greens.insert(6, (20_000, 35_000));
        ScenarioConfig {
            areas,
            phase_map,
            schedule: PhaseSchedule {
                cycle_ms: 40_000,
                horizon_ms: 600_000,
                greens,
            },
            n_normal: 0,
            n_wheelchair: 0,
            n_vehicles: 0,
            n_bystanders: 0,
            n_noise_tracks: 0,
            normal: ClassSpec {
                speed_mean: 1.4,
                speed_std: 0.2,
                speed_clip: (0.9, 2.2),
                height_mean: 1.68,
                height_std: 0.05,
                height_clip: (1.56, 1.85),
                footprint_length: 0.55,
                footprint_width: 0.28,
                footprint_jitter: 0.04,
                yaw_noise_range: (0.7, 1.0),
                accel_probability: 0.5,
                accel_factor: 1.5,
                late_speed_factor: 1.0,
            },
            wheelchair: ClassSpec {
                // 70.4 m/min mean, 21.1 m/min std, in m/s.
                speed_mean: 70.4 / 60.0,
                speed_std: 21.1 / 60.0,
                speed_clip: (0.4, 1.42),
                height_mean: 1.25,
                height_std: 0.05,
                height_clip: (1.12, 1.42),
                footprint_length: 1.05,
                footprint_width: 1.1,
                footprint_jitter: 0.04,
                yaw_noise_range: (0.05, 0.1),
                accel_probability: 0.0,
                accel_factor: 1.0,
                late_speed_factor: 1.0,
            },
            frame_interval_ms: 100,
            pos_noise: 0.05,
            box_noise: 0.02,
            vel_noise: 0.05,
            label_flip_prob: 0.05,
            seed,
        }
    }

    /// Default mixed scene: ~100 agents, both classes recoverable by the
    /// labeling criteria, with distractors for the filter rules.
    pub fn default_scene(seed: u64) -> Self {
        ScenarioConfig {
            n_normal: 48,
            n_wheelchair: 32,
            n_vehicles: 8,
            n_bystanders: 6,
            n_noise_tracks: 6,
            ..Self::base(seed)
        }
    }

    /// Two populations indistinguishable at window time (same boxes, same
    /// start-speed distribution, same yaw noise), differing only in
    /// second-half speed. The sub-class flag is then the only signal for
    /// future speed, which is what the ablation needs to detect.
    pub fn ablation_scene(seed: u64) -> Self {
        let shared = ClassSpec {
            speed_mean: 1.2,
            speed_std: 0.1,
            speed_clip: (1.0, 1.4),
            height_mean: 1.7,
            height_std: 0.03,
            height_clip: (1.6, 1.8),
            footprint_length: 0.55,
            footprint_width: 0.3,
            footprint_jitter: 0.02,
            yaw_noise_range: (0.08, 0.12),
            accel_probability: 0.0,
            accel_factor: 1.0,
            late_speed_factor: 1.5,
        };
        ScenarioConfig {
            n_normal: 40,
            n_wheelchair: 40,
            normal: shared.clone(),
            wheelchair: ClassSpec {
                late_speed_factor: 0.6,
                ..shared
            },
            label_flip_prob: 0.0,
            ..Self::base(seed)
        }
    }

    /// Noise-free constant-speed crossers for analytic arrival-time checks.
    pub fn zero_noise_scene(seed: u64) -> Self {
        let mut cfg = Self::base(seed);
        cfg.n_normal = 30;
        cfg.n_wheelchair = 20;
        cfg.pos_noise = 0.0;
        cfg.box_noise = 0.0;
        cfg.vel_noise = 0.0;
        cfg.label_flip_prob = 0.0;
        cfg.normal.yaw_noise_range = (0.0, 0.0);
        cfg.normal.accel_probability = 0.0;
        cfg.normal.speed_clip = (1.0, 2.0);
        cfg.wheelchair.yaw_noise_range = (0.0, 0.0);
        cfg.wheelchair.speed_std = 0.2;
        cfg.wheelchair.speed_clip = (0.7, 1.4);
        cfg
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.areas
            .validate()
            .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        self.schedule.validate()?;
        if self.frame_interval_ms <= 0 {
            return Err(SynthError::InvalidConfig(
                "frame interval must be positive".into(),
            ));
        }
        if self.normal.speed_mean < self.wheelchair.speed_mean {
            return Err(SynthError::InvalidConfig(
                "normal speed mean must not be below wheelchair speed mean".into(),
            ));
        }
        for area in Area::CROSSINGS {
            let phase = self
                .phase_map
                .get(&area)
                .ok_or_else(|| SynthError::InvalidConfig(format!("no phase for {area}")))?;
            if !self.schedule.greens.contains_key(phase) {
                return Err(SynthError::InvalidConfig(format!(
                    "phase {phase} for {area} missing from schedule"
                )));
            }
        }
        if [self.pos_noise, self.box_noise, self.vel_noise]
            .iter()
            .any(|n| *n < 0.0 || !n.is_finite())
        {
            return Err(SynthError::InvalidConfig("negative noise level".into()));
        }
        Ok(())
    }
}

/// A generated scene plus the config that produced it (kept so anomalies can
/// be injected by re-simulating one agent).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub config: ScenarioConfig,
    pub records: Vec<TrackRecord>,
    pub spat: Vec<SpatEvent>,
    pub truth: Vec<GroundTruthEntry>,
}

/// Straight-line crossing path: 1 m outside one end of the crosswalk to
/// 1 m outside the other.
struct CrossingPath {
    start: (f64, f64),
    dir: (f64, f64),
    len: f64,
    heading: f64,
}

const PATH_MARGIN: f64 = 1.0;

fn crossing_path(poly: &ConvexPolygon, reverse: bool, lateral: f64) -> CrossingPath {
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in poly.vertices() {
        min_x = min_x.min(x);
        min_y = min_y.min(y);
        max_x = max_x.max(x);
        max_y = max_y.max(y);
    }
    let (cx, cy) = poly.centroid();
    // Walk along the longer bbox side, offset laterally across the shorter.
    let along_x = (max_x - min_x) >= (max_y - min_y);
    let (start, end) = if along_x {
        let y = cy + lateral * (max_y - min_y) * 0.25;
        ((min_x - PATH_MARGIN, y), (max_x + PATH_MARGIN, y))
    } else {
        let x = cx + lateral * (max_x - min_x) * 0.25;
        ((x, min_y - PATH_MARGIN), (x, max_y + PATH_MARGIN))
    };
    let (start, end) = if reverse { (end, start) } else { (start, end) };
    let dx = end.0 - start.0;
    let dy = end.1 - start.1;
    let len = dx.hypot(dy);
    CrossingPath {
        start,
        dir: (dx / len, dy / len),
        len,
        heading: dy.atan2(dx),
    }
}

struct PedPlan {
    agent_id: u64,
    class: TrueClass,
    area_index: usize,
    start_ms: i64,
    base_speed: f64,
    /// Absolute time the accelerate template kicks in, if any.
    accel_at_ms: Option<i64>,
    late_speed_factor: f64,
    height: f64,
    length: f64,
    width: f64,
    yaw_noise: f64,
    reverse: bool,
    lateral: f64,
    anomaly: Option<AnomalyKind>,
}

fn pedestrian_rng(seed: u64, agent_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(agent_id);
    rng
}

fn sample_clipped(rng: &mut ChaCha8Rng, mean: f64, std: f64, clip: (f64, f64)) -> f64 {
    if std == 0.0 {
        return mean.clamp(clip.0, clip.1);
    }
    let dist = Normal::new(mean, std).expect("finite std");
    dist.sample(rng).clamp(clip.0, clip.1)
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        Normal::new(0.0, std).expect("finite std").sample(rng)
    }
}

/// Lays out one pedestrian's plan: class sample draws, crossing assignment,
/// and a start time placed inside (or, for anomalies, around) a green window
/// of the governing phase.
fn plan_pedestrian(
    config: &ScenarioConfig,
    agent_id: u64,
    class: TrueClass,
    anomaly: Option<AnomalyKind>,
) -> Result<PedPlan, SynthError> {
    let spec = match class {
        TrueClass::Normal => &config.normal,
        TrueClass::Wheelchair => &config.wheelchair,
        _ => unreachable!("only pedestrian classes are planned"),
    };
    let mut rng = pedestrian_rng(config.seed, agent_id);
    let base_speed = sample_clipped(&mut rng, spec.speed_mean, spec.speed_std, spec.speed_clip);
    let height = sample_clipped(&mut rng, spec.height_mean, spec.height_std, spec.height_clip);
    let jitter = rng.random_range(-spec.footprint_jitter..=spec.footprint_jitter);
    let length = (spec.footprint_length + jitter).max(0.05);
    let width = (spec.footprint_width + jitter).max(0.05);
    let yaw_noise = rng.random_range(spec.yaw_noise_range.0..=spec.yaw_noise_range.1);
    let area_index = (agent_id as usize) % 4;
    let reverse = agent_id % 2 == 0;
    let lateral = rng.random_range(-1.0..1.0);

    let area = Area::CROSSINGS[area_index];
    let phase_id = config.phase_map[&area];
    let path = crossing_path(&config.areas.crossings[area_index], reverse, lateral);
    let worst_duration_ms = (path.len / spec.speed_clip.0 * 1000.0) as i64 + 60_000;
    let usable_cycles = ((config.schedule.horizon_ms - worst_duration_ms)
        / config.schedule.cycle_ms)
        .max(1);
    let cycle = rng.random_range(0..usable_cycles);
    let (green_start, green_end) = config
        .schedule
        .green_abs(SCENE_EPOCH_MS, phase_id, cycle)
        .expect("validated phase");

    let wants_accel =
        anomaly.is_none() && rng.random_bool(spec.accel_probability.clamp(0.0, 1.0));
    let crossing_duration_ms = (path.len / base_speed * 1000.0) as i64;
    let (start_ms, accel_at_ms) = if let Some(kind) = anomaly {
        match kind {
            // Enter on red so the wait template has a red phase to wait out.
            AnomalyKind::WaitsForGreenMidCrossing => {
                let reach_ms = (0.35 * path.len / base_speed * 1000.0) as i64;
                let lead_ms = reach_ms + rng.random_range(2_000..6_000);
                (green_start - lead_ms, None)
            }
            AnomalyKind::ViolationCrosser => {
                (green_end + rng.random_range(1_000..3_000), None)
            }
        }
    } else if wants_accel {
        // Place the green end mid-crossing so the speed-up window exists.
        let frac = rng.random_range(0.45..0.60);
        let start = green_end - (frac * crossing_duration_ms as f64) as i64;
        (start.max(green_start), Some(green_end - 3_000))
    } else {
        (green_start + rng.random_range(0..5_000), None)
    };

    Ok(PedPlan {
        agent_id,
        class,
        area_index,
        start_ms,
        base_speed,
        accel_at_ms,
        late_speed_factor: spec.late_speed_factor,
        height,
        length,
        width,
        yaw_noise,
        reverse,
        lateral,
        anomaly,
    })
}

/// Walks the plan frame by frame. Returns the noisy records plus the true
/// (noise-free) exit time.
fn simulate_pedestrian(
    config: &ScenarioConfig,
    plan: &PedPlan,
) -> (Vec<TrackRecord>, Option<i64>) {
    let path = crossing_path(
        &config.areas.crossings[plan.area_index],
        plan.reverse,
        plan.lateral,
    );
    let area = Area::CROSSINGS[plan.area_index];
    let phase_id = config.phase_map[&area];
    let poly = &config.areas.crossings[plan.area_index];
    // Noise stream separate from the planning draws but still per-agent.
    let mut rng = pedestrian_rng(config.seed ^ 0x9e37_79b9_7f4a_7c15, plan.agent_id);

    let dt = config.frame_interval_ms as f64 / 1000.0;
    let mut records = Vec::new();
    let mut exit_ms = None;
    let mut progress = 0.0;
    let mut t_ms = plan.start_ms;
    let wait_at = plan
        .anomaly
        .filter(|k| *k == AnomalyKind::WaitsForGreenMidCrossing)
        .map(|_| 0.35 * path.len);
    let mut frames = 0;
    while progress < path.len && frames < 3_000 {
        let mut speed = plan.base_speed;
        if progress >= 0.5 * path.len {
            speed *= plan.late_speed_factor;
        }
        if plan.accel_at_ms.is_some_and(|at| t_ms >= at) {
            speed *= config_accel_factor(config, plan.class);
        }
        if let Some(wait_progress) = wait_at {
            if progress >= wait_progress && !green_at(config, phase_id, t_ms) {
                speed = 0.0;
            }
        }

        let x = path.start.0 + path.dir.0 * progress;
        let y = path.start.1 + path.dir.1 * progress;
        if poly.contains((x, y)) {
            exit_ms = Some(t_ms);
        }

        let label = if config.label_flip_prob > 0.0
            && rng.random_bool(config.label_flip_prob)
        {
            AgentLabel::Cyclist
        } else {
            AgentLabel::Pedestrian
        };
        let yaw = normalize_angle(path.heading + gaussian(&mut rng, plan.yaw_noise));
        records.push(TrackRecord {
            timestamp_ms: t_ms,
            agent_id: plan.agent_id,
            label,
            confidence: rng.random_range(0.85..0.99),
            pos_x: x + gaussian(&mut rng, config.pos_noise),
            pos_y: y + gaussian(&mut rng, config.pos_noise),
            box_length: (plan.length + gaussian(&mut rng, config.box_noise)).max(0.05),
            box_width: (plan.width + gaussian(&mut rng, config.box_noise)).max(0.05),
            box_height: (plan.height + gaussian(&mut rng, config.box_noise)).max(0.05),
            yaw,
            vel_x: path.dir.0 * speed + gaussian(&mut rng, config.vel_noise),
            vel_y: path.dir.1 * speed + gaussian(&mut rng, config.vel_noise),
            tracking_status: 1,
        });

        progress += speed * dt;
        t_ms += config.frame_interval_ms;
        frames += 1;
    }
    (records, exit_ms)
}

fn config_accel_factor(config: &ScenarioConfig, class: TrueClass) -> f64 {
    match class {
        TrueClass::Normal => config.normal.accel_factor,
        TrueClass::Wheelchair => config.wheelchair.accel_factor,
        _ => 1.0,
    }
}

fn green_at(config: &ScenarioConfig, phase_id: u32, t_ms: i64) -> bool {
    let rel = t_ms - SCENE_EPOCH_MS;
    if rel < 0 {
        return false;
    }
    let offset = rel % config.schedule.cycle_ms;
    config
        .schedule
        .greens
        .get(&phase_id)
        .is_some_and(|&(s, e)| offset >= s && offset < e)
}

fn simulate_vehicle(config: &ScenarioConfig, agent_id: u64) -> Vec<TrackRecord> {
    let mut rng = pedestrian_rng(config.seed, agent_id);
    let speed = rng.random_range(6.0..12.0);
    let horizontal = agent_id % 2 == 0;
    let offset = rng.random_range(-4.0..4.0);
    let flip = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let (start, dir): ((f64, f64), (f64, f64)) = if horizontal {
        ((-40.0 * flip, offset), (flip, 0.0))
    } else {
        ((offset, -40.0 * flip), (0.0, flip))
    };
    let length = rng.random_range(4.2..5.2);
    let width = rng.random_range(1.7..2.0);
    let height = rng.random_range(1.4..1.7);
    let heading = dir.1.atan2(dir.0);
    let start_ms = SCENE_EPOCH_MS
        + rng.random_range(0..(config.schedule.horizon_ms - 30_000).max(1));
    let dt = config.frame_interval_ms as f64 / 1000.0;
    let mut records = Vec::new();
    let mut progress = 0.0;
    let mut t_ms = start_ms;
    while progress < 80.0 {
        let x = start.0 + dir.0 * progress;
        let y = start.1 + dir.1 * progress;
        records.push(TrackRecord {
            timestamp_ms: t_ms,
            agent_id,
            label: AgentLabel::Vehicle,
            confidence: rng.random_range(0.9..0.99),
            pos_x: x + gaussian(&mut rng, config.pos_noise),
            pos_y: y + gaussian(&mut rng, config.pos_noise),
            box_length: (length + gaussian(&mut rng, config.box_noise)).max(0.1),
            box_width: (width + gaussian(&mut rng, config.box_noise)).max(0.1),
            box_height: (height + gaussian(&mut rng, config.box_noise)).max(0.1),
            yaw: normalize_angle(heading + gaussian(&mut rng, 0.02)),
            vel_x: dir.0 * speed + gaussian(&mut rng, config.vel_noise),
            vel_y: dir.1 * speed + gaussian(&mut rng, config.vel_noise),
            tracking_status: 1,
        });
        progress += speed * dt;
        t_ms += config.frame_interval_ms;
    }
    records
}

/// Pedestrian-labeled loiterer in a corner plaza, far from every crossing;
/// exists to exercise rule 2.
fn simulate_bystander(config: &ScenarioConfig, agent_id: u64) -> Vec<TrackRecord> {
    let mut rng = pedestrian_rng(config.seed, agent_id);
    let corner_x = if rng.random_bool(0.5) { 22.0 } else { -22.0 };
    let corner_y = if rng.random_bool(0.5) { 22.0 } else { -22.0 };
    let mut x = corner_x + rng.random_range(-2.0..2.0);
    let mut y = corner_y + rng.random_range(-2.0..2.0);
    let n = rng.random_range(15..40);
    let start_ms = SCENE_EPOCH_MS
        + rng.random_range(0..(config.schedule.horizon_ms - 10_000).max(1));
    let dt = config.frame_interval_ms as f64 / 1000.0;
    let mut records = Vec::new();
    for i in 0..n {
        let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let speed = rng.random_range(0.0..0.3);
        let (vx, vy) = (angle.cos() * speed, angle.sin() * speed);
        records.push(TrackRecord {
            timestamp_ms: start_ms + i * config.frame_interval_ms,
            agent_id,
            label: AgentLabel::Pedestrian,
            confidence: rng.random_range(0.85..0.99),
            pos_x: x,
            pos_y: y,
            box_length: 0.55,
            box_width: 0.3,
            box_height: 1.7,
            yaw: normalize_angle(angle),
            vel_x: vx,
            vel_y: vy,
            tracking_status: 1,
        });
        x += vx * dt;
        y += vy * dt;
    }
    records
}

/// Short pedestrian-labeled blip inside a crossing: passes rules 1 and 2,
/// fails rule 3.
fn simulate_noise_track(config: &ScenarioConfig, agent_id: u64) -> Vec<TrackRecord> {
    let mut rng = pedestrian_rng(config.seed, agent_id);
    let poly = &config.areas.crossings[(agent_id as usize) % 4];
    let (cx, cy) = poly.centroid();
    let n = rng.random_range(3..=8);
    let start_ms = SCENE_EPOCH_MS
        + rng.random_range(0..(config.schedule.horizon_ms - 5_000).max(1));
    (0..n)
        .map(|i| TrackRecord {
            timestamp_ms: start_ms + i * config.frame_interval_ms,
            agent_id,
            label: AgentLabel::Pedestrian,
            confidence: rng.random_range(0.3..0.7),
            pos_x: cx + rng.random_range(-0.5..0.5),
            pos_y: cy + rng.random_range(-0.5..0.5),
            box_length: rng.random_range(0.3..0.8),
            box_width: rng.random_range(0.2..0.6),
            box_height: rng.random_range(0.8..1.9),
            yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            vel_x: rng.random_range(-0.5..0.5),
            vel_y: rng.random_range(-0.5..0.5),
            tracking_status: 0,
        })
        .collect()
}

pub fn generate_scene(config: &ScenarioConfig) -> Result<Scene, SynthError> {
    config.validate()?;
    let mut records = Vec::new();
    let mut truth = Vec::new();
    let mut next_id = 1u64;

    let mut pedestrians = Vec::new();
    for _ in 0..config.n_normal {
        pedestrians.push((next_id, TrueClass::Normal));
        next_id += 1;
    }
    for _ in 0..config.n_wheelchair {
        pedestrians.push((next_id, TrueClass::Wheelchair));
        next_id += 1;
    }
    for (agent_id, class) in pedestrians {
        let plan = plan_pedestrian(config, agent_id, class, None)?;
        let (recs, exit_ms) = simulate_pedestrian(config, &plan);
        records.extend(recs);
        truth.push(GroundTruthEntry {
            agent_id,
            true_class: class,
            true_exit_time_ms: exit_ms,
            anomaly: None,
        });
    }
    for _ in 0..config.n_vehicles {
        records.extend(simulate_vehicle(config, next_id));
        truth.push(GroundTruthEntry {
            agent_id: next_id,
            true_class: TrueClass::Vehicle,
            true_exit_time_ms: None,
            anomaly: None,
        });
        next_id += 1;
    }
    for _ in 0..config.n_bystanders {
        records.extend(simulate_bystander(config, next_id));
        truth.push(GroundTruthEntry {
            agent_id: next_id,
            true_class: TrueClass::Bystander,
            true_exit_time_ms: None,
            anomaly: None,
        });
        next_id += 1;
    }
    for _ in 0..config.n_noise_tracks {
        records.extend(simulate_noise_track(config, next_id));
        truth.push(GroundTruthEntry {
            agent_id: next_id,
            true_class: TrueClass::Noise,
            true_exit_time_ms: None,
            anomaly: None,
        });
        next_id += 1;
    }

    records.sort_by(|a, b| (a.timestamp_ms, a.agent_id).cmp(&(b.timestamp_ms, b.agent_id)));
    let spat = config.schedule.events(SCENE_EPOCH_MS);
    Ok(Scene {
        config: config.clone(),
        records,
        spat,
        truth,
    })
}

/// Replaces the first anomaly-free normal pedestrian's motion with the
/// anomaly template; ground truth is updated to mark it.
pub fn inject_anomaly(scene: &Scene, kind: AnomalyKind) -> Result<Scene, SynthError> {
    let target = scene
        .truth
        .iter()
        .find(|e| e.true_class == TrueClass::Normal && e.anomaly.is_none())
        .map(|e| e.agent_id)
        .ok_or(SynthError::UnknownAgent)?;

    let plan = plan_pedestrian(&scene.config, target, TrueClass::Normal, Some(kind))?;
    let (recs, exit_ms) = simulate_pedestrian(&scene.config, &plan);

    let mut records: Vec<TrackRecord> = scene
        .records
        .iter()
        .filter(|r| r.agent_id != target)
        .cloned()
        .collect();
    records.extend(recs);
    records.sort_by(|a, b| (a.timestamp_ms, a.agent_id).cmp(&(b.timestamp_ms, b.agent_id)));

    let truth = scene
        .truth
        .iter()
        .map(|e| {
            if e.agent_id == target {
                GroundTruthEntry {
                    agent_id: target,
                    true_class: TrueClass::Normal,
                    true_exit_time_ms: exit_ms,
                    anomaly: Some(kind),
                }
            } else {
                e.clone()
            }
        })
        .collect();

    Ok(Scene {
        config: scene.config.clone(),
        records,
        spat: scene.spat.clone(),
        truth,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenePaths {
    pub tracks: PathBuf,
    pub spat: PathBuf,
    pub ground_truth: PathBuf,
}

impl Scene {
    /// Writes tracks.csv, spat.csv, and ground_truth.csv into `dir`.
    pub fn write(&self, dir: &Path) -> Result<ScenePaths, SynthError> {
        std::fs::create_dir_all(dir).map_err(|source| SynthError::Io {
            action: "create",
            path: dir.to_path_buf(),
            source,
        })?;
        let paths = ScenePaths {
            tracks: dir.join("tracks.csv"),
            spat: dir.join("spat.csv"),
            ground_truth: dir.join("ground_truth.csv"),
        };
        crate::ingest::write_track_file(&paths.tracks, &self.records)?;
        crate::ingest::write_spat_file(&paths.spat, &self.spat)?;
        write_ground_truth(&paths.ground_truth, &self.truth)?;
        Ok(paths)
    }
}

pub fn write_ground_truth(path: &Path, entries: &[GroundTruthEntry]) -> Result<(), SynthError> {
    let io_err = |action, source| SynthError::Io {
        action,
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(|e| io_err("create", e))?;
    let mut w = std::io::BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(w, "{GROUND_TRUTH_HEADER}")?;
        for e in entries {
            let exit = e
                .true_exit_time_ms
                .map(|t| t.to_string())
                .unwrap_or_default();
            let anomaly = e.anomaly.map(|a| a.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{}", e.agent_id, e.true_class, exit, anomaly)?;
        }
        w.flush()
    })();
    res.map_err(|e| io_err("write", e))
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthEntry>, SynthError> {
    let file = std::fs::File::open(path).map_err(|source| SynthError::Io {
        action: "open",
        path: path.to_path_buf(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut entries = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| SynthError::Io {
            action: "read",
            path: path.to_path_buf(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (idx == 0 && trimmed == GROUND_TRUTH_HEADER) {
            continue;
        }
        let bad = |reason: String| SynthError::BadGroundTruthRow {
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let agent_id = fields[0]
            .parse()
            .map_err(|_| bad(format!("bad agent_id {:?}", fields[0])))?;
        let true_class = fields[1].parse().map_err(bad)?;
        let true_exit_time_ms = if fields[2].is_empty() {
            None
        } else {
            Some(
                fields[2]
                    .parse()
                    .map_err(|_| bad(format!("bad exit time {:?}", fields[2])))?,
            )
        };
        let anomaly = if fields[3].is_empty() {
            None
        } else {
            Some(fields[3].parse().map_err(|e: SynthError| bad(e.to_string()))?)
        };
        entries.push(GroundTruthEntry {
            agent_id,
            true_class,
            true_exit_time_ms,
            anomaly,
        });
    }
    Ok(entries)
}
