//! Parsing of track-record files and SPaT logs into validated in-memory
//! structures, plus coordinate calibration.
//!
//! Track files are comma-separated with 13 columns:
//! `timestamp_ms,id,label,confidence,pos_x,pos_y,box_length,box_width,box_height,yaw,vel_x,vel_y,tracking_status`.
//! SPaT files carry `timestamp_ms,phase_id,event` with `event` in
//! `{begin,end}`. A header row is optional and auto-detected in both.
//!
//! Malformed rows (bad numbers, out-of-range values) are counted and
//! reported, never silently dropped; a wrong column count is a hard
//! [`IngestError::SchemaMismatch`] because it means the file is not in the
//! declared format at all.

mod calibration;
mod timeline;

pub use calibration::{apply_calibration, CalibrationConfig};
pub use timeline::{build_phase_timeline, GreenInterval, PhaseState, PhaseTimeline};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const TRACK_COLUMNS: usize = 13;
pub const TRACK_HEADER: &str = "timestamp_ms,id,label,confidence,pos_x,pos_y,box_length,box_width,box_height,yaw,vel_x,vel_y,tracking_status";
pub const SPAT_HEADER: &str = "timestamp_ms,phase_id,event";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema mismatch at line {line}: expected {expected} columns, found {found}")]
    SchemaMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("unpaired phase event: phase {phase_id} at {timestamp_ms} ms")]
    UnpairedPhaseEvent { phase_id: u32, timestamp_ms: i64 },
    #[error("singular calibration matrix (|det| = {det:e})")]
    SingularCalibration { det: f64 },
    #[error("area {0} has no phase mapping")]
    UnknownArea(crate::preprocess::Area),
    #[error("query time {t_ms} ms outside timeline span [{start_ms}, {end_ms}] ms")]
    TimelineGap {
        t_ms: i64,
        start_ms: i64,
        end_ms: i64,
    },
}

/// Detected object class as emitted by the upstream 3D detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentLabel {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentLabel {
    pub fn code(self) -> u8 {
        match self {
            AgentLabel::Vehicle => 1,
            AgentLabel::Pedestrian => 2,
            AgentLabel::Cyclist => 3,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            1 => Some(AgentLabel::Vehicle),
            2 => Some(AgentLabel::Pedestrian),
            3 => Some(AgentLabel::Cyclist),
            _ => None,
        }
    }
}

impl fmt::Display for AgentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AgentLabel::Vehicle => "vehicle",
            AgentLabel::Pedestrian => "pedestrian",
            AgentLabel::Cyclist => "cyclist",
        };
        f.write_str(s)
    }
}

/// One detected agent in one LiDAR frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub timestamp_ms: i64,
    pub agent_id: u64,
    pub label: AgentLabel,
    pub confidence: f64,
    pub pos_x: f64,
    pub pos_y: f64,
    pub box_length: f64,
    pub box_width: f64,
    pub box_height: f64,
    /// Heading of the bounding box, normalized to [-pi, pi].
    pub yaw: f64,
    pub vel_x: f64,
    pub vel_y: f64,
    /// Carried opaquely; the upstream detector does not document it.
    pub tracking_status: i64,
}

impl TrackRecord {
    pub fn speed(&self) -> f64 {
        self.vel_x.hypot(self.vel_y)
    }
}

/// Wrap an angle into [-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r > std::f64::consts::PI {
        r -= two_pi;
    } else if r < -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

/// A row that could not be converted into a [`TrackRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalformedRow {
    /// 1-based line number in the source file.
    pub line: usize,
    pub reason: String,
}

/// What happened while parsing a track file, beyond the records themselves.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrackParseReport {
    pub data_rows: usize,
    pub malformed: Vec<MalformedRow>,
    /// True when input timestamps were not nondecreasing and a stable
    /// sort by (timestamp, agent id) was applied.
    pub sort_applied: bool,
    pub header_detected: bool,
}

#[derive(Debug, Clone)]
pub struct TrackParseOutcome {
    pub records: Vec<TrackRecord>,
    pub report: TrackParseReport,
}

fn open_reader(path: &Path) -> Result<BufReader<File>, IngestError> {
    if !path.exists() {
        return Err(IngestError::MissingFile(path.to_path_buf()));
    }
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Parse a 13-column track file. Records come back sorted by
/// (timestamp, agent id); malformed rows are reported, not dropped silently.
pub fn parse_track_file(path: &Path) -> Result<TrackParseOutcome, IngestError> {
    let reader = open_reader(path)?;
    let mut records = Vec::new();
    let mut report = TrackParseReport::default();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if idx == 0 && looks_like_header(&fields) {
            report.header_detected = true;
            continue;
        }
        if fields.len() != TRACK_COLUMNS {
            return Err(IngestError::SchemaMismatch {
                line: line_no,
                expected: TRACK_COLUMNS,
                found: fields.len(),
            });
        }
        report.data_rows += 1;
        match parse_track_row(&fields) {
            Ok(rec) => records.push(rec),
            Err(reason) => report.malformed.push(MalformedRow {
                line: line_no,
                reason,
            }),
        }
    }

    let monotone = records
        .windows(2)
        .all(|w| w[0].timestamp_ms <= w[1].timestamp_ms);
    if !monotone {
        log::warn!(
            "{}: timestamps not nondecreasing, applying stable sort",
            path.display()
        );
        report.sort_applied = true;
    }
    // Canonical order regardless of input permutation.
    records.sort_by(|a, b| {
        (a.timestamp_ms, a.agent_id).cmp(&(b.timestamp_ms, b.agent_id))
    });

    Ok(TrackParseOutcome { records, report })
}

fn looks_like_header(fields: &[&str]) -> bool {
    fields
        .first()
        .map(|f| f.trim().parse::<i64>().is_err())
        .unwrap_or(false)
}

fn parse_track_row(fields: &[&str]) -> Result<TrackRecord, String> {
    fn num<T: std::str::FromStr>(s: &str, name: &str) -> Result<T, String> {
        s.trim()
            .parse::<T>()
            .map_err(|_| format!("bad {name}: {s:?}"))
    }

    let timestamp_ms: i64 = num(fields[0], "timestamp_ms")?;
    let agent_id: u64 = num(fields[1], "id")?;
    let label_code: i64 = num(fields[2], "label")?;
    let label = AgentLabel::from_code(label_code)
        .ok_or_else(|| format!("unknown label code {label_code}"))?;
    let confidence: f64 = num(fields[3], "confidence")?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(format!("confidence {confidence} outside [0,1]"));
    }
    let pos_x: f64 = num(fields[4], "pos_x")?;
    let pos_y: f64 = num(fields[5], "pos_y")?;
    let box_length: f64 = num(fields[6], "box_length")?;
    let box_width: f64 = num(fields[7], "box_width")?;
    let box_height: f64 = num(fields[8], "box_height")?;
    if box_length <= 0.0 || box_width <= 0.0 || box_height <= 0.0 {
        return Err(format!(
            "non-positive box dims ({box_length}, {box_width}, {box_height})"
        ));
    }
    let yaw = normalize_angle(num::<f64>(fields[9], "yaw")?);
    let vel_x: f64 = num(fields[10], "vel_x")?;
    let vel_y: f64 = num(fields[11], "vel_y")?;
    let tracking_status: i64 = num(fields[12], "tracking_status")?;

    Ok(TrackRecord {
        timestamp_ms,
        agent_id,
        label,
        confidence,
        pos_x,
        pos_y,
        box_length,
        box_width,
        box_height,
        yaw,
        vel_x,
        vel_y,
        tracking_status,
    })
}

/// Write records in the 13-column format with a header row. Floats use the
/// shortest representation that round-trips exactly.
pub fn write_track_file(path: &Path, records: &[TrackRecord]) -> Result<(), IngestError> {
    let file = File::create(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(w, "{TRACK_HEADER}")?;
        for r in records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.timestamp_ms,
                r.agent_id,
                r.label.code(),
                r.confidence,
                r.pos_x,
                r.pos_y,
                r.box_length,
                r.box_width,
                r.box_height,
                r.yaw,
                r.vel_x,
                r.vel_y,
                r.tracking_status
            )?;
        }
        w.flush()
    })();
    res.map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseEventKind {
    Begin,
    End,
}

impl PhaseEventKind {
    fn rank(self) -> u8 {
        match self {
            PhaseEventKind::Begin => 0,
            PhaseEventKind::End => 1,
        }
    }
}

/// One signal phase begin/end event from the SPaT log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatEvent {
    pub timestamp_ms: i64,
    pub phase_id: u32,
    pub event: PhaseEventKind,
}

/// Parse a SPaT log. Events come back time-sorted and the begin/end
/// alternation is validated per phase, including a trailing begin with no
/// matching end.
pub fn parse_spat_file(path: &Path) -> Result<Vec<SpatEvent>, IngestError> {
    let reader = open_reader(path)?;
    let mut events = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if idx == 0 && looks_like_header(&fields) {
            continue;
        }
        if fields.len() != 3 {
            return Err(IngestError::SchemaMismatch {
                line: line_no,
                expected: 3,
                found: fields.len(),
            });
        }
        let timestamp_ms: i64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| IngestError::SchemaMismatch {
                line: line_no,
                expected: 3,
                found: fields.len(),
            })?;
        let phase_id: u32 = fields[1]
            .trim()
            .parse()
            .map_err(|_| IngestError::SchemaMismatch {
                line: line_no,
                expected: 3,
                found: fields.len(),
            })?;
        let event = match fields[2].trim() {
            "begin" => PhaseEventKind::Begin,
            "end" => PhaseEventKind::End,
            _ => {
                return Err(IngestError::SchemaMismatch {
                    line: line_no,
                    expected: 3,
                    found: fields.len(),
                })
            }
        };
        events.push(SpatEvent {
            timestamp_ms,
            phase_id,
            event,
        });
    }

    events.sort_by_key(|e| (e.timestamp_ms, e.phase_id, e.event.rank()));
    validate_alternation(&events)?;
    Ok(events)
}

/// Begin/end must strictly alternate per phase, starting with begin and
/// ending with end.
pub fn validate_alternation(events: &[SpatEvent]) -> Result<(), IngestError> {
    use std::collections::HashMap;
    let mut open: HashMap<u32, Option<i64>> = HashMap::new();
    for e in events {
        let slot = open.entry(e.phase_id).or_insert(None);
        match (e.event, slot.is_some()) {
            (PhaseEventKind::Begin, false) => *slot = Some(e.timestamp_ms),
            (PhaseEventKind::End, true) => *slot = None,
            _ => {
                return Err(IngestError::UnpairedPhaseEvent {
                    phase_id: e.phase_id,
                    timestamp_ms: e.timestamp_ms,
                })
            }
        }
    }
    for (phase_id, slot) in open {
        if let Some(timestamp_ms) = slot {
            return Err(IngestError::UnpairedPhaseEvent {
                phase_id,
                timestamp_ms,
            });
        }
    }
    Ok(())
}

pub fn write_spat_file(path: &Path, events: &[SpatEvent]) -> Result<(), IngestError> {
    let file = File::create(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(w, "{SPAT_HEADER}")?;
        for e in events {
            let kind = match e.event {
                PhaseEventKind::Begin => "begin",
                PhaseEventKind::End => "end",
            };
            writeln!(w, "{},{},{}", e.timestamp_ms, e.phase_id, kind)?;
        }
        w.flush()
    })();
    res.map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests;
