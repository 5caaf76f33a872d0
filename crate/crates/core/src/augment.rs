//! Sliding-window data augmentation: full trajectories become fixed-length
//! training windows, each labeled with the seconds remaining until the
//! agent's final in-crossing point.
//!
//! Windows never extend past the crossing exit, so every target is ≥ 0, and
//! train/test splitting happens at the trajectory level before windowing so
//! overlapping windows of one trajectory cannot leak across the split.

use crate::exec;
use crate::ingest::AgentLabel;
use crate::preprocess::area::Area;
use crate::preprocess::{Trajectory, TrajectoryPoint};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("trajectory {agent_id} never enters a crossing area")]
    NoCrossingExit { agent_id: u64 },
    #[error("requested {requested} windows but only {available} exist")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("failed to {action} {path}")]
    Io {
        action: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad window checkpoint row at line {line}: {reason}")]
    BadRow { line: usize, reason: String },
}

/// W consecutive points of one trajectory plus the arrival target measured
/// from the window's last point.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub agent_id: u64,
    pub window_start_index: usize,
    /// Seconds from the window's last point to the trajectory's final
    /// in-crossing point. Always ≥ 0.
    pub target: f64,
    /// Crossing whose signal phase governs this window: the window's last
    /// in-crossing point's area, or the trajectory's majority crossing for
    /// approach-only windows. Lets phase features survive without the
    /// source trajectory.
    pub governing_area: Area,
    pub points: Vec<TrajectoryPoint>,
}

/// Index of the trajectory's final in-crossing point.
fn exit_index(traj: &Trajectory) -> Option<usize> {
    traj.points.iter().rposition(|p| p.area.is_crossing())
}

/// Seconds from point `index` to the trajectory's final in-crossing point.
pub fn compute_arrival_target(traj: &Trajectory, index: usize) -> Result<f64, AugmentError> {
    let exit = exit_index(traj).ok_or(AugmentError::NoCrossingExit {
        agent_id: traj.agent_id,
    })?;
    assert!(index < traj.points.len(), "point index out of range");
    Ok((traj.points[exit].timestamp_ms - traj.points[index].timestamp_ms) as f64 / 1000.0)
}

/// Stride-1 sliding windows over the points up to and including the
/// crossing exit. A trajectory with fewer than W eligible points (or no
/// in-crossing point at all) yields nothing.
pub fn range_selection(traj: &Trajectory, w: usize) -> Vec<TrainingWindow> {
    assert!(w >= 2, "window length must be at least 2");
    let Some(exit) = exit_index(traj) else {
        log::debug!("trajectory {} has no crossing exit; no windows", traj.agent_id);
        return Vec::new();
    };
    let eligible = &traj.points[..=exit];
    let exit_ms = traj.points[exit].timestamp_ms;
    if eligible.len() < w {
        return Vec::new();
    }
    let fallback_area = traj
        .governing_crossing()
        .expect("a crossing exit implies at least one in-crossing point");
    (0..=eligible.len() - w)
        .map(|start| {
            let points = eligible[start..start + w].to_vec();
            let target = (exit_ms - points[w - 1].timestamp_ms) as f64 / 1000.0;
            let governing_area = points
                .iter()
                .rev()
                .find(|p| p.area.is_crossing())
                .map_or(fallback_area, |p| p.area);
            TrainingWindow {
                agent_id: traj.agent_id,
                window_start_index: start,
                target,
                governing_area,
                points,
            }
        })
        .collect()
}

/// Range selection over many trajectories, flattened in trajectory order.
pub fn augment_trajectories(trajectories: &[Trajectory], w: usize) -> Vec<TrainingWindow> {
    exec::map_collect(trajectories, |traj| range_selection(traj, w))
        .into_iter()
        .flatten()
        .collect()
}

/// Uniform sample of M windows without replacement; M = N returns every
/// window in shuffled order.
pub fn random_selection(
    windows: Vec<TrainingWindow>,
    m: usize,
    seed: u64,
) -> Result<Vec<TrainingWindow>, AugmentError> {
    if m > windows.len() {
        return Err(AugmentError::SampleTooLarge {
            requested: m,
            available: windows.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(m);
    let mut slots: Vec<Option<TrainingWindow>> = windows.into_iter().map(Some).collect();
    Ok(order
        .into_iter()
        .map(|i| slots[i].take().expect("selection indices are distinct"))
        .collect())
}

/// Trajectory-level train/test split: shuffled assignment of whole
/// trajectories, train side first. With n ≥ 2 both sides are nonempty.
pub fn split_trajectories(
    trajectories: &[Trajectory],
    train_ratio: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    assert!(
        train_ratio > 0.0 && train_ratio < 1.0,
        "train_ratio must be in (0, 1)"
    );
    let n = trajectories.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let cut = if n < 2 {
        n
    } else {
        ((train_ratio * n as f64).round() as usize).clamp(1, n - 1)
    };
    let mut train = order[..cut].to_vec();
    let mut test = order[cut..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

// Window checkpoint format: plain CSV with a leading row-kind column.
// `window,agent_id,window_start_index,target,governing_area` opens each
// window and is followed by exactly W `point,...` rows carrying the full
// point fields.
const POINT_FIELDS: usize = 16;
const WINDOW_FIELDS: usize = 5;

pub fn write_windows(path: &Path, windows: &[TrainingWindow]) -> Result<(), AugmentError> {
    let io_err = |action, source| AugmentError::Io {
        action,
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(|e| io_err("create", e))?;
    let mut out = std::io::BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        for win in windows {
            writeln!(
                out,
                "window,{},{},{},{}",
                win.agent_id, win.window_start_index, win.target, win.governing_area
            )?;
            for p in &win.points {
                writeln!(
                    out,
                    "point,{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    p.timestamp_ms,
                    p.label.code(),
                    p.confidence,
                    p.pos_x,
                    p.pos_y,
                    p.box_length,
                    p.box_width,
                    p.box_height,
                    p.yaw,
                    p.vel_x,
                    p.vel_y,
                    p.tracking_status,
                    p.speed,
                    p.spent_time,
                    p.area,
                )?;
            }
        }
        out.flush()
    })();
    res.map_err(|e| io_err("write", e))
}

pub fn read_windows(path: &Path) -> Result<Vec<TrainingWindow>, AugmentError> {
    let file = std::fs::File::open(path).map_err(|source| AugmentError::Io {
        action: "open",
        path: path.to_path_buf(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut windows: Vec<TrainingWindow> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| AugmentError::Io {
            action: "read",
            path: path.to_path_buf(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let bad = |reason: String| AugmentError::BadRow {
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = trimmed.split(',').collect();
        match fields[0] {
            "window" => {
                if fields.len() != WINDOW_FIELDS {
                    return Err(bad(format!(
                        "window row needs {WINDOW_FIELDS} fields, found {}",
                        fields.len()
                    )));
                }
                windows.push(TrainingWindow {
                    agent_id: fields[1]
                        .parse()
                        .map_err(|_| bad(format!("bad agent_id {:?}", fields[1])))?,
                    window_start_index: fields[2]
                        .parse()
                        .map_err(|_| bad(format!("bad window_start_index {:?}", fields[2])))?,
                    target: fields[3]
                        .parse()
                        .map_err(|_| bad(format!("bad target {:?}", fields[3])))?,
                    governing_area: fields[4].parse().map_err(bad)?,
                    points: Vec::new(),
                });
            }
            "point" => {
                if fields.len() != POINT_FIELDS {
                    return Err(bad(format!(
                        "point row needs {POINT_FIELDS} fields, found {}",
                        fields.len()
                    )));
                }
                let win = windows
                    .last_mut()
                    .ok_or_else(|| bad("point row before any window row".into()))?;
                let num = |i: usize| -> Result<f64, AugmentError> {
                    fields[i]
                        .parse()
                        .map_err(|_| bad(format!("bad float field {i}: {:?}", fields[i])))
                };
                let label_code: i64 = fields[2]
                    .parse()
                    .map_err(|_| bad(format!("bad label {:?}", fields[2])))?;
                let label = AgentLabel::from_code(label_code)
                    .ok_or_else(|| bad(format!("unknown label code {label_code}")))?;
                win.points.push(TrajectoryPoint {
                    timestamp_ms: fields[1]
                        .parse()
                        .map_err(|_| bad(format!("bad timestamp {:?}", fields[1])))?,
                    label,
                    confidence: num(3)?,
                    pos_x: num(4)?,
                    pos_y: num(5)?,
                    box_length: num(6)?,
                    box_width: num(7)?,
                    box_height: num(8)?,
                    yaw: num(9)?,
                    vel_x: num(10)?,
                    vel_y: num(11)?,
                    tracking_status: fields[12]
                        .parse()
                        .map_err(|_| bad(format!("bad tracking_status {:?}", fields[12])))?,
                    speed: num(13)?,
                    spent_time: num(14)?,
                    area: fields[15].parse().map_err(bad)?,
                });
            }
            other => return Err(bad(format!("unknown row kind {other:?}"))),
        }
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::area::Area;
    use proptest::prelude::*;

    fn crossing_point(ts_ms: i64, area: Area) -> TrajectoryPoint {
        TrajectoryPoint {
            timestamp_ms: ts_ms,
            label: AgentLabel::Pedestrian,
            confidence: 0.9,
            pos_x: ts_ms as f64 / 1000.0,
            pos_y: -0.25,
            box_length: 0.31,
            box_width: 0.52,
            box_height: 1.71,
            yaw: 0.1,
            vel_x: 1.3,
            vel_y: 0.0,
            tracking_status: 1,
            speed: 1.3,
            spent_time: ts_ms as f64 / 1000.0,
            area,
        }
    }

    fn crossing_traj(agent_id: u64, n_crossing: usize, n_after: usize) -> Trajectory {
        let mut points: Vec<TrajectoryPoint> = (0..n_crossing)
            .map(|i| crossing_point(i as i64 * 100, Area::Crossing1))
            .collect();
        for i in 0..n_after {
            points.push(crossing_point(
                (n_crossing + i) as i64 * 100,
                Area::VehicleArea,
            ));
        }
        Trajectory { agent_id, points }
    }

    #[test]
    fn window_counts_match_the_law() {
        assert_eq!(range_selection(&crossing_traj(1, 12, 0), 5).len(), 8);
        assert_eq!(range_selection(&crossing_traj(1, 5, 0), 10).len(), 0);
        assert_eq!(range_selection(&crossing_traj(1, 2, 0), 2).len(), 1);
    }

    #[test]
    fn points_after_exit_are_excluded() {
        let traj = crossing_traj(3, 10, 5);
        let windows = range_selection(&traj, 5);
        assert_eq!(windows.len(), 6, "only the 10 in-crossing points count");
        for win in &windows {
            assert!(win.points.iter().all(|p| p.timestamp_ms <= 900));
            assert_eq!(win.governing_area, Area::Crossing1);
        }
        let last = windows.last().unwrap();
        assert_eq!(last.points.last().unwrap().timestamp_ms, 900);
        assert_eq!(last.target, 0.0, "window ending at the exit has target 0");
    }

    #[test]
    fn approach_only_windows_inherit_the_majority_crossing() {
        // 6 approach points, then 8 points in crossing 3.
        let mut points: Vec<TrajectoryPoint> = (0..6)
            .map(|i| crossing_point(i * 100, Area::VehicleArea))
            .collect();
        points.extend((6..14).map(|i| crossing_point(i * 100, Area::Crossing3)));
        let traj = Trajectory { agent_id: 11, points };
        let windows = range_selection(&traj, 4);
        assert_eq!(windows.len(), 11);
        // First window covers indices 0..4, entirely pre-crossing.
        assert!(windows[0].points.iter().all(|p| !p.area.is_crossing()));
        assert_eq!(windows[0].governing_area, Area::Crossing3);
        assert_eq!(windows.last().unwrap().governing_area, Area::Crossing3);
    }

    #[test]
    fn targets_are_monotone_and_frame_spaced() {
        let traj = crossing_traj(4, 30, 0);
        let windows = range_selection(&traj, 10);
        for win in &windows {
            assert!(win.target >= 0.0);
            assert_eq!(win.points.len(), 10);
        }
        for pair in windows.windows(2) {
            let drop = pair[0].target - pair[1].target;
            assert!(
                (drop - 0.1).abs() < 1e-12,
                "consecutive targets should fall by one frame, fell by {drop}"
            );
        }
    }

    #[test]
    fn arrival_target_examples() {
        // Exit at 14.5 s, query at 2.0 s.
        let mut traj = crossing_traj(5, 1, 0);
        traj.points[0].timestamp_ms = 2_000;
        traj.points.push(crossing_point(14_500, Area::Crossing2));
        assert_eq!(compute_arrival_target(&traj, 0).unwrap(), 12.5);
        assert_eq!(compute_arrival_target(&traj, 1).unwrap(), 0.0);

        let no_exit = Trajectory {
            agent_id: 6,
            points: vec![crossing_point(0, Area::VehicleArea)],
        };
        assert!(matches!(
            compute_arrival_target(&no_exit, 0),
            Err(AugmentError::NoCrossingExit { agent_id: 6 })
        ));
        assert!(range_selection(&no_exit, 2).is_empty());
    }

    #[test]
    fn random_selection_contract() {
        let windows = range_selection(&crossing_traj(7, 6, 0), 4);
        assert_eq!(windows.len(), 3);

        let one = random_selection(windows.clone(), 1, 5).unwrap();
        assert_eq!(one.len(), 1);
        assert!(windows.contains(&one[0]));

        let all = random_selection(windows.clone(), 3, 5).unwrap();
        assert_eq!(all.len(), 3);
        let mut starts: Vec<usize> = all.iter().map(|w| w.window_start_index).collect();
        starts.sort_unstable();
        assert_eq!(starts, vec![0, 1, 2], "M = N must be a permutation");

        assert!(matches!(
            random_selection(windows.clone(), 4, 5),
            Err(AugmentError::SampleTooLarge {
                requested: 4,
                available: 3
            })
        ));

        let a = random_selection(windows.clone(), 2, 9).unwrap();
        let b = random_selection(windows.clone(), 2, 9).unwrap();
        assert_eq!(a, b, "same seed, same selection");
    }

    #[test]
    fn split_keeps_trajectories_whole() {
        let trajectories: Vec<Trajectory> =
            (0..96).map(|i| crossing_traj(i, 20, 0)).collect();
        let (train, test) = split_trajectories(&trajectories, 0.76, 3);
        assert_eq!(train.len(), 73);
        assert_eq!(test.len(), 23);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..96).collect::<Vec<_>>(), "partition must be exact");

        let (train2, test2) = split_trajectories(&trajectories, 0.76, 3);
        assert_eq!(train, train2);
        assert_eq!(test, test2);

        // Windows built after the split cannot share an agent across sides.
        let train_ids: std::collections::BTreeSet<u64> =
            train.iter().map(|&i| trajectories[i].agent_id).collect();
        for &i in &test {
            assert!(!train_ids.contains(&trajectories[i].agent_id));
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut windows = augment_trajectories(
            &[crossing_traj(8, 14, 2), crossing_traj(9, 7, 0)],
            5,
        );
        // Perturb floats to exercise formatting.
        windows[0].points[0].yaw = -3.141592653589793;
        windows[0].points[1].confidence = 0.123456789012345678;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("windows.csv");
        write_windows(&path, &windows).unwrap();
        let back = read_windows(&path).unwrap();
        assert_eq!(back, windows);
    }

    #[test]
    fn windows_from_generated_scene_obey_the_law() {
        let config = crate::synthgen::ScenarioConfig::default_scene(31);
        let scene = crate::synthgen::generate_scene(&config).unwrap();
        let outcome = crate::preprocess::preprocess_pipeline(
            &scene.records,
            &config.areas,
            &crate::ingest::CalibrationConfig::identity(),
        )
        .unwrap();
        let w = 10;
        let windows = augment_trajectories(&outcome.trajectories, w);
        let expected: usize = outcome
            .trajectories
            .iter()
            .map(|t| {
                t.points
                    .iter()
                    .rposition(|p| p.area.is_crossing())
                    .map_or(0, |exit| (exit + 1).saturating_sub(w - 1))
            })
            .sum();
        assert_eq!(windows.len(), expected);
        assert!(!windows.is_empty());
        for win in &windows {
            assert!(win.target >= 0.0);
            assert_eq!(win.points.len(), w);
            for pair in win.points.windows(2) {
                assert!(pair[0].timestamp_ms < pair[1].timestamp_ms);
            }
        }
    }

    proptest! {
        /// Window-count law against a brute-force enumerator.
        #[test]
        fn window_count_law_holds(lengths in proptest::collection::vec(0usize..60, 1..8),
                                  w in 2usize..15) {
            let trajectories: Vec<Trajectory> = lengths
                .iter()
                .enumerate()
                .map(|(i, &l)| crossing_traj(i as u64, l, 0))
                .collect();
            let windows = augment_trajectories(&trajectories, w);
            let brute: usize = lengths
                .iter()
                .map(|&l| (0..l).filter(|s| s + w <= l).count())
                .sum();
            let law: usize = lengths
                .iter()
                .map(|&l| if l >= w { l - w + 1 } else { 0 })
                .sum();
            prop_assert_eq!(windows.len(), brute);
            prop_assert_eq!(windows.len(), law);
        }

        /// Identical seeds select identical windows; the selection is a
        /// subset of the input.
        #[test]
        fn random_selection_is_seed_deterministic(n in 1usize..40, seed in 0u64..1000) {
            let traj = crossing_traj(1, n + 4, 0);
            let windows = range_selection(&traj, 5);
            let m = windows.len() / 2;
            let a = random_selection(windows.clone(), m, seed).unwrap();
            let b = random_selection(windows.clone(), m, seed).unwrap();
            prop_assert_eq!(&a, &b);
            for win in &a {
                prop_assert!(windows.contains(win));
            }
            let mut starts: Vec<_> = a.iter().map(|w| w.window_start_index).collect();
            starts.sort_unstable();
            starts.dedup();
            prop_assert_eq!(starts.len(), m, "selection must be without replacement");
        }
    }
}
