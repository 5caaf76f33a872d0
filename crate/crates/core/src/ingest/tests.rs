use super::*;
use crate::preprocess::Area;
use proptest::prelude::*;
use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

fn write_temp(contents: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("input.csv");
    std::fs::write(&path, contents).unwrap();
    (dir, path)
}

#[test]
fn parses_known_row() {
    let (_dir, path) = write_temp(concat!(
        "timestamp_ms,id,label,confidence,pos_x,pos_y,box_length,box_width,",
        "box_height,yaw,vel_x,vel_y,tracking_status\n",
        "1633719576000,354573,2,0.97,12.1,-3.4,0.6,0.5,1.7,1.2,1.1,0.3,1\n",
    ));
    let out = parse_track_file(&path).unwrap();
    assert!(out.report.header_detected);
    assert_eq!(out.report.data_rows, 1);
    assert!(out.report.malformed.is_empty());
    let r = &out.records[0];
    assert_eq!(r.timestamp_ms, 1633719576000);
    assert_eq!(r.agent_id, 354573);
    assert_eq!(r.label, AgentLabel::Pedestrian);
    assert_eq!(r.confidence, 0.97);
    assert_eq!(r.pos_x, 12.1);
    assert_eq!(r.pos_y, -3.4);
    assert_eq!(r.box_height, 1.7);
    assert_eq!(r.yaw, 1.2);
    assert_eq!(r.tracking_status, 1);
    assert!((r.speed() - (1.1f64).hypot(0.3)).abs() < 1e-15);
}

#[test]
fn headerless_file_parses() {
    let (_dir, path) = write_temp("1000,371401,1,0.5,0,0,4.2,1.8,1.5,0,8,0,1\n");
    let out = parse_track_file(&path).unwrap();
    assert!(!out.report.header_detected);
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].label, AgentLabel::Vehicle);
}

#[test]
fn empty_file_is_empty_not_an_error() {
    let (_dir, path) = write_temp("");
    let out = parse_track_file(&path).unwrap();
    assert!(out.records.is_empty());
    assert_eq!(out.report.data_rows, 0);
    assert!(out.report.malformed.is_empty());
}

#[test]
fn missing_file_is_reported() {
    let err = parse_track_file(std::path::Path::new("/nonexistent/tracks.csv")).unwrap_err();
    assert!(matches!(err, IngestError::MissingFile(_)));
}

#[test]
fn wrong_column_count_is_fatal() {
    let (_dir, path) = write_temp("1000,1,2,0.9,0,0\n");
    let err = parse_track_file(&path).unwrap_err();
    match err {
        IngestError::SchemaMismatch {
            line,
            expected,
            found,
        } => {
            assert_eq!(line, 1);
            assert_eq!(expected, TRACK_COLUMNS);
            assert_eq!(found, 6);
        }
        other => panic!("expected SchemaMismatch, got {other:?}"),
    }
}

#[test]
fn malformed_values_are_counted_not_fatal() {
    let (_dir, path) = write_temp(concat!(
        "1000,1,2,0.9,0,0,0.6,0.5,1.7,0,1,0,1\n",
        "1100,1,9,0.9,0,0,0.6,0.5,1.7,0,1,0,1\n", // unknown label code
        "1200,1,2,1.5,0,0,0.6,0.5,1.7,0,1,0,1\n", // confidence > 1
        "1300,1,2,0.9,0,0,-0.6,0.5,1.7,0,1,0,1\n", // negative box dim
        "1400,1,2,0.9,zzz,0,0.6,0.5,1.7,0,1,0,1\n", // bad number
        "1500,1,2,0.9,0,0,0.6,0.5,1.7,0,1,0,1\n",
    ));
    let out = parse_track_file(&path).unwrap();
    assert_eq!(out.records.len(), 2);
    assert_eq!(out.report.data_rows, 6);
    assert_eq!(out.report.malformed.len(), 4);
    let lines: Vec<usize> = out.report.malformed.iter().map(|m| m.line).collect();
    assert_eq!(lines, vec![2, 3, 4, 5]);
}

#[test]
fn yaw_is_normalized_on_ingest() {
    let (_dir, path) = write_temp("1000,1,2,0.9,0,0,0.6,0.5,1.7,7.0,1,0,1\n");
    let out = parse_track_file(&path).unwrap();
    let yaw = out.records[0].yaw;
    assert!((-PI..=PI).contains(&yaw));
    assert!((yaw - (7.0 - std::f64::consts::TAU)).abs() < 1e-12);
}

#[test]
fn unsorted_input_is_sorted_and_flagged() {
    let (_dir, path) = write_temp(concat!(
        "1200,1,2,0.9,0,0,0.6,0.5,1.7,0,1,0,1\n",
        "1000,2,2,0.9,0,0,0.6,0.5,1.7,0,1,0,1\n",
        "1000,1,2,0.9,0,0,0.6,0.5,1.7,0,1,0,1\n",
    ));
    let out = parse_track_file(&path).unwrap();
    assert!(out.report.sort_applied);
    let keys: Vec<(i64, u64)> = out
        .records
        .iter()
        .map(|r| (r.timestamp_ms, r.agent_id))
        .collect();
    assert_eq!(keys, vec![(1000, 1), (1000, 2), (1200, 1)]);
}

#[test]
fn large_file_row_count_is_exact() {
    let records: Vec<TrackRecord> = (0..41130)
        .map(|i| TrackRecord {
            timestamp_ms: 1_633_719_576_000 + (i as i64 / 3) * 100,
            agent_id: 354_573 + (i as u64 % 3),
            label: AgentLabel::Pedestrian,
            confidence: 0.9,
            pos_x: (i % 100) as f64 * 0.1,
            pos_y: -3.4,
            box_length: 0.6,
            box_width: 0.5,
            box_height: 1.7,
            yaw: 0.0,
            vel_x: 1.1,
            vel_y: 0.3,
            tracking_status: 1,
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.csv");
    write_track_file(&path, &records).unwrap();
    let out = parse_track_file(&path).unwrap();
    assert_eq!(out.records.len(), 41130);
    assert_eq!(out.report.data_rows, 41130);
    assert!(out.report.malformed.is_empty());
    assert!(!out.report.sort_applied);
}

proptest! {
    #[test]
    fn track_round_trip_is_exact(
        rows in proptest::collection::vec(
            (
                0i64..10_000_000,
                0u64..1000,
                1i64..=3,
                0.0f64..=1.0,
                -1000.0f64..1000.0,
                -1000.0f64..1000.0,
                0.01f64..50.0,
                0.01f64..50.0,
                0.01f64..5.0,
                -PI..PI,
                -50.0f64..50.0,
                -50.0f64..50.0,
            ),
            0..40,
        )
    ) {
        let mut records: Vec<TrackRecord> = rows
            .iter()
            .map(|&(ts, id, label, conf, px, py, bl, bw, bh, yaw, vx, vy)| TrackRecord {
                timestamp_ms: ts,
                agent_id: id,
                label: AgentLabel::from_code(label).unwrap(),
                confidence: conf,
                pos_x: px,
                pos_y: py,
                box_length: bl,
                box_width: bw,
                box_height: bh,
                yaw,
                vel_x: vx,
                vel_y: vy,
                tracking_status: 1,
            })
            .collect();
        records.sort_by(|a, b| (a.timestamp_ms, a.agent_id).cmp(&(b.timestamp_ms, b.agent_id)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round.csv");
        write_track_file(&path, &records).unwrap();
        let out = parse_track_file(&path).unwrap();
        prop_assert_eq!(out.records, records);
    }

    #[test]
    fn parse_is_input_order_insensitive(seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let records: Vec<TrackRecord> = (0..30)
            .map(|i| TrackRecord {
                timestamp_ms: 1000 + (i as i64 % 10) * 100,
                agent_id: i as u64 / 10,
                label: AgentLabel::Pedestrian,
                confidence: 0.9,
                pos_x: i as f64,
                pos_y: 0.0,
                box_length: 0.6,
                box_width: 0.5,
                box_height: 1.7,
                yaw: 0.0,
                vel_x: 1.0,
                vel_y: 0.0,
                tracking_status: 1,
            })
            .collect();
        let mut shuffled = records.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        shuffled.shuffle(&mut rng);

        let dir = tempfile::tempdir().unwrap();
        let sorted_path = dir.path().join("sorted.csv");
        let shuffled_path = dir.path().join("shuffled.csv");
        write_track_file(&sorted_path, &records).unwrap();
        write_track_file(&shuffled_path, &shuffled).unwrap();
        let a = parse_track_file(&sorted_path).unwrap().records;
        let b = parse_track_file(&shuffled_path).unwrap().records;
        prop_assert_eq!(a, b);
    }
}

#[test]
fn spat_pair_builds_one_interval() {
    let (_dir, path) = write_temp(concat!(
        "timestamp_ms,phase_id,event\n",
        "0,2,begin\n",
        "15000,2,end\n",
    ));
    let events = parse_spat_file(&path).unwrap();
    assert_eq!(events.len(), 2);
    let mut phase_map = BTreeMap::new();
    phase_map.insert(Area::Crossing1, 2u32);
    let timeline = build_phase_timeline(&events, &phase_map).unwrap();
    let intervals = timeline.green_intervals(Area::Crossing1).unwrap();
    assert_eq!(
        intervals,
        &[GreenInterval {
            start_ms: 0,
            end_ms: 15000
        }]
    );
}

#[test]
fn spat_end_without_begin_is_rejected() {
    let (_dir, path) = write_temp("5000,2,end\n");
    let err = parse_spat_file(&path).unwrap_err();
    assert!(matches!(
        err,
        IngestError::UnpairedPhaseEvent {
            phase_id: 2,
            timestamp_ms: 5000
        }
    ));
}

#[test]
fn spat_double_begin_is_rejected() {
    let (_dir, path) = write_temp("0,2,begin\n5000,2,begin\n9000,2,end\n");
    assert!(matches!(
        parse_spat_file(&path).unwrap_err(),
        IngestError::UnpairedPhaseEvent {
            phase_id: 2,
            timestamp_ms: 5000
        }
    ));
}

#[test]
fn spat_trailing_begin_is_rejected() {
    let (_dir, path) = write_temp("0,2,begin\n15000,2,end\n20000,2,begin\n");
    assert!(matches!(
        parse_spat_file(&path).unwrap_err(),
        IngestError::UnpairedPhaseEvent {
            phase_id: 2,
            timestamp_ms: 20000
        }
    ));
}

#[test]
fn three_hour_spat_log_parses() {
    // 40 s cycle, phases 2 and 6, over three hours.
    let mut lines = String::from("timestamp_ms,phase_id,event\n");
    let cycles = 3 * 3600 / 40;
    for c in 0..cycles {
        let base = c as i64 * 40_000;
        lines.push_str(&format!("{},2,begin\n", base));
        lines.push_str(&format!("{},2,end\n", base + 15_000));
        lines.push_str(&format!("{},6,begin\n", base + 20_000));
        lines.push_str(&format!("{},6,end\n", base + 35_000));
    }
    let (_dir, path) = write_temp(&lines);
    let events = parse_spat_file(&path).unwrap();
    assert_eq!(events.len(), cycles * 4);
    let mut phase_map = BTreeMap::new();
    phase_map.insert(Area::Crossing1, 2u32);
    phase_map.insert(Area::Crossing3, 6u32);
    let timeline = build_phase_timeline(&events, &phase_map).unwrap();
    assert_eq!(timeline.green_intervals(Area::Crossing1).unwrap().len(), cycles);
    assert_eq!(timeline.green_intervals(Area::Crossing3).unwrap().len(), cycles);
}

#[test]
fn spat_round_trip() {
    let events = vec![
        SpatEvent {
            timestamp_ms: 0,
            phase_id: 2,
            event: PhaseEventKind::Begin,
        },
        SpatEvent {
            timestamp_ms: 15_000,
            phase_id: 2,
            event: PhaseEventKind::End,
        },
        SpatEvent {
            timestamp_ms: 20_000,
            phase_id: 6,
            event: PhaseEventKind::Begin,
        },
        SpatEvent {
            timestamp_ms: 35_000,
            phase_id: 6,
            event: PhaseEventKind::End,
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spat.csv");
    write_spat_file(&path, &events).unwrap();
    assert_eq!(parse_spat_file(&path).unwrap(), events);
}

fn test_timeline() -> PhaseTimeline {
    // Greens at [0, 15 s) and [40 s, 55 s) for crossing_1; span 0..80 s.
    let mut intervals = BTreeMap::new();
    intervals.insert(
        Area::Crossing1,
        vec![
            GreenInterval {
                start_ms: 0,
                end_ms: 15_000,
            },
            GreenInterval {
                start_ms: 40_000,
                end_ms: 55_000,
            },
        ],
    );
    PhaseTimeline::from_intervals(intervals, 0, 80_000)
}

#[test]
fn timeline_boundaries_are_half_open() {
    let tl = test_timeline();
    let area = Area::Crossing1;
    assert_eq!(tl.current_phase(0, area).unwrap(), PhaseState::Green);
    assert_eq!(
        tl.current_phase(14_999, area).unwrap(),
        PhaseState::Green
    );
    // The instant the phase ends is already not-green.
    assert_eq!(tl.current_phase(15_000, area).unwrap(), PhaseState::NotGreen);
    assert_eq!(tl.current_phase(40_000, area).unwrap(), PhaseState::Green);
}

#[test]
fn timeline_left_times() {
    let tl = test_timeline();
    let area = Area::Crossing1;
    assert_eq!(tl.left_phase_time(5_000, area).unwrap(), 10.0);
    // Not green: time to the next green start.
    assert_eq!(tl.left_phase_time(15_000, area).unwrap(), 25.0);
    assert_eq!(tl.left_phase_time(30_000, area).unwrap(), 10.0);
    // After the last green: time to the span end.
    assert_eq!(tl.left_phase_time(60_000, area).unwrap(), 20.0);
    assert_eq!(tl.left_phase_time(80_000, area).unwrap(), 0.0);
}

#[test]
fn timeline_query_matches_linear_oracle_everywhere() {
    let tl = test_timeline();
    let area = Area::Crossing1;
    let intervals = tl.green_intervals(area).unwrap().to_vec();
    let (span_start, span_end) = tl.span_ms();
    let oracle = |t: i64| -> (PhaseState, f64) {
        for iv in &intervals {
            if t >= iv.start_ms && t < iv.end_ms {
                return (PhaseState::Green, (iv.end_ms - t) as f64 / 1000.0);
            }
        }
        for iv in &intervals {
            if iv.start_ms > t {
                return (PhaseState::NotGreen, (iv.start_ms - t) as f64 / 1000.0);
            }
        }
        (PhaseState::NotGreen, (span_end - t).max(0) as f64 / 1000.0)
    };
    let mut t = span_start;
    while t <= span_end {
        let got = tl.query(t, area).unwrap();
        let want = oracle(t);
        assert_eq!(got.0, want.0, "state at {t}");
        assert_eq!(got.1, want.1, "left time at {t}");
        t += 97; // prime step hits interval boundaries' neighborhoods
    }
    for boundary in [0, 15_000, 40_000, 55_000, 80_000] {
        assert_eq!(tl.query(boundary, area).unwrap(), oracle(boundary));
    }
}

#[test]
fn timeline_unknown_area_is_an_error() {
    let tl = test_timeline();
    assert!(matches!(
        tl.query(0, Area::Crossing2),
        Err(IngestError::UnknownArea(Area::Crossing2))
    ));
}

#[test]
fn first_green_end_in_window() {
    let tl = test_timeline();
    let area = Area::Crossing1;
    assert_eq!(tl.first_green_end_in(0, 20_000, area).unwrap(), Some(15_000));
    assert_eq!(tl.first_green_end_in(16_000, 30_000, area).unwrap(), None);
    assert_eq!(
        tl.first_green_end_in(16_000, 60_000, area).unwrap(),
        Some(55_000)
    );
}

#[test]
fn calibration_identity_is_a_no_op() {
    let rec = TrackRecord {
        timestamp_ms: 1000,
        agent_id: 1,
        label: AgentLabel::Pedestrian,
        confidence: 0.9,
        pos_x: 12.1,
        pos_y: -3.4,
        box_length: 0.6,
        box_width: 0.5,
        box_height: 1.7,
        yaw: 1.2,
        vel_x: 1.1,
        vel_y: 0.3,
        tracking_status: 1,
    };
    let out = apply_calibration(&[rec.clone()], &CalibrationConfig::identity()).unwrap();
    assert_eq!(out[0], rec);
}

#[test]
fn calibration_rotation_maps_positions_velocities_and_yaw() {
    let cal = CalibrationConfig::similarity(FRAC_PI_2, 1.0, 0.0, 0.0);
    let rec = TrackRecord {
        timestamp_ms: 0,
        agent_id: 1,
        label: AgentLabel::Pedestrian,
        confidence: 1.0,
        pos_x: 1.0,
        pos_y: 0.0,
        box_length: 0.6,
        box_width: 0.5,
        box_height: 1.7,
        yaw: 0.3,
        vel_x: 2.0,
        vel_y: 0.0,
        tracking_status: 1,
    };
    let out = apply_calibration(&[rec], &cal).unwrap();
    let r = &out[0];
    assert!(r.pos_x.abs() < 1e-12);
    assert!((r.pos_y - 1.0).abs() < 1e-12);
    assert!(r.vel_x.abs() < 1e-12);
    assert!((r.vel_y - 2.0).abs() < 1e-12);
    assert!((r.yaw - (0.3 + FRAC_PI_2)).abs() < 1e-12);
    assert_eq!(r.box_height, 1.7, "height is not a planar quantity");
    assert!((r.speed() - 2.0).abs() < 1e-12);
}

#[test]
fn calibration_translation_leaves_vectors_alone() {
    let cal = CalibrationConfig::similarity(0.0, 1.0, 10.0, -5.0);
    let rec = TrackRecord {
        timestamp_ms: 0,
        agent_id: 1,
        label: AgentLabel::Pedestrian,
        confidence: 1.0,
        pos_x: 1.0,
        pos_y: 2.0,
        box_length: 0.6,
        box_width: 0.5,
        box_height: 1.7,
        yaw: 0.0,
        vel_x: 1.5,
        vel_y: -0.5,
        tracking_status: 1,
    };
    let out = apply_calibration(&[rec], &cal).unwrap();
    assert_eq!(out[0].pos_x, 11.0);
    assert_eq!(out[0].pos_y, -3.0);
    assert_eq!(out[0].vel_x, 1.5);
    assert_eq!(out[0].vel_y, -0.5);
}

#[test]
fn calibration_scale_touches_boxes_and_speed() {
    let cal = CalibrationConfig::similarity(0.0, 2.0, 0.0, 0.0);
    assert!((cal.scale_factor() - 2.0).abs() < 1e-12);
    let rec = TrackRecord {
        timestamp_ms: 0,
        agent_id: 1,
        label: AgentLabel::Pedestrian,
        confidence: 1.0,
        pos_x: 1.0,
        pos_y: 0.0,
        box_length: 0.6,
        box_width: 0.5,
        box_height: 1.7,
        yaw: 0.0,
        vel_x: 1.0,
        vel_y: 0.0,
        tracking_status: 1,
    };
    let out = apply_calibration(&[rec], &cal).unwrap();
    assert!((out[0].box_length - 1.2).abs() < 1e-12);
    assert!((out[0].box_width - 1.0).abs() < 1e-12);
    assert_eq!(out[0].box_height, 1.7);
    assert!((out[0].speed() - 2.0).abs() < 1e-12);
}

#[test]
fn singular_calibration_is_rejected() {
    let cal = CalibrationConfig {
        affine: [[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]],
    };
    assert!(matches!(
        cal.validate(),
        Err(IngestError::SingularCalibration { .. })
    ));
    assert!(CalibrationConfig::identity().validate().is_ok());
}

proptest! {
    #[test]
    fn compose_matches_sequential_application(
        a1 in -PI..PI, s1 in 0.5f64..2.0, tx1 in -10.0f64..10.0, ty1 in -10.0f64..10.0,
        a2 in -PI..PI, s2 in 0.5f64..2.0, tx2 in -10.0f64..10.0, ty2 in -10.0f64..10.0,
        x in -100.0f64..100.0, y in -100.0f64..100.0,
    ) {
        let f = CalibrationConfig::similarity(a1, s1, tx1, ty1);
        let g = CalibrationConfig::similarity(a2, s2, tx2, ty2);
        let (ix, iy) = g.transform_point(x, y);
        let (wx, wy) = f.transform_point(ix, iy);
        let (cx, cy) = f.compose(&g).transform_point(x, y);
        prop_assert!((wx - cx).abs() < 1e-9 * (1.0 + wx.abs()));
        prop_assert!((wy - cy).abs() < 1e-9 * (1.0 + wy.abs()));
    }

    #[test]
    fn normalize_angle_is_idempotent_and_in_range(a in -100.0f64..100.0) {
        let n = normalize_angle(a);
        prop_assert!((-PI..=PI).contains(&n));
        prop_assert!((normalize_angle(n) - n).abs() < 1e-15);
        // Same direction modulo 2 pi.
        prop_assert!(((a - n) / std::f64::consts::TAU).rem_euclid(1.0) < 1e-9
            || ((a - n) / std::f64::consts::TAU).rem_euclid(1.0) > 1.0 - 1e-9);
    }
}
