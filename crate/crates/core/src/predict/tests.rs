use super::models::{build_loss, encode_sample, init_params, positional_encoding, BoundParams};
use super::tape::Tape;
use super::*;
use crate::ingest::{AgentLabel, GreenInterval};
use crate::preprocess::area::Area;
use crate::preprocess::{Trajectory, TrajectoryPoint};
use crate::subclass::{LabelSource, SubClassLabel};

fn point(ts_ms: i64, area: Area, speed: f64) -> TrajectoryPoint {
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
        vel_x: speed,
        vel_y: 0.0,
        tracking_status: 1,
        speed,
        spent_time: ts_ms as f64 / 1000.0,
        area,
    }
}

fn green_timeline(area: Area, start_ms: i64, end_ms: i64, span_end_ms: i64) -> PhaseTimeline {
    let mut intervals = BTreeMap::new();
    intervals.insert(area, vec![GreenInterval { start_ms, end_ms }]);
    PhaseTimeline::from_intervals(intervals, 0, span_end_ms)
}

fn normal_subclass() -> SubClassResult {
    SubClassResult {
        label: SubClassLabel::Normal,
        source: LabelSource::Svm,
        confidence: 1.0,
    }
}

fn toy(architecture: Architecture, include_subclass: bool) -> ModelConfig {
    let mut c = ModelConfig::new(architecture, 4, include_subclass, 11);
    c.batch_size = 4;
    c.iterations = 50;
    c.log_every = 10;
    c.ff_widths = vec![8, 8];
    c.rnn_hidden = 5;
    c.rnn_layers = 2;
    c.embed_dim = 6;
    c.heads = 2;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.ff_inner = 8;
    c
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
}

/// Random windows with a smooth target that depends on two entries.
fn random_dataset(seed: u64, n: usize, w: usize, d: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<Mat> = (0..n).map(|_| random_mat(&mut rng, w, d)).collect();
    let targets = features
        .iter()
        .map(|f| 2.0 * f.get(0, 0) + 0.5 * f.get(w - 1, 1) + 3.0)
        .collect();
    Dataset {
        features,
        targets,
        agent_ids: (0..n as u64).collect(),
    }
}

fn empty_dataset() -> Dataset {
    Dataset {
        features: Vec::new(),
        targets: Vec::new(),
        agent_ids: Vec::new(),
    }
}

fn identity_standardizer(d: usize) -> Standardizer {
    Standardizer {
        means: vec![0.0; d],
        stds: vec![1.0; d],
    }
}

fn untrained_model(config: &ModelConfig) -> TrainedModel {
    TrainedModel {
        config: config.clone(),
        params: init_params(config),
        standardizer: identity_standardizer(config.input_dim),
        history: Vec::new(),
    }
}

#[test]
fn param_counts_match_closed_forms() {
    for arch in ALL_ARCHITECTURES {
        for include in [true, false] {
            let paper = ModelConfig::new(arch, 10, include, 0);
            assert_eq!(
                init_params(&paper).scalar_count(),
                param_count(&paper),
                "{arch} paper size"
            );
            let small = toy(arch, include);
            assert_eq!(
                init_params(&small).scalar_count(),
                param_count(&small),
                "{arch} toy size"
            );
        }
    }
    // Hand-computed totals at W = 10, D = 13.
    let at = |arch| param_count(&ModelConfig::new(arch, 10, true, 0));
    assert_eq!(at(Architecture::Feedforward), 337_665);
    assert_eq!(at(Architecture::Lstm), 14_241);
    assert_eq!(at(Architecture::Gru), 10_689);
    assert_eq!(at(Architecture::Attention), 64_641);
}

#[test]
fn feature_rows_follow_the_pinned_layout() {
    let timeline = green_timeline(Area::Crossing1, 0, 12_000, 20_000);
    let win = TrainingWindow {
        agent_id: 7,
        window_start_index: 0,
        target: 4.0,
        governing_area: Area::Crossing1,
        points: vec![
            point(1_000, Area::VehicleArea, 1.2),
            point(2_000, Area::Crossing1, 1.3),
            point(13_000, Area::Crossing1, 1.4),
        ],
    };
    let f = build_features(&win, &timeline, true, &normal_subclass()).unwrap();
    assert_eq!(f.shape(), (3, FEATURE_DIM_WITH_SUBCLASS));
    // Approach point: green for another 11 s, vehicle-area flags.
    assert_eq!(f.row(0)[0], 1.0); // spent_time
    assert_eq!(f.row(0)[1], 11.0); // left_phase_time
    assert_eq!(f.row(0)[2], 1.0); // current_phase green
    assert_eq!(f.row(0)[3], 1.0); // pos_x
    assert_eq!(f.row(0)[5], 0.0); // area_crossing
    assert_eq!(f.row(0)[6], 1.0); // area_vehicle
    assert_eq!(f.row(0)[7], 0.52); // box_width
    assert_eq!(f.row(0)[11], 1.2); // speed
    assert_eq!(f.row(0)[12], 1.0); // normal subclass flag
    // In-crossing point during green.
    assert_eq!(f.row(1)[1], 10.0);
    assert_eq!(f.row(1)[5], 1.0);
    assert_eq!(f.row(1)[6], 0.0);
    // Past the green end: not green, 7 s to span end (no later green).
    assert_eq!(f.row(2)[1], 7.0);
    assert_eq!(f.row(2)[2], 0.0);

    let without = build_features(&win, &timeline, false, &normal_subclass()).unwrap();
    assert_eq!(without.cols(), FEATURE_DIM_WITHOUT_SUBCLASS);

    let mut off_span = win.clone();
    off_span.points[2].timestamp_ms = 25_000;
    let err = build_features(&off_span, &timeline, true, &normal_subclass()).unwrap_err();
    assert!(matches!(
        err,
        PredictError::TimelineGap { timestamp_ms: 25_000 }
    ));
}

#[test]
fn dataset_build_falls_back_to_unknown_subclass() {
    let timeline = green_timeline(Area::Crossing1, 0, 12_000, 20_000);
    let points: Vec<TrajectoryPoint> = (0..6)
        .map(|i| point(i * 100, Area::Crossing1, 1.3))
        .collect();
    let traj = Trajectory { agent_id: 42, points };
    let windows = crate::augment::range_selection(&traj, 3);
    assert_eq!(windows.len(), 4);
    let ds = build_dataset(&windows, &timeline, true, &BTreeMap::new()).unwrap();
    assert_eq!(ds.len(), 4);
    for f in &ds.features {
        for i in 0..f.rows() {
            assert_eq!(f.row(i)[12], 0.5, "missing agent takes the unknown flag");
        }
    }
    assert!(ds.agent_ids.iter().all(|&id| id == 42));
}

fn loss_value(config: &ModelConfig, params: &ParamSet, batch: &[Mat], targets: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let (loss_id, _) = build_loss(&mut tape, config, &bound, batch, targets);
    tape.scalar(loss_id)
}

fn perturbed(params: &ParamSet, mat_idx: usize, entry: usize, delta: f64) -> ParamSet {
    let mut p = params.clone();
    for (i, m) in p.mats_mut().enumerate() {
        if i == mat_idx {
            m.as_mut_slice()[entry] += delta;
        }
    }
    p
}

/// Central-difference check of d(loss)/d(param) on sampled entries.
fn check_model_gradients(config: &ModelConfig) {
    let ds = random_dataset(99, 3, config.window, config.input_dim);
    let batch = ds.features.clone();
    let targets = ds.targets.clone();
    let params = init_params(config);

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params);
    let (loss_id, _) = build_loss(&mut tape, config, &bound, &batch, &targets);
    let grads = tape.backward(loss_id);

    let h = 1e-5;
    for (mat_idx, (name, mat)) in params.iter().enumerate() {
        let grad = grads
            .get(bound.ids[mat_idx])
            .unwrap_or_else(|| panic!("{} {name} got no gradient", config.architecture));
        let stride = (mat.len() / 5).max(1);
        for entry in (0..mat.len()).step_by(stride) {
            let up = loss_value(config, &perturbed(&params, mat_idx, entry, h), &batch, &targets);
            let down =
                loss_value(config, &perturbed(&params, mat_idx, entry, -h), &batch, &targets);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.as_slice()[entry];
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (analytic - numeric).abs() / denom <= 1e-4,
                "{} {name}[{entry}]: analytic {analytic} vs numeric {numeric}",
                config.architecture
            );
        }
    }
}

#[test]
fn gradients_match_finite_differences_feedforward() {
    check_model_gradients(&toy(Architecture::Feedforward, true));
}

#[test]
fn gradients_match_finite_differences_lstm() {
    check_model_gradients(&toy(Architecture::Lstm, true));
}

#[test]
fn gradients_match_finite_differences_gru() {
    check_model_gradients(&toy(Architecture::Gru, true));
}

#[test]
fn gradients_match_finite_differences_attention() {
    check_model_gradients(&toy(Architecture::Attention, true));
}

#[test]
fn feedforward_learns_a_constant_target() {
    let mut config = toy(Architecture::Feedforward, false);
    config.learning_rate = 0.01;
    config.iterations = 1_200;
    config.batch_size = 8;
    config.log_every = 100;
    let mut ds = random_dataset(5, 40, config.window, config.input_dim);
    ds.targets = vec![7.0; ds.len()];

    let run = train(&config, &ds, &empty_dataset()).unwrap();
    let first = run.model.history.first().unwrap().train_mse;
    let last = run.model.history.last().unwrap().train_mse;
    assert!(first > 10.0, "initial loss should be near 49, got {first}");
    assert!(last < 0.05, "constant target should be learned, got {last}");
    for f in &ds.features {
        let pred = run.model.forward(f).unwrap();
        assert!((pred - 7.0).abs() < 0.5, "prediction {pred} is far from 7");
    }
    assert!(run.best.is_none(), "no validation set means no best snapshot");
}

#[test]
fn feedforward_tracks_a_linear_speed_target() {
    let mut config = toy(Architecture::Feedforward, false);
    config.ff_widths = vec![16, 16];
    config.learning_rate = 0.01;
    config.iterations = 1_500;
    config.batch_size = 10;
    let w = config.window;
    let d = config.input_dim;

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // Windows share one base so the speed column is the only signal;
    // standardization would blow tiny per-window noise up to unit scale.
    let base = random_mat(&mut rng, w, d);
    let mut build = |n: usize| {
        let mut features = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let speed = rng.random_range(0.5..2.0);
            let mut f = base.clone();
            for i in 0..w {
                f.row_mut(i)[11] = speed;
            }
            features.push(f);
            targets.push(4.0 * speed + 1.0);
        }
        let ids = (0..n as u64).collect();
        Dataset { features, targets, agent_ids: ids }
    };
    let train_set = build(60);
    let val_set = build(20);

    let run = train(&config, &train_set, &val_set).unwrap();
    let preds = run.model.batch_forward(&val_set.features).unwrap();
    let mse: f64 = preds
        .iter()
        .zip(&val_set.targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / preds.len() as f64;
    let mean = val_set.targets.iter().sum::<f64>() / val_set.targets.len() as f64;
    let var = val_set
        .targets
        .iter()
        .map(|t| (t - mean) * (t - mean))
        .sum::<f64>()
        / val_set.targets.len() as f64;
    assert!(
        mse.sqrt() < 0.2 * var.sqrt(),
        "val RMSE {} should beat 20% of target std {}",
        mse.sqrt(),
        var.sqrt()
    );
    assert!(run.best.is_some());
}

#[test]
fn recurrent_models_are_order_sensitive() {
    for arch in [Architecture::Lstm, Architecture::Gru] {
        let mut config = toy(arch, true);
        config.learning_rate = 0.003;
        config.iterations = 150;
        let ds = random_dataset(31, 24, config.window, config.input_dim);
        let run = train(&config, &ds, &empty_dataset()).unwrap();

        let x = &ds.features[0];
        let reversed = Mat::from_fn(x.rows(), x.cols(), |i, j| x.get(x.rows() - 1 - i, j));
        let fwd = run.model.forward(x).unwrap();
        let rev = run.model.forward(&reversed).unwrap();
        assert!(
            (fwd - rev).abs() > 1e-6,
            "{arch} should react to input order: {fwd} vs {rev}"
        );
    }
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    let config = toy(Architecture::Attention, true);
    let params = init_params(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let sample = random_mat(&mut rng, 5, config.input_dim);
    let shift = 2;
    let rotated = Mat::from_fn(sample.rows(), sample.cols(), |i, j| {
        sample.get((i + shift) % sample.rows(), j)
    });

    let encode = |input: &Mat, with_positional: bool| -> Mat {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let out = encode_sample(&mut tape, &config, &bound, input, with_positional);
        tape.value(out).clone()
    };

    let plain = encode(&sample, false);
    let plain_rot = encode(&rotated, false);
    for i in 0..sample.rows() {
        let expect = plain.row((i + shift) % sample.rows());
        for (a, b) in plain_rot.row(i).iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "encoder must commute with row permutation");
        }
    }

    // With positions added the same rotation must change the rows.
    let positioned = encode(&sample, true);
    let positioned_rot = encode(&rotated, true);
    let mut max_diff = 0.0f64;
    for i in 0..sample.rows() {
        let expect = positioned.row((i + shift) % sample.rows());
        for (a, b) in positioned_rot.row(i).iter().zip(expect) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    assert!(max_diff > 1e-6, "positional encoding should break equivariance");
}

#[test]
fn training_is_bit_reproducible() {
    let mut config = toy(Architecture::Gru, true);
    config.iterations = 60;
    let train_set = random_dataset(77, 20, config.window, config.input_dim);
    let val_set = random_dataset(78, 6, config.window, config.input_dim);
    let a = train(&config, &train_set, &val_set).unwrap();
    let b = train(&config, &train_set, &val_set).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.best, b.best);
    assert_eq!(a.model.history, b.model.history);
}

#[test]
fn checkpoint_round_trips_exactly() {
    let mut config = toy(Architecture::Feedforward, true);
    config.iterations = 30;
    let train_set = random_dataset(55, 16, config.window, config.input_dim);
    let val_set = random_dataset(56, 5, config.window, config.input_dim);
    let run = train(&config, &train_set, &val_set).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    run.model.save(&path).unwrap();
    let loaded = TrainedModel::load(&path).unwrap();
    assert_eq!(run.model, loaded);

    let probe = &train_set.features[3];
    let before = run.model.forward(probe).unwrap();
    let after = loaded.forward(probe).unwrap();
    assert_eq!(before.to_bits(), after.to_bits());

    let missing = TrainedModel::load(&dir.path().join("absent.json"));
    assert!(matches!(missing, Err(PredictError::Io { action: "read", .. })));
}

#[test]
fn training_log_records_wall_clock() {
    let entries = vec![
        TrainLogEntry {
            step: 0,
            train_mse: 25.0,
            val_mse: None,
            wall_seconds: 0.5,
        },
        TrainLogEntry {
            step: 100,
            train_mse: 3.25,
            val_mse: Some(4.5),
            wall_seconds: 1.25,
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    write_training_log(&path, &entries).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], TRAINING_LOG_HEADER);
    assert_eq!(lines[1], "0,25,,0.5");
    assert_eq!(lines[2], "100,3.25,4.5,1.25");
}

#[test]
fn non_finite_loss_is_reported_as_divergence() {
    let config = toy(Architecture::Feedforward, true);
    let mut ds = random_dataset(5, 8, config.window, config.input_dim);
    ds.targets[2] = f64::NAN;
    let err = train(&config, &ds, &empty_dataset()).unwrap_err();
    assert!(matches!(err, PredictError::DivergedTraining { .. }));
}

#[test]
fn empty_train_set_is_rejected() {
    let config = toy(Architecture::Feedforward, true);
    let err = train(&config, &empty_dataset(), &empty_dataset()).unwrap_err();
    assert!(matches!(err, PredictError::EmptyTrainSet));
}

#[test]
fn config_validation_rejects_bad_shapes() {
    let ok = ModelConfig::new(Architecture::Gru, 10, true, 0);
    assert!(ok.validate().is_ok());

    let mut bad = ok.clone();
    bad.window = 1;
    assert!(matches!(bad.validate(), Err(PredictError::BadConfig(_))));

    let mut bad = ok.clone();
    bad.input_dim = 7;
    assert!(matches!(bad.validate(), Err(PredictError::BadConfig(_))));

    let mut bad = ok.clone();
    bad.embed_dim = 30;
    assert!(matches!(bad.validate(), Err(PredictError::BadConfig(_))));

    let mut bad = ok.clone();
    bad.learning_rate = 0.0;
    assert!(matches!(bad.validate(), Err(PredictError::BadConfig(_))));

    let mut bad = ok;
    bad.ff_widths = vec![];
    assert!(matches!(bad.validate(), Err(PredictError::BadConfig(_))));
}

#[test]
fn dimension_mismatch_is_rejected_at_forward() {
    let config = toy(Architecture::Feedforward, true);
    let model = untrained_model(&config);
    let wrong = Mat::zeros(3, config.input_dim);
    let err = model.forward(&wrong).unwrap_err();
    assert!(matches!(
        err,
        PredictError::DimensionMismatch {
            expected_rows: 4,
            got_rows: 3,
            ..
        }
    ));
}

#[test]
fn batch_forward_matches_single_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for arch in ALL_ARCHITECTURES {
        let config = toy(arch, true);
        let model = untrained_model(&config);
        let windows: Vec<Mat> = (0..5)
            .map(|_| random_mat(&mut rng, config.window, config.input_dim))
            .collect();
        let batched = model.batch_forward(&windows).unwrap();
        for (w, b) in windows.iter().zip(&batched) {
            let single = model.forward(w).unwrap();
            assert_eq!(single.to_bits(), b.to_bits(), "{arch} batch row must match");
        }
    }
}

#[test]
fn predictions_align_to_window_ends() {
    let config = toy(Architecture::Gru, true);
    let model = untrained_model(&config);
    let timeline = green_timeline(Area::Crossing1, 0, 12_000, 20_000);
    let points: Vec<TrajectoryPoint> = (0..10)
        .map(|i| point(i * 100, Area::Crossing1, 1.3))
        .collect();
    let traj = Trajectory { agent_id: 3, points };

    let preds = predict_trajectory(&model, &traj, &timeline, &normal_subclass()).unwrap();
    assert_eq!(preds.len(), 7);
    for (k, p) in preds.iter().enumerate() {
        assert_eq!(p.last_index, k + 3);
        assert_eq!(p.timestamp_ms, (k as i64 + 3) * 100);
        assert!((p.target - (0.9 - p.last_index as f64 * 0.1)).abs() < 1e-9);
        assert!(p.predicted.is_finite());
    }

    let short = Trajectory {
        agent_id: 4,
        points: (0..3).map(|i| point(i * 100, Area::Crossing1, 1.3)).collect(),
    };
    let err = predict_trajectory(&model, &short, &timeline, &normal_subclass()).unwrap_err();
    assert!(matches!(
        err,
        PredictError::TrajectoryTooShort {
            agent_id: 4,
            needed: 4,
            got: 3
        }
    ));
}

#[test]
fn positional_encoding_is_bounded_and_row_distinct() {
    let pe = positional_encoding(10, 32);
    assert_eq!(pe.shape(), (10, 32));
    assert!(pe.as_slice().iter().all(|v| v.abs() <= 1.0));
    for i in 0..pe.rows() {
        for k in (i + 1)..pe.rows() {
            let same = pe.row(i).iter().zip(pe.row(k)).all(|(a, b)| a == b);
            assert!(!same, "rows {i} and {k} must differ");
        }
    }
}

#[test]
fn architecture_names_round_trip() {
    for arch in ALL_ARCHITECTURES {
        let s = arch.to_string();
        assert_eq!(s.parse::<Architecture>().unwrap(), arch);
    }
    assert!("transformer".parse::<Architecture>().is_err());
}
