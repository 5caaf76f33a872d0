//! Stage orchestration: synth, preprocess, classify, augment, train,
//! evaluate, decide.
//!
//! Each stage reads the artifacts of its upstream stages from disk, writes
//! its own into `out_dir/<stage>/`, and finishes with a manifest recording
//! input and output digests plus the run seed and config digest. Files that
//! carry wall-clock measurements (training logs, timings.json) are kept out
//! of the manifests so reruns of the same config hash identically.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{
    augment_trajectories, random_selection, read_windows, split_trajectories, write_windows,
    AugmentError, TrainingWindow,
};
use crate::config::{ConfigError, RunConfig};
use crate::evaluate::{
    decide_for_trajectory, evaluate_grid, plot, write_decisions_csv, CellKey, CrossingDecision,
    EvalError, EvalReport,
};
use crate::exec;
use crate::ingest::{
    build_phase_timeline, parse_spat_file, parse_track_file, IngestError, PhaseTimeline,
    TrackParseReport,
};
use crate::manifest::{Manifest, ManifestError};
use crate::predict::{
    build_dataset, predict_trajectory, train, write_training_log, PredictError, TrainedModel,
};
use crate::preprocess::{
    preprocess_pipeline, read_trajectories, write_trajectories, PreprocessError, PreprocessReport,
    Trajectory,
};
use crate::subclass::{
    classify_all, fit_pca, pc1_separation, read_labeled_features, relabel_unknowns, train_svm,
    write_labeled_features, AccuracyReport, SubClassError, SubClassFeatures, SubClassLabel,
    SubClassResult,
};
use crate::synthgen::{generate_scene, inject_anomaly, SynthError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    SubClass(#[from] SubClassError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("failed to {action} {path}: {source}")]
    Io {
        action: &'static str,
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing artifact {path}; run the {stage} stage first")]
    MissingUpstreamArtifact { stage: &'static str, path: PathBuf },
    #[error("run config has no synth section but the synth stage was requested")]
    SynthNotConfigured,
    #[error("the {stage} stage produced no {what}")]
    Empty { stage: &'static str, what: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Preprocess,
    Classify,
    Augment,
    Train,
    Evaluate,
    Decide,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::Preprocess,
        Stage::Classify,
        Stage::Augment,
        Stage::Train,
        Stage::Evaluate,
        Stage::Decide,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Preprocess => "preprocess",
            Stage::Classify => "classify",
            Stage::Augment => "augment",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Decide => "decide",
        }
    }

    pub fn dir(self, config: &RunConfig) -> PathBuf {
        config.paths.out_dir.join(self.name())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|stage| stage.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const PREPROCESS_REPORT_FILE: &str = "report.json";
pub const LABELED_FEATURES_FILE: &str = "labeled_features.csv";
pub const SVM_MODEL_FILE: &str = "svm_model.json";
pub const PCA_MODEL_FILE: &str = "pca_model.json";
pub const CLASSIFY_METRICS_FILE: &str = "classify_metrics.json";
pub const PCA_SCATTER_CSV: &str = "pca_scatter.csv";
pub const PCA_SCATTER_PNG: &str = "pca_scatter.png";
pub const SPLIT_FILE: &str = "split.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const EVAL_REPORT_FILE: &str = "report.json";
pub const BOX_PLOT_CSV: &str = "box_plot.csv";
pub const BOX_PLOT_PNG: &str = "box_plot.png";
pub const ABS_ERROR_CSV: &str = "abs_error.csv";
pub const ABS_ERROR_PNG: &str = "abs_error.png";
pub const PRED_VS_TARGET_CSV: &str = "pred_vs_target.csv";
pub const PRED_VS_TARGET_PNG: &str = "pred_vs_target.png";
pub const DECISIONS_FILE: &str = "decisions.csv";

pub fn windows_file(w: usize) -> String {
    format!("windows_w{w}.csv")
}

pub fn model_file(key: &CellKey) -> String {
    format!("{key}.model.json")
}

pub fn log_file(key: &CellKey) -> String {
    format!("{key}.log.csv")
}

pub fn loss_curve_file(key: &CellKey) -> String {
    format!("{key}.loss.png")
}

/// Trajectory-level split, stored as agent ids so it stays valid across
/// re-reads of the trajectory file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train_agents: Vec<u64>,
    pub val_agents: Vec<u64>,
    pub test_agents: Vec<u64>,
}

/// Everything the classify stage measured about its own output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyMetrics {
    pub accuracy: AccuracyReport,
    /// Gap between class means along PC1, in pooled-std units; empty when
    /// either class is missing.
    pub pc1_separation: Option<f64>,
    pub relabeled: usize,
    pub label_counts: BTreeMap<String, usize>,
}

/// Parse- and filter-level counts from the preprocess stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessStageReport {
    pub parse: TrackParseReport,
    pub preprocess: PreprocessReport,
}

fn io_err<'a>(
    action: &'static str,
    path: &'a Path,
) -> impl FnOnce(std::io::Error) -> PipelineError + 'a {
    move |source| PipelineError::Io {
        action,
        path: path.to_path_buf(),
        source,
    }
}

fn create_stage_dir(stage: Stage, config: &RunConfig) -> Result<PathBuf, PipelineError> {
    let dir = stage.dir(config);
    std::fs::create_dir_all(&dir).map_err(io_err("create", &dir))?;
    Ok(dir)
}

/// Errors with the stage that should have produced `path` when it is absent.
fn require(path: &Path, produced_by: &'static str) -> Result<(), PipelineError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::MissingUpstreamArtifact {
            stage: produced_by,
            path: path.to_path_buf(),
        })
    }
}

/// Stage that owns the raw track and SPaT files.
fn input_stage(config: &RunConfig) -> &'static str {
    if config.synth.is_some() {
        "synth"
    } else {
        "input"
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("stage report serializes");
    std::fs::write(path, text).map_err(io_err("write", path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err("read", path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Io {
        action: "parse",
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, source),
    })
}

fn load_timeline(config: &RunConfig) -> Result<PhaseTimeline, PipelineError> {
    require(&config.paths.spat, input_stage(config))?;
    let events = parse_spat_file(&config.paths.spat)?;
    Ok(build_phase_timeline(&events, &config.phase_map)?)
}

fn load_trajectories(config: &RunConfig) -> Result<Vec<Trajectory>, PipelineError> {
    let path = Stage::Preprocess.dir(config).join(TRAJECTORIES_FILE);
    require(&path, "preprocess")?;
    Ok(read_trajectories(&path)?)
}

fn load_subclass_map(config: &RunConfig) -> Result<BTreeMap<u64, SubClassResult>, PipelineError> {
    let path = Stage::Classify.dir(config).join(LABELED_FEATURES_FILE);
    require(&path, "classify")?;
    let rows = read_labeled_features(&path)?;
    Ok(rows.into_iter().map(|r| (r.agent_id, r.result)).collect())
}

fn load_split(config: &RunConfig) -> Result<SplitFile, PipelineError> {
    let path = Stage::Augment.dir(config).join(SPLIT_FILE);
    require(&path, "augment")?;
    read_json(&path)
}

fn new_manifest(stage: Stage, config: &RunConfig) -> Manifest {
    Manifest::new(stage.name(), config.seed, config.digest())
}

/// Generates the synthetic scene and writes tracks, SPaT log, and ground
/// truth. Requires a synth section in the config.
pub fn run_synth(config: &RunConfig) -> Result<(), PipelineError> {
    let synth = config.synth.as_ref().ok_or(PipelineError::SynthNotConfigured)?;
    let dir = create_stage_dir(Stage::Synth, config)?;
    let mut scene = generate_scene(&synth.scenario)?;
    if let Some(kind) = synth.anomaly {
        scene = inject_anomaly(&scene, kind)?;
    }
    let paths = scene.write(&dir)?;
    if paths.tracks != config.paths.tracks {
        log::warn!(
            "synth wrote {} but paths.tracks points at {}",
            paths.tracks.display(),
            config.paths.tracks.display()
        );
    }
    let mut manifest = new_manifest(Stage::Synth, config);
    manifest.add_output(&paths.tracks)?;
    manifest.add_output(&paths.spat)?;
    manifest.add_output(&paths.ground_truth)?;
    manifest.write(&dir)?;
    Ok(())
}

/// Parses the track table, applies calibration and the trajectory filter
/// rules, and writes the surviving trajectories plus a count report.
pub fn run_preprocess(config: &RunConfig) -> Result<(), PipelineError> {
    require(&config.paths.tracks, input_stage(config))?;
    let dir = create_stage_dir(Stage::Preprocess, config)?;
    let outcome = parse_track_file(&config.paths.tracks)?;
    let result = preprocess_pipeline(&outcome.records, &config.areas, &config.calibration)?;
    if result.trajectories.is_empty() {
        return Err(PipelineError::Empty {
            stage: "preprocess",
            what: "trajectories".into(),
        });
    }
    let traj_path = dir.join(TRAJECTORIES_FILE);
    write_trajectories(&traj_path, &result.trajectories)?;
    let report_path = dir.join(PREPROCESS_REPORT_FILE);
    write_json(
        &report_path,
        &PreprocessStageReport {
            parse: outcome.report,
            preprocess: result.report,
        },
    )?;
    let mut manifest = new_manifest(Stage::Preprocess, config);
    manifest.add_input(&config.paths.tracks)?;
    manifest.add_output(&traj_path)?;
    manifest.add_output(&report_path)?;
    manifest.write(&dir)?;
    Ok(())
}

/// Criteria labels, SVM training on the labeled rows, relabeling of the
/// unknowns, and the PCA separability check with its scatter figure.
pub fn run_classify(config: &RunConfig) -> Result<(), PipelineError> {
    let trajectories = load_trajectories(config)?;
    let timeline = load_timeline(config)?;
    let dir = create_stage_dir(Stage::Classify, config)?;

    let mut rows = classify_all(&trajectories, &timeline, &config.criteria)?;
    let features: Vec<SubClassFeatures> = rows.iter().map(|r| r.features).collect();
    let criteria_labels: Vec<SubClassLabel> = rows.iter().map(|r| r.result.label).collect();
    let (svm, accuracy) = train_svm(&features, &criteria_labels, &config.svm)?;
    let relabeled = relabel_unknowns(&svm, &mut rows)?;

    let pca = fit_pca(&features)?;
    // Separation is measured over the rows that ended up labeled; the
    // unknown remainder has no side to belong to.
    let labeled: Vec<(SubClassFeatures, bool)> = rows
        .iter()
        .filter(|r| r.result.label != SubClassLabel::Unknown)
        .map(|r| (r.features, r.result.label == SubClassLabel::Normal))
        .collect();
    let labeled_features: Vec<SubClassFeatures> = labeled.iter().map(|(f, _)| *f).collect();
    let separation = pc1_separation(&pca, &labeled_features, |i| labeled[i].1);

    let mut label_counts = BTreeMap::new();
    for row in &rows {
        *label_counts.entry(row.result.label.to_string()).or_insert(0) += 1;
    }

    let features_path = dir.join(LABELED_FEATURES_FILE);
    write_labeled_features(&features_path, &rows)?;
    let svm_path = dir.join(SVM_MODEL_FILE);
    svm.save(&svm_path)?;
    let pca_path = dir.join(PCA_MODEL_FILE);
    pca.save(&pca_path)?;
    let metrics_path = dir.join(CLASSIFY_METRICS_FILE);
    write_json(
        &metrics_path,
        &ClassifyMetrics {
            accuracy,
            pc1_separation: separation,
            relabeled,
            label_counts,
        },
    )?;

    let scatter_csv = dir.join(PCA_SCATTER_CSV);
    let scatter_png = dir.join(PCA_SCATTER_PNG);
    let mut csv_rows = Vec::with_capacity(rows.len());
    let mut points = Vec::with_capacity(rows.len());
    for row in &rows {
        let (pc1, pc2) = pca.project(&row.features);
        csv_rows.push((pc1, pc2, row.result.label.to_string()));
        points.push((pc1, pc2, row.result.label.code() as usize));
    }
    plot::write_xy_csv(&scatter_csv, "pc1,pc2,label", &csv_rows)?;
    plot::render_scatter(&scatter_png, &points)?;

    let mut manifest = new_manifest(Stage::Classify, config);
    manifest.add_input(&Stage::Preprocess.dir(config).join(TRAJECTORIES_FILE))?;
    manifest.add_input(&config.paths.spat)?;
    for path in [
        &features_path,
        &svm_path,
        &pca_path,
        &metrics_path,
        &scatter_csv,
        &scatter_png,
    ] {
        manifest.add_output(path)?;
    }
    manifest.write(&dir)?;
    Ok(())
}

/// Mixes the val seed away from the train/test split seed.
const VAL_SPLIT_MIX: u64 = 0xD1B5_4A32_D192_ED03;
/// Mixes the per-window-length sampling seed.
const SAMPLE_MIX: u64 = 0x2545_F491_4F6C_DD1D;

/// Splits trajectories into train/val/test by agent and materializes the
/// sliding windows for every configured window length.
pub fn run_augment(config: &RunConfig) -> Result<(), PipelineError> {
    let trajectories = load_trajectories(config)?;
    let dir = create_stage_dir(Stage::Augment, config)?;

    let (train_idx, test_idx) =
        split_trajectories(&trajectories, config.augment.train_ratio, config.seed);
    // Validation trajectories come out of the train side; test stays
    // untouched as the held-out set.
    let mut pool = train_idx;
    let val_count = if config.augment.val_ratio > 0.0 && pool.len() >= 2 {
        (((config.augment.val_ratio * pool.len() as f64).round() as usize).max(1))
            .min(pool.len() - 1)
    } else {
        0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ VAL_SPLIT_MIX);
    pool.shuffle(&mut rng);
    let val_idx = pool.split_off(pool.len() - val_count);
    let agent_ids = |mut idx: Vec<usize>| -> Vec<u64> {
        idx.sort_unstable();
        idx.into_iter().map(|i| trajectories[i].agent_id).collect()
    };
    let split = SplitFile {
        train_agents: agent_ids(pool),
        val_agents: agent_ids(val_idx),
        test_agents: agent_ids(test_idx),
    };
    let split_path = dir.join(SPLIT_FILE);
    write_json(&split_path, &split)?;

    let mut window_paths = Vec::new();
    for &w in &config.augment.windows {
        let mut windows = augment_trajectories(&trajectories, w);
        if let Some(m) = config.augment.sample {
            if m < windows.len() {
                windows = random_selection(windows, m, config.seed ^ (w as u64 ^ SAMPLE_MIX))?;
            }
        }
        if windows.is_empty() {
            return Err(PipelineError::Empty {
                stage: "augment",
                what: format!("windows of length {w}"),
            });
        }
        let path = dir.join(windows_file(w));
        write_windows(&path, &windows)?;
        window_paths.push(path);
    }

    let mut manifest = new_manifest(Stage::Augment, config);
    manifest.add_input(&Stage::Preprocess.dir(config).join(TRAJECTORIES_FILE))?;
    manifest.add_output(&split_path)?;
    for path in &window_paths {
        manifest.add_output(path)?;
    }
    manifest.write(&dir)?;
    Ok(())
}

/// Trains every grid cell and writes one checkpoint, training log, and loss
/// figure per cell. Logs and timings carry wall-clock values and stay out
/// of the manifest.
pub fn run_train(config: &RunConfig) -> Result<(), PipelineError> {
    let timeline = load_timeline(config)?;
    let subclass_map = load_subclass_map(config)?;
    let split = load_split(config)?;
    let dir = create_stage_dir(Stage::Train, config)?;

    let augment_dir = Stage::Augment.dir(config);
    let mut windows_by_w: BTreeMap<usize, Vec<TrainingWindow>> = BTreeMap::new();
    for &w in &config.train.windows {
        if windows_by_w.contains_key(&w) {
            continue;
        }
        let path = augment_dir.join(windows_file(w));
        require(&path, "augment")?;
        windows_by_w.insert(w, read_windows(&path)?);
    }

    let train_agents: BTreeSet<u64> = split.train_agents.iter().copied().collect();
    let val_agents: BTreeSet<u64> = split.val_agents.iter().copied().collect();

    let cells = config.grid_cells();
    let results: Vec<Result<(CellKey, f64), PipelineError>> =
        exec::map_collect(&cells, |cell| {
            let key = CellKey {
                architecture: cell.architecture,
                window: cell.window,
                with_subclass: cell.with_subclass,
            };
            let windows = &windows_by_w[&cell.window];
            let pick = |set: &BTreeSet<u64>| -> Vec<TrainingWindow> {
                windows
                    .iter()
                    .filter(|w| set.contains(&w.agent_id))
                    .cloned()
                    .collect()
            };
            let train_windows = pick(&train_agents);
            let val_windows = pick(&val_agents);
            let model_config = config.model_config(cell);
            let train_set =
                build_dataset(&train_windows, &timeline, cell.with_subclass, &subclass_map)?;
            let val_set =
                build_dataset(&val_windows, &timeline, cell.with_subclass, &subclass_map)?;

            let started = Instant::now();
            let run = train(&model_config, &train_set, &val_set)?;
            let wall = started.elapsed().as_secs_f64();

            run.model.save(&dir.join(model_file(&key)))?;
            write_training_log(&dir.join(log_file(&key)), &run.log)?;
            let train_curve: Vec<(f64, f64)> = run
                .model
                .history
                .iter()
                .map(|h| (h.step as f64, h.train_mse))
                .collect();
            let val_curve: Vec<(f64, f64)> = run
                .model
                .history
                .iter()
                .filter_map(|h| h.val_mse.map(|v| (h.step as f64, v)))
                .collect();
            plot::render_series(&dir.join(loss_curve_file(&key)), &[train_curve, val_curve])?;
            Ok((key, wall))
        });

    let mut timings = BTreeMap::new();
    let mut manifest = new_manifest(Stage::Train, config);
    manifest.add_input(&augment_dir.join(SPLIT_FILE))?;
    for &w in windows_by_w.keys() {
        manifest.add_input(&augment_dir.join(windows_file(w)))?;
    }
    manifest.add_input(&Stage::Classify.dir(config).join(LABELED_FEATURES_FILE))?;
    manifest.add_input(&config.paths.spat)?;
    for result in results {
        let (key, wall) = result?;
        timings.insert(key.to_string(), wall);
        manifest.add_output(&dir.join(model_file(&key)))?;
        manifest.add_output(&dir.join(loss_curve_file(&key)))?;
    }
    write_json(&dir.join(TIMINGS_FILE), &timings)?;
    manifest.write(&dir)?;
    Ok(())
}

/// Runs every trained cell over the held-out trajectories and writes the
/// metric report, the per-cell RMSE box plot, and per-trajectory error
/// figures for the best cell.
pub fn run_evaluate(config: &RunConfig) -> Result<(), PipelineError> {
    let trajectories = load_trajectories(config)?;
    let timeline = load_timeline(config)?;
    let subclass_map = load_subclass_map(config)?;
    let split = load_split(config)?;
    let dir = create_stage_dir(Stage::Evaluate, config)?;
    let train_dir = Stage::Train.dir(config);

    let test_agents: BTreeSet<u64> = split.test_agents.iter().copied().collect();
    let test_trajectories: Vec<Trajectory> = trajectories
        .iter()
        .filter(|t| test_agents.contains(&t.agent_id))
        .cloned()
        .collect();
    if test_trajectories.is_empty() {
        return Err(PipelineError::Empty {
            stage: "evaluate",
            what: "held-out trajectories".into(),
        });
    }

    let mut models = Vec::new();
    let mut model_paths = Vec::new();
    for cell in config.grid_cells() {
        let key = CellKey {
            architecture: cell.architecture,
            window: cell.window,
            with_subclass: cell.with_subclass,
        };
        let path = train_dir.join(model_file(&key));
        require(&path, "train")?;
        models.push(TrainedModel::load(&path)?);
        model_paths.push(path);
    }

    let report = evaluate_grid(&models, &test_trajectories, &timeline, &subclass_map)?;
    report.save(&dir)?;

    let box_groups: Vec<(String, Vec<(u64, f64)>)> = report
        .cells
        .iter()
        .map(|cell| {
            (
                cell.key.to_string(),
                cell.per_trajectory
                    .iter()
                    .map(|t| (t.agent_id, t.rmse))
                    .collect(),
            )
        })
        .collect();
    let box_csv = dir.join(BOX_PLOT_CSV);
    plot::write_box_plot_csv(&box_csv, &box_groups)?;
    let summaries: Vec<_> = report
        .cells
        .iter()
        .filter_map(|cell| cell.box_plot.clone())
        .collect();
    let box_png = dir.join(BOX_PLOT_PNG);
    plot::render_box_plot(&box_png, &summaries)?;

    // Per-trajectory error traces and the prediction scatter for the best
    // cell. Short trajectories that fit no window are skipped.
    let best_key = report.best.clone().ok_or(PipelineError::Empty {
        stage: "evaluate",
        what: "best cell".into(),
    })?;
    let best_model = models
        .iter()
        .find(|m| CellKey::of(m) == best_key)
        .expect("best key comes from the evaluated cells");
    let unknown = SubClassResult {
        label: SubClassLabel::Unknown,
        source: crate::subclass::LabelSource::FallbackUnknown,
        confidence: 0.0,
    };
    let mut error_rows = Vec::new();
    let mut error_series = Vec::new();
    let mut scatter_rows = Vec::new();
    let mut scatter_points = Vec::new();
    for traj in &test_trajectories {
        let subclass = subclass_map.get(&traj.agent_id).unwrap_or(&unknown);
        let predictions = match predict_trajectory(best_model, traj, &timeline, subclass) {
            Ok(p) => p,
            Err(PredictError::TrajectoryTooShort { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        for p in &predictions {
            scatter_rows.push((p.target, p.predicted, traj.agent_id.to_string()));
            scatter_points.push((p.target, p.predicted, subclass.label.code() as usize));
        }
        let series = crate::evaluate::abs_error_series(&predictions);
        for &(t, err) in &series {
            error_rows.push((t, err, traj.agent_id.to_string()));
        }
        error_series.push(series);
    }
    let abs_csv = dir.join(ABS_ERROR_CSV);
    plot::write_xy_csv(&abs_csv, "seconds,abs_error,agent_id", &error_rows)?;
    let abs_png = dir.join(ABS_ERROR_PNG);
    plot::render_series(&abs_png, &error_series)?;
    let scatter_csv = dir.join(PRED_VS_TARGET_CSV);
    plot::write_xy_csv(&scatter_csv, "target,predicted,agent_id", &scatter_rows)?;
    let scatter_png = dir.join(PRED_VS_TARGET_PNG);
    plot::render_scatter(&scatter_png, &scatter_points)?;

    let mut manifest = new_manifest(Stage::Evaluate, config);
    manifest.add_input(&Stage::Preprocess.dir(config).join(TRAJECTORIES_FILE))?;
    manifest.add_input(&Stage::Augment.dir(config).join(SPLIT_FILE))?;
    manifest.add_input(&Stage::Classify.dir(config).join(LABELED_FEATURES_FILE))?;
    manifest.add_input(&config.paths.spat)?;
    for path in &model_paths {
        manifest.add_input(path)?;
    }
    for name in [
        EVAL_REPORT_FILE,
        BOX_PLOT_CSV,
        BOX_PLOT_PNG,
        ABS_ERROR_CSV,
        ABS_ERROR_PNG,
        PRED_VS_TARGET_CSV,
        PRED_VS_TARGET_PNG,
    ] {
        manifest.add_output(&dir.join(name))?;
    }
    manifest.write(&dir)?;
    Ok(())
}

/// Runs the best cell's model over the held-out trajectories and writes
/// per-frame crossing-feasibility decisions.
pub fn run_decide(config: &RunConfig) -> Result<(), PipelineError> {
    let trajectories = load_trajectories(config)?;
    let timeline = load_timeline(config)?;
    let subclass_map = load_subclass_map(config)?;
    let split = load_split(config)?;
    let report_path = Stage::Evaluate.dir(config).join(EVAL_REPORT_FILE);
    require(&report_path, "evaluate")?;
    let report = EvalReport::load(&report_path)?;
    let dir = create_stage_dir(Stage::Decide, config)?;

    let best_key = report.best.clone().ok_or(PipelineError::Empty {
        stage: "evaluate",
        what: "best cell".into(),
    })?;
    let model_path = Stage::Train.dir(config).join(model_file(&best_key));
    require(&model_path, "train")?;
    let model = TrainedModel::load(&model_path)?;

    let test_agents: BTreeSet<u64> = split.test_agents.iter().copied().collect();
    let unknown = SubClassResult {
        label: SubClassLabel::Unknown,
        source: crate::subclass::LabelSource::FallbackUnknown,
        confidence: 0.0,
    };
    let mut decisions: Vec<CrossingDecision> = Vec::new();
    for traj in trajectories.iter().filter(|t| test_agents.contains(&t.agent_id)) {
        let subclass = subclass_map.get(&traj.agent_id).unwrap_or(&unknown);
        match decide_for_trajectory(&model, traj, &timeline, subclass, config.buffer_seconds) {
            Ok(mut d) => decisions.append(&mut d),
            // Approach-only or too-short trajectories produce no windows.
            Err(EvalError::EmptyTestSet) => continue,
            Err(EvalError::Predict(PredictError::TrajectoryTooShort { .. })) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    if decisions.is_empty() {
        return Err(PipelineError::Empty {
            stage: "decide",
            what: "decisions".into(),
        });
    }
    let decisions_path = dir.join(DECISIONS_FILE);
    write_decisions_csv(&decisions_path, &decisions)?;

    let mut manifest = new_manifest(Stage::Decide, config);
    manifest.add_input(&report_path)?;
    manifest.add_input(&model_path)?;
    manifest.add_input(&Stage::Preprocess.dir(config).join(TRAJECTORIES_FILE))?;
    manifest.add_input(&Stage::Augment.dir(config).join(SPLIT_FILE))?;
    manifest.add_input(&Stage::Classify.dir(config).join(LABELED_FEATURES_FILE))?;
    manifest.add_output(&decisions_path)?;
    manifest.write(&dir)?;
    Ok(())
}

pub fn run_stage(config: &RunConfig, stage: Stage) -> Result<(), PipelineError> {
    match stage {
        Stage::Synth => run_synth(config),
        Stage::Preprocess => run_preprocess(config),
        Stage::Classify => run_classify(config),
        Stage::Augment => run_augment(config),
        Stage::Train => run_train(config),
        Stage::Evaluate => run_evaluate(config),
        Stage::Decide => run_decide(config),
    }
}

/// Runs every stage in order; synth only when configured. Returns the
/// stages that ran.
pub fn run_all(config: &RunConfig) -> Result<Vec<Stage>, PipelineError> {
    config.validate()?;
    let mut ran = Vec::new();
    for stage in Stage::ALL {
        if stage == Stage::Synth && config.synth.is_none() {
            continue;
        }
        log::info!("running stage {stage}");
        run_stage(config, stage)?;
        ran.push(stage);
    }
    Ok(ran)
}
