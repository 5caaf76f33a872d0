//! Full pipeline runs on a small synthetic scene: artifact layout, stage
//! ordering, and rerun determinism.

use std::collections::BTreeSet;
use std::path::Path;

use crosstime_core::config::RunConfig;
use crosstime_core::evaluate::EvalReport;
use crosstime_core::manifest::{Manifest, MANIFEST_FILE};
use crosstime_core::pipeline::{
    self, run_all, run_stage, PipelineError, PreprocessStageReport, SplitFile, Stage,
};
use crosstime_core::predict::Architecture;
use crosstime_core::preprocess::read_trajectories;

/// Small scene and grid so a full run stays in test-suite territory.
fn small_config(out_dir: &Path, seed: u64) -> RunConfig {
    let mut config = RunConfig::synthetic_default(out_dir, seed);
    let scenario = &mut config.synth.as_mut().unwrap().scenario;
    scenario.n_normal = 16;
    scenario.n_wheelchair = 12;
    scenario.n_vehicles = 2;
    scenario.n_bystanders = 2;
    scenario.n_noise_tracks = 2;
    config.augment.windows = vec![6];
    config.train.windows = vec![6];
    config.train.architectures = vec![Architecture::Feedforward, Architecture::Gru];
    config.train.iterations = 40;
    config.train.batch_size = 16;
    config.train.log_every = 20;
    config
}

fn read_manifest(config: &RunConfig, stage: Stage) -> Manifest {
    Manifest::read(&stage.dir(config).join(MANIFEST_FILE)).unwrap()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_run_rerun_and_relocation_agree() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 42);
    config.validate().unwrap();

    let ran = run_all(&config).unwrap();
    assert_eq!(ran, Stage::ALL.to_vec(), "synth configured, all stages run");

    // Every stage leaves a manifest carrying the same config digest.
    let digest = config.digest();
    for stage in Stage::ALL {
        let manifest = read_manifest(&config, stage);
        assert_eq!(manifest.stage, stage.name());
        assert_eq!(manifest.seed, 42);
        assert_eq!(manifest.config_digest, digest);
        assert!(!manifest.outputs.is_empty(), "{stage} lists outputs");
    }

    // Preprocess kept some trajectories and counted the rest.
    let report: PreprocessStageReport = read_json(
        &Stage::Preprocess.dir(&config).join(pipeline::PREPROCESS_REPORT_FILE),
    );
    let kept = report.preprocess.kept_trajectories;
    assert!(kept > 20, "most pedestrians survive the filter, kept {kept}");
    assert_eq!(
        report.preprocess.input_trajectories,
        // 16 normals + 12 wheelchairs + 2 vehicles + 2 bystanders + 2 noise.
        34,
        "every generated agent reaches the filter"
    );

    // Classify labeled every kept trajectory, one way or another.
    let metrics: pipeline::ClassifyMetrics = read_json(
        &Stage::Classify.dir(&config).join(pipeline::CLASSIFY_METRICS_FILE),
    );
    let labeled_total: usize = metrics.label_counts.values().sum();
    assert_eq!(labeled_total, kept);
    assert!(metrics.accuracy.cv_mean_accuracy >= 0.5);
    assert!(metrics.accuracy.held_out_accuracy >= 0.5);
    assert!(metrics.pc1_separation.unwrap() > 0.0);

    // The split partitions exactly the kept agents.
    let split: SplitFile = read_json(&Stage::Augment.dir(&config).join(pipeline::SPLIT_FILE));
    let trajectories =
        read_trajectories(&Stage::Preprocess.dir(&config).join(pipeline::TRAJECTORIES_FILE))
            .unwrap();
    let all_agents: BTreeSet<u64> = trajectories.iter().map(|t| t.agent_id).collect();
    let mut split_agents = BTreeSet::new();
    for id in split
        .train_agents
        .iter()
        .chain(&split.val_agents)
        .chain(&split.test_agents)
    {
        assert!(split_agents.insert(*id), "agent {id} assigned twice");
    }
    assert_eq!(split_agents, all_agents);
    assert!(!split.train_agents.is_empty());
    assert!(!split.val_agents.is_empty());
    assert!(!split.test_agents.is_empty());

    // One checkpoint, log, and loss figure per grid cell; wall-clock files
    // exist but stay out of the manifest.
    let train_dir = Stage::Train.dir(&config);
    let cells = config.grid_cells();
    assert_eq!(cells.len(), 4);
    let train_manifest = read_manifest(&config, Stage::Train);
    for cell in &cells {
        let key = crosstime_core::evaluate::CellKey {
            architecture: cell.architecture,
            window: cell.window,
            with_subclass: cell.with_subclass,
        };
        assert!(train_dir.join(pipeline::model_file(&key)).is_file());
        assert!(train_dir.join(pipeline::log_file(&key)).is_file());
        assert!(train_dir.join(pipeline::loss_curve_file(&key)).is_file());
        assert!(train_manifest.outputs.contains_key(&pipeline::model_file(&key)));
        assert!(!train_manifest.outputs.contains_key(&pipeline::log_file(&key)));
    }
    assert!(train_dir.join(pipeline::TIMINGS_FILE).is_file());
    assert!(!train_manifest.outputs.contains_key(pipeline::TIMINGS_FILE));

    // Evaluation covered the whole grid and picked a best cell.
    let eval_dir = Stage::Evaluate.dir(&config);
    let eval_report = EvalReport::load(&eval_dir.join(pipeline::EVAL_REPORT_FILE)).unwrap();
    assert_eq!(eval_report.cells.len(), 4);
    let best = eval_report.best.clone().unwrap();
    let best_mse = eval_report
        .cells
        .iter()
        .find(|c| c.key == best)
        .unwrap()
        .test_mse;
    assert!(eval_report.cells.iter().all(|c| c.test_mse >= best_mse));
    for name in [
        pipeline::BOX_PLOT_CSV,
        pipeline::BOX_PLOT_PNG,
        pipeline::ABS_ERROR_CSV,
        pipeline::ABS_ERROR_PNG,
        pipeline::PRED_VS_TARGET_CSV,
        pipeline::PRED_VS_TARGET_PNG,
    ] {
        assert!(eval_dir.join(name).is_file(), "missing {name}");
    }
    let eval_manifest = read_manifest(&config, Stage::Evaluate);
    assert!(!eval_manifest.outputs.contains_key(pipeline::TIMINGS_FILE));

    // Decisions exist for held-out agents and obey the verdict vocabulary.
    let decisions =
        std::fs::read_to_string(Stage::Decide.dir(&config).join(pipeline::DECISIONS_FILE))
            .unwrap();
    let mut lines = decisions.lines();
    assert_eq!(
        lines.next().unwrap(),
        "agent_id,t_now_ms,predicted_arrival,left_green,buffer,green_now,verdict"
    );
    let mut n_rows = 0;
    let test_set: BTreeSet<u64> = split.test_agents.iter().copied().collect();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 7, "bad row {line}");
        assert!(test_set.contains(&fields[0].parse::<u64>().unwrap()));
        assert!(fields[6] == "can_cross" || fields[6] == "cannot_cross");
        n_rows += 1;
    }
    assert!(n_rows > 0);

    // Rerunning the identical config rewrites every artifact byte for byte.
    let mut before = Vec::new();
    for stage in Stage::ALL {
        let manifest_path = stage.dir(&config).join(MANIFEST_FILE);
        before.push(std::fs::read(&manifest_path).unwrap());
    }
    let report_before = std::fs::read(eval_dir.join(pipeline::EVAL_REPORT_FILE)).unwrap();
    run_all(&config).unwrap();
    for (stage, old) in Stage::ALL.into_iter().zip(&before) {
        let new = std::fs::read(stage.dir(&config).join(MANIFEST_FILE)).unwrap();
        assert_eq!(&new, old, "{stage} manifest changed across reruns");
    }
    assert_eq!(
        std::fs::read(eval_dir.join(pipeline::EVAL_REPORT_FILE)).unwrap(),
        report_before
    );

    // The same seed in a different directory yields the same artifact
    // hashes: nothing in the outputs depends on where they live.
    let dir_b = tempfile::tempdir().unwrap();
    let config_b = small_config(dir_b.path(), 42);
    run_all(&config_b).unwrap();
    for stage in Stage::ALL {
        let a = read_manifest(&config, stage);
        let b = read_manifest(&config_b, stage);
        assert_eq!(a.outputs, b.outputs, "{stage} outputs differ across dirs");
        assert_eq!(a.inputs, b.inputs, "{stage} inputs differ across dirs");
    }
}

#[test]
fn stages_demand_their_upstream_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 7);

    let err = run_stage(&config, Stage::Preprocess).unwrap_err();
    match err {
        PipelineError::MissingUpstreamArtifact { stage, .. } => assert_eq!(stage, "synth"),
        other => panic!("unexpected error {other}"),
    }
    let err = run_stage(&config, Stage::Train).unwrap_err();
    match err {
        PipelineError::MissingUpstreamArtifact { stage, .. } => assert_eq!(stage, "synth"),
        other => panic!("unexpected error {other}"),
    }
    let err = run_stage(&config, Stage::Decide).unwrap_err();
    assert!(matches!(err, PipelineError::MissingUpstreamArtifact { .. }));

    // With the raw inputs in place the next gap gets named precisely.
    run_stage(&config, Stage::Synth).unwrap();
    let err = run_stage(&config, Stage::Augment).unwrap_err();
    match err {
        PipelineError::MissingUpstreamArtifact { stage, .. } => assert_eq!(stage, "preprocess"),
        other => panic!("unexpected error {other}"),
    }
    let err = run_stage(&config, Stage::Train).unwrap_err();
    match err {
        PipelineError::MissingUpstreamArtifact { stage, .. } => assert_eq!(stage, "classify"),
        other => panic!("unexpected error {other}"),
    }

    // Without a synth section the raw inputs are the user's problem.
    let fresh = tempfile::tempdir().unwrap();
    let mut external = small_config(fresh.path(), 7);
    external.synth = None;
    let err = run_stage(&external, Stage::Synth).unwrap_err();
    assert!(matches!(err, PipelineError::SynthNotConfigured));
    let err = run_stage(&external, Stage::Preprocess).unwrap_err();
    match err {
        PipelineError::MissingUpstreamArtifact { stage, .. } => assert_eq!(stage, "input"),
        other => panic!("unexpected error {other}"),
    }
}
