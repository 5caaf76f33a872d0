//! Compares the rayon data-parallel kernels against the sequential
//! fallback. Both paths are compiled regardless of the `parallel` feature,
//! so one binary measures both; the feature only selects which one the
//! library calls internally.
//!
//! Three tiers: the raw matmul kernel, per-window model inference (the
//! evaluate-stage hot loop), and per-trajectory feature extraction (the
//! classify-stage hot loop). The last two run the same closure through
//! `exec::map_collect` and `exec::map_collect_seq`, which are bit-identical
//! by contract.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use crosstime_core::augment::augment_trajectories;
use crosstime_core::exec;
use crosstime_core::ingest::{build_phase_timeline, CalibrationConfig};
use crosstime_core::linalg::Mat;
use crosstime_core::predict::{build_dataset, train, Architecture, ModelConfig, TrainedModel};
use crosstime_core::preprocess::{preprocess_pipeline, Trajectory};
use crosstime_core::subclass::extract_features;
use crosstime_core::synthgen::{generate_scene, ScenarioConfig};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &n in &[64usize, 128, 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_mat(&mut rng, n, n);
        let b = random_mat(&mut rng, n, n);
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bench, _| {
            bench.iter(|| a.matmul_seq(&b))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |bench, _| {
            bench.iter(|| a.matmul_par(&b))
        });
    }
    group.finish();
}

/// Preprocessed trajectories from a small deterministic scene.
fn scene_trajectories() -> Vec<Trajectory> {
    let scenario = ScenarioConfig::default_scene(7);
    let scene = generate_scene(&scenario).expect("scene generation");
    preprocess_pipeline(&scene.records, &scenario.areas, &CalibrationConfig::default())
        .expect("preprocess")
        .trajectories
}

/// A barely-trained model: one iteration is enough to get a standardizer
/// and a checkpoint whose forward pass costs the same as a converged one.
fn quick_model(arch: Architecture, trajectories: &[Trajectory]) -> (TrainedModel, Vec<Mat>) {
    let scenario = ScenarioConfig::default_scene(7);
    let scene = generate_scene(&scenario).expect("scene generation");
    let timeline = build_phase_timeline(&scene.spat, &scenario.phase_map).expect("timeline");
    let windows = augment_trajectories(trajectories, 10);
    let dataset =
        build_dataset(&windows, &timeline, false, &BTreeMap::new()).expect("dataset");
    let mut config = ModelConfig::new(arch, 10, false, 7);
    config.iterations = 1;
    let empty = crosstime_core::predict::Dataset {
        features: Vec::new(),
        targets: Vec::new(),
        agent_ids: Vec::new(),
    };
    let run = train(&config, &dataset, &empty).expect("training");
    (run.model, dataset.features.into_iter().take(2000).collect())
}

fn bench_batch_inference(c: &mut Criterion) {
    let trajectories = scene_trajectories();
    let mut group = c.benchmark_group("batch_inference");
    group.sample_size(10);
    for arch in [Architecture::Feedforward, Architecture::Gru] {
        let (model, inputs) = quick_model(arch, &trajectories);
        let name = format!("{arch}");
        group.bench_with_input(BenchmarkId::new("sequential", &name), &name, |bench, _| {
            bench.iter(|| {
                exec::map_collect_seq(&inputs, |m| model.forward(m).expect("forward"))
            })
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", &name), &name, |bench, _| {
            bench.iter(|| exec::map_collect(&inputs, |m| model.forward(m).expect("forward")))
        });
    }
    group.finish();
}

fn bench_feature_extraction(c: &mut Criterion) {
    let trajectories = scene_trajectories();
    let mut group = c.benchmark_group("feature_extraction");
    group.bench_function("sequential", |bench| {
        bench.iter(|| {
            exec::map_collect_seq(&trajectories, |t| extract_features(t).expect("features"))
        })
    });
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |bench| {
        bench.iter(|| exec::map_collect(&trajectories, |t| extract_features(t).expect("features")))
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_matmul,
    bench_batch_inference,
    bench_feature_extraction
);
criterion_main!(benches);
