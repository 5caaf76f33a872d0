//! Batch pipeline turning preprocessed LiDAR object tracks and signal
//! phase/timing logs into pedestrian sub-class labels (normal vs. wheelchair)
//! and per-frame predictions of the time a pedestrian needs to finish
//! crossing, ending in a crossing-feasibility verdict against the remaining
//! green time.
//!
//! Stages, in pipeline order:
//!
//! * [`ingest`]: parse track/SPaT files, apply coordinate calibration,
//!   build the per-crosswalk phase timeline.
//! * [`preprocess`]: assemble per-ID trajectories, apply the three
//!   filtering rules, annotate points with their intersection area.
//! * [`subclass`]: per-trajectory features, the four labeling criteria,
//!   PCA separability check, SVM training and relabeling of unknowns.
//! * [`augment`]: sliding-window extraction and arrival-time targets.
//! * [`predict`]: per-point feature vectors and the four arrival-time
//!   regression models with seeded training.
//! * [`evaluate`]: metrics, the sub-class ablation, per-trajectory RMSE
//!   distributions, and crossing-feasibility decisions.
//! * [`synthgen`]: seeded synthetic intersection scenes so every stage is
//!   testable without a private dataset.
//!
//! All operations take explicit seeds; with the `parallel` feature (default)
//! data-parallel inner loops run on rayon while staying bit-identical to the
//! sequential fallback.

pub mod augment;
pub mod config;
pub mod evaluate;
pub mod exec;
pub mod ingest;
pub mod linalg;
pub mod manifest;
pub mod pipeline;
pub mod predict;
pub mod preprocess;
pub mod subclass;
pub mod synthgen;
