//! Data-free continual learning with a linear connector.
//!
//! Each new task trains two copies of the current network: a stable track whose
//! extractor updates are projected onto the approximate null space of earlier
//! tasks' feature covariance, and a plastic track trained with cross-entropy plus
//! feature distillation. The two are averaged with weight `1/t` on the plastic
//! side. The crate also provides the metrics (ACC, BWT, intransigence against a
//! joint-training reference), a β-sweep path scanner, synthetic task streams and
//! an experiment runner.
//!
//! Modules, bottom up:
//!
//! - [`numerics`]: dense matrices and a Jacobi symmetric eigensolver
//! - [`model`]: multi-head MLP with manual backpropagation
//! - [`taskgen`]: seeded synthetic class-incremental task streams
//! - [`nullspace`]: feature covariances and null-space projectors
//! - [`training`]: optimizers and the per-task training procedures
//! - [`connector`]: interpolation, fusion, centroids, path scans
//! - [`evaluation`]: accuracy matrix and continual-learning metrics
//! - [`runner`]: end-to-end experiments and their artifacts

pub mod connector;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nullspace;
pub mod numerics;
pub mod rng;
pub mod runner;
pub mod taskgen;
pub mod training;

pub use connector::{centroid, fuse, interpolate, scan_path, PathScan};
pub use error::{Error, Result};
pub use evaluation::{compute_acc, compute_bwt, compute_im, evaluate, joint_oracle, AccuracyMatrix, MetricReport};
pub use model::{ArchSpec, LossSpec, Network};
pub use nullspace::{accumulate_covariance, build_projector, merge_covariance, project_update, LayerCovariance, Projector};
pub use numerics::{sym_eig, DenseMatrix, EigenDecomposition};
pub use runner::{run_experiment, run_sweep, Experiment, ExperimentConfig, RunRecord, Variant};
pub use taskgen::{make_stream, StreamSpec, TaskStream};
pub use training::{train_first_task, train_task_dual, TrainConfig};
