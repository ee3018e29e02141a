//! Simulation lab for decentralized SGD.
//!
//! Gossip topologies, per-sample objectives, the D-SGD / C-SGD / SAM /
//! average-direction SAM optimizers, and the diagnostics that compare
//! D-SGD's expected update with a Gaussian-smoothed gradient step.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diagnostics;
pub mod engine;
pub mod equivalence;
pub mod error;
pub mod linalg;
pub mod montecarlo;
pub mod objectives;
pub mod rng;
pub mod runner;
pub mod topology;
pub mod verify;

pub use error::{LabError, Result};
pub use topology::{build_topology, gossip_mix, shuffle_workers, spectral_report, GossipMatrix, SpectralReport, TopologyKind};
pub use config::ExperimentConfig;
pub use diagnostics::{DescentStep, LandscapeSlice, RegularizerReport, SmoothingReport};
pub use engine::{Algorithm, SamplingMode, StepOutcome, TrainerConfig, WorkerEnsemble};
pub use equivalence::{DirectionComparison, ScalingFit, VarianceIdentity};
pub use objectives::{Batch, Dataset, Objective};
pub use runner::{run_experiment, DiagnosticsRecord, Trajectory};
pub use verify::{run_suite, CriterionReport, Suite, VerifyReport};
