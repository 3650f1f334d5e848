//! Expectation-propagation recovery of sparse complex signals from
//! unitarily invariant measurements, with its state evolution and
//! numerical checks of the underlying Haar-matrix machinery.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod ensembles;
pub mod haar_analysis;
pub mod harness;
pub mod linalg;
pub mod priors;
pub mod quadrature;
pub mod random;
pub mod state_evolution;
pub mod stats;

pub use engine::{EngineOptions, ExtrinsicMessage, GammaMode, ProblemInstance, RunRecord};
pub use ensembles::{EnsembleSpec, MeasurementModel, SpectralDensity};
pub use harness::{AggregateReport, ExperimentConfig};
pub use linalg::{ComplexMatrix, ComplexVector, SvdFactors, Unitary};
pub use priors::Prior;
pub use state_evolution::SeTrace;
