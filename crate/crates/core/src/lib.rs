//! Randomized smoothing with diffusion denoisers, on analytic Gaussian
//! mixtures where every quantity can be checked exactly.

#![allow(clippy::excessive_precision, clippy::neg_cmp_op_on_partial_ord)]

pub mod classify;
pub mod commands;
pub mod config;
pub mod denoise;
pub mod error;
pub mod mixture;
pub mod oracle;
pub mod pipeline;
pub mod report;
pub mod schedule;
pub mod seeding;
pub mod stats;

pub use classify::{Classifier, ClassifierKind, LabeledMixture, MixtureClassifier};
pub use denoise::{DenoiserKind, DenoiserSpec, PreparedDenoiser};
pub use error::{Error, Result};
pub use mixture::MixtureModel;
pub use oracle::{Oracle, QuadratureGrid, QuadratureScheme};
pub use pipeline::{BaseClassifier, CertificationResult, Point, PredictOutcome};
pub use schedule::{NoiseSchedule, ScheduleKind, TimestepSolution};
pub use stats::CertifyParams;
