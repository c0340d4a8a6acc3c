//! Time-on-task estimation from click timestamps.
//!
//! Inter-click intervals are modelled as a mixture of log-normal
//! distributions. Every component except the one with the largest mean is
//! treated as "entirely on task"; a user's time-on-task is the interval count
//! times the mean on-task interval. The same fits calibrate a single
//! duration threshold for the cheap thresholded estimate.
//!
//! Modules follow the pipeline order:
//!
//! - [`ingest`]: track-log parsing, per-user interval extraction and filtering.
//! - [`mixture`]: EM fitting of Gaussian mixtures to log-intervals, BIC
//!   model selection, component means and goodness of fit.
//! - [`estimate`]: per-user time-on-task from an ordered fit.
//! - [`threshold`]: the thresholded estimate and its effective-threshold solver.
//! - [`synth`]: synthetic track logs with ground-truth labels.
//! - [`report`]: course-level orchestration and aggregates.

pub mod error;
pub mod estimate;
pub mod ingest;
pub mod mixture;
pub mod report;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod threshold;

pub use error::{Error, Result};
pub use estimate::{EstimateError, TimeOnTaskEstimate};
pub use ingest::{
    ClickEvent, DropReason, DroppedUser, Extraction, FilterConfig, IntervalSeries, LogFormat,
    ParsedLog, ResourceCategory,
};
pub use mixture::{
    EmConfig, FitSummary, MembershipMatrix, MixtureError, MixtureFit, MixtureParams, ModelSelection,
};
pub use report::{CourseReport, PipelineConfig, UserReport};
pub use synth::{GeneratorSpec, SyntheticCourse};
pub use threshold::{
    CohortSpec, CohortThreshold, SolutionCase, ThresholdEstimate, ThresholdSolution,
};
