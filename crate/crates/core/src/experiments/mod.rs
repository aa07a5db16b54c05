//! The three published experiments: sources, error measures, configuration
//! and the dataset, POD, training and evaluation pipeline.

pub mod config;
pub mod errors;
pub mod pipeline;
pub mod source;

pub use config::ExperimentConfig;
pub use errors::{ErrorSeries, StepErrors};
pub use pipeline::{EvalSummary, Pipeline, PodOracle, SurrogatePredictor, U1Predictor};
pub use source::{ExampleId, SourceSpec};
