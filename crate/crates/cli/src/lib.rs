//! Operator surface for the self-KD experiments: data generation, staged
//! training, evaluation, attention probes, α sweeps and run reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod layout;
pub mod report;

pub use commands::{EvalReport, ModalityArg, Run, SweepRow};
pub use config::{ExperimentConfig, OUTPUT_ROOT_ENV};
pub use error::{CliError, Result};
pub use layout::RunDir;
pub use report::RunReport;
