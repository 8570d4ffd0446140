//! Synthetic workloads, file formats, reports and experiment drivers.

pub mod config;
pub mod experiment;
pub mod suites;
pub mod tensor_file;
pub mod workload;

pub use config::{OutlierConfig, WorkloadConfig};
pub use experiment::{run_experiment, sweep, ExperimentReport, SweepReport, SweepRow, SCHEMA_VERSION};
pub use tensor_file::TensorFile;
pub use workload::{generate_workload, HeadData, Workload};
