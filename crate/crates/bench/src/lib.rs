//! Workload generation, runs and experiments over the `dmsim` model.

pub mod experiment;
pub mod report;
pub mod run;
pub mod workload;
