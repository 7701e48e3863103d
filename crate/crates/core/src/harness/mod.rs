//! Operational shell: datasets, image files, metrics, configuration,
//! experiment runs, directory evaluation and the oracle suites.

pub mod config;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod oracle;
