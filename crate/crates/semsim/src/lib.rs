//! Command-line driver, file formats and reports for the simulator in
//! `semsim-core`.

pub mod cli;
pub mod config;
pub mod files;
pub mod plot;
pub mod report;
pub mod sweep;
