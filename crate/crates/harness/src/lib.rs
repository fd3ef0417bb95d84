//! Configuration, experiment suites, reports and the `fedvtc` command line.

pub mod cli;
pub mod config;
pub mod plot;
pub mod report;
pub mod runner;
