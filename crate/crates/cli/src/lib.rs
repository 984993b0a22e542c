//! Command-line front end for the GMM audit toolkit.

pub mod config;
pub mod ingest;
pub mod limit_lab;
pub mod report;
pub mod run;
pub mod verify;
