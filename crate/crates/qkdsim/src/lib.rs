//! Scenario runner around the link-simulation core: config documents,
//! bundled field scenarios, CSV reports, and TCP session endpoints.
//!
//! The library surface exists so integration tests can drive the exact
//! code paths the binary uses; `main` is a thin argument-to-exit-code
//! shim over [`cli::run`].

pub mod cli;
pub mod config;
pub mod net;
pub mod report;
pub mod scenarios;
