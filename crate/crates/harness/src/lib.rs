//! Experiment harness: plans, execution, and reporting for the
//! cross-domain mixture model in `d2sdk-core`.
//!
//! [`plan`] declares what to run, [`runner`] expands plans into training
//! runs and executes them (optionally in parallel), and [`report`]
//! aggregates the per-run records into policy tables.

pub mod plan;
pub mod report;
pub mod runner;
