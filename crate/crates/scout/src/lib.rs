//! HTTP job service and operator CLI over the scanning engine.
//!
//! Scans run as asynchronous jobs on a bounded worker pool; everything else
//! (feedback, user models, verdicts, analysis) is synchronous request and
//! response. Mock mode swaps every external provider for scripted stand-ins
//! and fixes the clock, so a mock deployment reproduces the golden scan.

pub mod api;
pub mod batch;
pub mod cli;
pub mod engine;
pub mod jobs;
pub mod schema;
