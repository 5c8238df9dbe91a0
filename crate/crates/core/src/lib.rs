//! Static exposure analysis of Unix domain sockets in extracted Android
//! firmware: which daemon sockets an untrusted app can connect to, and what
//! the daemon checks once it does.

pub mod access;
pub mod boot;
pub mod dataflow;
pub mod firmware;
pub mod initrc;
pub mod pipeline;
pub mod report;
pub mod sepolicy;

pub use pipeline::{run_pipeline, Options, Outcome, PipelineError};
pub use report::{emit_report, Format, Report};
pub use udsaudit_binary::BindApiConfig;
