//! Scenario configuration, the `run`/`validate`/`export` pipelines and the
//! on-disk bundle format used by the `jumpbridge` binary.

pub mod bundle;
pub mod config;
pub mod golden;
pub mod scenario;
