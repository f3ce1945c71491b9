//! Std companion to `clickgate-core`: trace and report files, persistence,
//! the enforcing forward proxy with its control API, and the CLI plumbing.

pub mod config;
pub mod persist;
pub mod proxy;
pub mod report;
pub mod trace;

pub use clickgate_core;
pub use config::ProxyConfig;
pub use proxy::{run, start, ProxyError, ProxyHandle};
