//! Pipeline driver: configuration, content-addressed stage caching, and
//! the per-seed stage implementations behind the `evade-cli` binary.

pub mod cache;
pub mod config;
pub mod stages;
