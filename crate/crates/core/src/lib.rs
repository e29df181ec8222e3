//! CORM KV-cache eviction with streaming, heavy-hitter, pivotal-token and
//! greedy-minimum baselines, a small decoder-only transformer to drive them,
//! attention trace record/replay and analysis tooling.

pub mod analysis;
pub mod attention;
pub mod cli;
pub mod error;
pub mod kv_cache;
pub mod manifest;
pub mod model;
pub mod position;
pub mod text;
pub mod trace;

pub use error::{CormError, Result, TraceError};
pub use kv_cache::{PolicyConfig, ThresholdMode};
pub use model::{Model, ModelConfig};
