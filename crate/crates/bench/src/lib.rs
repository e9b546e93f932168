//! Benchmark-only crate; see `benches/pipeline.rs`.

pub use rubbing_core as core;
