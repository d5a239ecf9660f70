//! Criterion benchmarks for the codec; see `benches/codec.rs`.
