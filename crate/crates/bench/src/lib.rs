//! Criterion benchmarks for the veil pipeline live under `benches/`.
