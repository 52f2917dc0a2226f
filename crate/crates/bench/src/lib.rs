//! Criterion benchmarks for the per-tick hot paths live in `benches/`.
