//! Criterion benchmarks for the evaluation pipeline; see `benches/`.
