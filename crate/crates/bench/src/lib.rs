//! Criterion benchmarks for `meanstop-core`; see `benches/`.
