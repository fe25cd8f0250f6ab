//! Criterion benchmarks for `ratefield`; see `benches/`.
