//! Criterion benchmarks for the multiway kernels live in `benches/`.
