//! Criterion benchmarks for the ergolab operators live in `benches/`.
