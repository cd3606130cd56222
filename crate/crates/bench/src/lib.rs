//! Criterion benchmarks for the training and masking kernels; see `benches/`.
