//! Benchmarks for the tensor kernels and mask chain live in `benches/`.
