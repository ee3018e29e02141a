//! Criterion benchmarks for the gossip, spectral and training kernels.
//! Run with `cargo bench -p consensus-lab-bench`.
