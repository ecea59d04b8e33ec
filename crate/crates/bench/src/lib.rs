//! Benchmarks for the tensor kernels, the haze estimator and full-model
//! passes. Run with `cargo bench -p hazefuse-bench`.
