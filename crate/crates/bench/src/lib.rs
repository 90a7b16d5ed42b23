//! Benchmarks live in `benches/`; run them with `cargo bench -p tipqc-bench`.

pub use tipqc_core;
