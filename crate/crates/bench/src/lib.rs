//! Benchmarks live in `benches/`; run them with `cargo bench -p q2t-bench`.
