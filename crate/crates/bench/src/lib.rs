//! Benchmarks for the segmentation pipeline live in `benches/`.
