// Cross-module tests. They live in the library so they run ahead of the
// acceptance target, which stops `cargo test` when a criterion fails.
