//! Acceptance experiments live in `tests/acceptance.rs`; run them with
//! `cargo test -p tracer-experiments --test acceptance`.
