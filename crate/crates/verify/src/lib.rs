//! Acceptance checks for the whole toolkit live in `tests/acceptance.rs`.
//! They train full-size models, so run them with
//! `cargo test -p scrub-verify --test acceptance -- --nocapture`.
