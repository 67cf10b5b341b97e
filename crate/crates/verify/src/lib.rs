//! Holds the acceptance run in `tests/acceptance.rs`. Nothing is exported.
