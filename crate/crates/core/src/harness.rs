//! Experiment harness (work in progress).
