//! Experiment laboratory built on `interlace-core`: TOML-configured runs
//! that emit deterministic CSV records plus run metadata.

pub mod config;
pub mod experiments;
pub mod records;
