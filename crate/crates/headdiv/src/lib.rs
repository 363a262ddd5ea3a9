//! Reporting, file formats and run-directory handling for head-diversity
//! experiments.

pub mod analysis;
pub mod artifacts;
pub mod config;

pub use headdiv_core as core;
