//! Command-line front end for the `sketchfed` library: experiment
//! configuration, dataset loading and generation, the training loop with its
//! metrics and summary artifacts, SVG plotting, a verification battery, and
//! small diagnostic tools.

pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod plot;
pub mod tools;
pub mod verify;
