//! Scenario configuration, the end-to-end pipelines built on it, and their
//! CSV, JSON and SVG outputs.

mod compare;
mod config;
mod output;
mod presets;
mod run;
mod svg;

pub use compare::*;
pub use config::*;
pub use output::*;
pub use presets::*;
pub use run::*;
pub use svg::LinePlot;
