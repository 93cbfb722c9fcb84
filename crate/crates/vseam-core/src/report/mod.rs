//! Reporting: bootstrap significance and heatmap rendering.

mod bootstrap;
mod heatmap;

pub use bootstrap::{bootstrap_compare, BootstrapOptions, SignificanceReport};
pub use heatmap::{render_heatmap, HeatmapData, HeatmapStyle};
