//! Explore an Android app for pages that embed a WebView, replay the
//! navigation to each one, and measure how the embedded page loads.

pub mod app;
pub mod collector;
pub mod device;
pub mod explorer;
pub mod metrics;
pub mod model;
pub mod replayer;
pub mod ui_tree;
