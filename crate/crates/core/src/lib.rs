//! Heterogeneous point set transformer for two-view sparse detector events.

pub mod assignment;
pub mod autodiff;
pub mod bench;
pub mod config;
pub mod event;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;
