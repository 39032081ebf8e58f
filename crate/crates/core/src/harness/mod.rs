//! Toy world, metrics and experiment orchestration.

pub mod experiment;
pub mod metrics;
pub mod render;
pub mod toyworld;
