//! Physics-encoded inverse modelling of sea-ice thickness: hydrostatic
//! physics, data pipeline, the PhysE-Inv network and its baselines,
//! training objectives, and the training/evaluation harness.

pub mod config;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod physics;
pub mod train;
