//! Self-supervised rope manipulation in a planar simulator.
//!
//! The crate collects pick/drop interactions with a simulated rope, trains a
//! goal-conditioned inverse dynamics network on them, and uses that network to
//! follow keyframe demonstrations. Rope configurations are compared with a
//! thin-plate-spline robust point matching distance.

pub mod actions;
pub mod cli;
pub mod config;
pub mod controllers;
pub mod dataset;
pub mod error;
pub mod geom;
pub mod harness;
pub mod model;
pub mod nn;
pub mod registration;
pub mod service;
pub mod sim;

pub use error::{Error, Result};
