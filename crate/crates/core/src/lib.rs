//! Simulation and analysis of gated linear teacher-student networks.
//!
//! A student made of several linear paths, each scaled by a gate, learns a
//! sequence of linear teacher tasks presented in blocks. With fast, bounded
//! gates the paths specialise to individual teachers and task switches are
//! handled by the gates alone; with slow, unconstrained gates the weights are
//! overwritten in every block.
//!
//! Modules:
//! - [`model`]: gated student, losses, gradients, Euler integration
//! - [`curriculum`]: teachers, tasks, block schedules, batches, seeds
//! - [`reduced`]: two-dimensional reduced model and its analytic results
//! - [`deep`]: two-layer network with regularised second layer
//! - [`metrics`]: alignment, time to threshold, gate speed
//! - [`experiments`]: presets, runners, sweeps and studies
//! - [`io`], [`config`]: artifacts and run configuration

pub mod config;
pub mod curriculum;
pub mod deep;
pub mod error;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod model;
pub mod record;
pub mod reduced;

pub use error::{Error, Result};
