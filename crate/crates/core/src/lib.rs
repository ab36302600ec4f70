//! Rotational speed estimation from event-camera streams.
//!
//! The pipeline isolates each rotating target with heatmap-seeded k-means,
//! estimates its blade count, and measures the rotation between
//! overlapping time slices by ICP in the `(x, y, t)` embedding of the events.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod estimator;
pub mod events;
pub mod extraction;
pub mod registration;
pub mod simulator;

pub use estimator::{estimate_speed, rmae, EstimatorParams, SpeedEstimate};
pub use events::{Event, EventFormat, EventSlice, EventStream, Geometry, Polarity};
pub use simulator::{simulate, SceneSpec};
