//! Trajectory collection and advantage estimation.

mod buffer;
mod collect;
mod gae;

pub use buffer::{Minibatch, TrajectoryBuffer, Transition};
pub use collect::{evaluate, Collector, ContextWindow};
pub use gae::{gae, normalize, GaeStep};
