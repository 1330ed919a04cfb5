//! Event-triggered dynamic average consensus with a learned trigger.
//!
//! Agents track the average of per-agent reference signals while only
//! broadcasting when a send-on-delta condition fires. The threshold
//! delta(t) = sigma * eta_i(t) + eps is driven by a small shared network
//! whose weights are trained by gradient descent through a differentiable
//! (sigmoid-blended) relaxation of the trigger. The crate covers the full
//! loop: graph spectra, signal batches, rollout simulation for a linear and
//! a sliding-mode protocol, training, and checkers for the disturbance
//! bound, threshold range, and event spacing guarantees.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod etm;
pub mod graph;
pub mod linalg;
pub mod neural;
pub mod num;
pub mod parallel;
pub mod protocols;
pub mod signals;
pub mod training;

pub use error::{Error, Result};
