//! Coalitions of peers in a data swarm: a steady-state queueing model of
//! random choking, plus a discrete-event swarm simulator to check it.

pub mod binom;
pub mod capacity;
pub mod coalition;
pub mod error;
pub mod params;
pub mod piece_strategy;
pub mod prob_kernels;
pub mod scenario;
pub mod sim;
pub mod steady_state;

pub use error::{ConfigError, ModelError, ScenarioError};
pub use params::ModelParams;
pub use prob_kernels::QueueProfile;
pub use steady_state::{completion_time, solve, sweep, CompletionTimes, SteadyState, SweepResult};
