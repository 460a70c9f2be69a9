//! Desk-scale environments behind one stepping interface.

mod grid;
mod pendulum;

pub use grid::GridWorld;
pub use pendulum::Pendulum;

use rand::RngCore;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous { dim: usize, low: f64, high: f64 },
}

/// One experienced step: (s, a, r, s', done).
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

pub trait Environment {
    fn obs_dim(&self) -> usize;

    fn action_space(&self) -> ActionSpace;

    /// Start a new episode; deterministic given the rng state.
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;

    fn current_obs(&self) -> Vec<f64>;

    /// Advance one step. Errors on out-of-range actions and on stepping a
    /// finished episode.
    fn step(&mut self, action: &Action) -> Result<Transition>;

    /// Place the environment at the state encoded by `obs`, starting a fresh
    /// episode there. Used by rollout-based value estimation.
    fn set_state_from_obs(&mut self, obs: &[f64]) -> Result<()>;

    /// Internal state as a flat vector, for checkpointing.
    fn state_snapshot(&self) -> Vec<f64>;

    fn restore_snapshot(&mut self, snap: &[f64]) -> Result<()>;
}
