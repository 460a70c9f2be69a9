//! Torque-limited pendulum swing-up, the classic formulation.
//!
//! Observation is (cos th, sin th, th_dot); the pole is a uniform rod, so the
//! free dynamics are th_dd = (3g / 2L) sin th. Reward penalizes angle from
//! upright, angular velocity, and torque, all evaluated at the pre-step state.

use std::f64::consts::PI;

use rand::{Rng, RngCore};

use super::{Action, ActionSpace, Environment, Transition};
use crate::error::{CoreError, Result};

const GRAVITY: f64 = 10.0;
const MASS: f64 = 1.0;
const LENGTH: f64 = 1.0;
const DT: f64 = 0.05;
const MAX_SPEED: f64 = 8.0;
const MAX_TORQUE: f64 = 2.0;

/// Wrap an angle to (-pi, pi].
fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t == -PI {
        t = PI;
    }
    t
}

#[derive(Debug, Clone)]
pub struct Pendulum {
    theta: f64,
    theta_dot: f64,
    max_episode_steps: usize,
    steps: usize,
    done: bool,
}

impl Pendulum {
    pub fn new(max_episode_steps: usize) -> Self {
        Pendulum {
            theta: 0.0,
            theta_dot: 0.0,
            max_episode_steps,
            steps: 0,
            done: true,
        }
    }

    pub fn default_episode() -> Self {
        Self::new(200)
    }

    pub fn max_torque() -> f64 {
        MAX_TORQUE
    }

    /// Total mechanical energy about the pivot (rod inertia m L^2 / 3,
    /// potential reference at the pivot). Conserved by the free dynamics.
    pub fn mechanical_energy(&self) -> f64 {
        let kinetic = MASS * LENGTH * LENGTH * self.theta_dot * self.theta_dot / 6.0;
        let potential = MASS * GRAVITY * (LENGTH / 2.0) * self.theta.cos();
        kinetic + potential
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

impl Environment for Pendulum {
    fn obs_dim(&self) -> usize {
        3
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous {
            dim: 1,
            low: -MAX_TORQUE,
            high: MAX_TORQUE,
        }
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let u: f64 = rng.random::<f64>();
        self.theta = wrap_angle(-PI + u * 2.0 * PI);
        self.theta_dot = -1.0 + rng.random::<f64>() * 2.0;
        self.steps = 0;
        self.done = false;
        self.obs()
    }

    fn current_obs(&self) -> Vec<f64> {
        self.obs()
    }

    fn step(&mut self, action: &Action) -> Result<Transition> {
        if self.done {
            return Err(CoreError::EpisodeFinished);
        }
        let torque = match action {
            Action::Continuous(v) if v.len() == 1 && v[0].abs() <= MAX_TORQUE => v[0],
            other => {
                return Err(CoreError::ActionOutOfRange {
                    got: format!("{other:?}"),
                    space: format!("Continuous[-{MAX_TORQUE}, {MAX_TORQUE}]"),
                })
            }
        };
        let state = self.obs();
        let reward = -(wrap_angle(self.theta).powi(2)
            + 0.1 * self.theta_dot * self.theta_dot
            + 0.001 * torque * torque);

        // Semi-implicit Euler: velocity first, then position with the new velocity.
        let accel = 3.0 * GRAVITY / (2.0 * LENGTH) * self.theta.sin()
            + 3.0 / (MASS * LENGTH * LENGTH) * torque;
        self.theta_dot = (self.theta_dot + DT * accel).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta = wrap_angle(self.theta + DT * self.theta_dot);
        self.steps += 1;
        self.done = self.steps >= self.max_episode_steps;

        Ok(Transition {
            state,
            action: Action::Continuous(vec![torque]),
            reward,
            next_state: self.obs(),
            done: self.done,
        })
    }

    fn set_state_from_obs(&mut self, obs: &[f64]) -> Result<()> {
        if obs.len() != 3 {
            return Err(CoreError::BadObservation {
                reason: "pendulum observation must be (cos, sin, speed)".into(),
            });
        }
        let norm = (obs[0] * obs[0] + obs[1] * obs[1]).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(CoreError::BadObservation {
                reason: format!("cos/sin pair has norm {norm}"),
            });
        }
        self.theta = obs[1].atan2(obs[0]);
        self.theta_dot = obs[2];
        self.steps = 0;
        self.done = false;
        Ok(())
    }

    fn state_snapshot(&self) -> Vec<f64> {
        vec![
            self.theta,
            self.theta_dot,
            self.steps as f64,
            self.done as u8 as f64,
        ]
    }

    fn restore_snapshot(&mut self, snap: &[f64]) -> Result<()> {
        if snap.len() != 4 {
            return Err(CoreError::BadObservation {
                reason: "pendulum snapshot must have 4 entries".into(),
            });
        }
        self.theta = snap[0];
        self.theta_dot = snap[1];
        self.steps = snap[2] as usize;
        self.done = snap[3] != 0.0;
        Ok(())
    }
}
