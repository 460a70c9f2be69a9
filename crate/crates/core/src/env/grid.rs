//! Open rectangular grid world with one rewarding terminal cell.
//!
//! States are cell indices `row * cols + col`, observed as one-hot vectors.
//! Actions 0..4 are up, down, left, right; moves off the boundary clamp in
//! place. Entering the terminal cell pays 10, everything else pays 0.

use rand::{Rng, RngCore};

use super::{Action, ActionSpace, Environment, Transition};
use crate::error::{CoreError, Result};

pub const GOAL_REWARD: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct GridWorld {
    rows: usize,
    cols: usize,
    terminal: usize,
    max_episode_steps: usize,
    state: usize,
    steps: usize,
    done: bool,
}

impl GridWorld {
    /// The 20-state layout: 4 rows x 5 columns, terminal at the bottom-right
    /// cell (state 19), 200-step episode cap.
    pub fn paper_default() -> Self {
        Self::new(4, 5, 200)
    }

    /// Terminal is always the bottom-right cell `rows*cols - 1`.
    pub fn new(rows: usize, cols: usize, max_episode_steps: usize) -> Self {
        assert!(rows * cols >= 2, "need at least one non-terminal state");
        GridWorld {
            rows,
            cols,
            terminal: rows * cols - 1,
            max_episode_steps,
            state: 0,
            steps: 0,
            done: true,
        }
    }

    pub fn n_states(&self) -> usize {
        self.rows * self.cols
    }

    pub fn terminal_state(&self) -> usize {
        self.terminal
    }

    pub fn max_episode_steps(&self) -> usize {
        self.max_episode_steps
    }

    pub fn state(&self) -> usize {
        self.state
    }

    fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states()];
        v[s] = 1.0;
        v
    }

    fn apply_move(&self, s: usize, action: usize) -> usize {
        let (r, c) = (s / self.cols, s % self.cols);
        let (nr, nc) = match action {
            0 => (r.saturating_sub(1), c),                      // up
            1 => ((r + 1).min(self.rows - 1), c),               // down
            2 => (r, c.saturating_sub(1)),                      // left
            _ => (r, (c + 1).min(self.cols - 1)),               // right
        };
        nr * self.cols + nc
    }

    /// Shortest-path step count from `s` to the terminal cell. The grid is
    /// open, so this is the Manhattan distance.
    pub fn shortest_path_len(&self, s: usize) -> usize {
        let (r, c) = (s / self.cols, s % self.cols);
        let (tr, tc) = (self.terminal / self.cols, self.terminal % self.cols);
        r.abs_diff(tr) + c.abs_diff(tc)
    }
}

impl Environment for GridWorld {
    fn obs_dim(&self) -> usize {
        self.n_states()
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(4)
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        // Uniform over non-terminal states; terminal is the last index.
        self.state = rng.random_range(0..self.terminal);
        self.steps = 0;
        self.done = false;
        self.one_hot(self.state)
    }

    fn current_obs(&self) -> Vec<f64> {
        self.one_hot(self.state)
    }

    fn step(&mut self, action: &Action) -> Result<Transition> {
        if self.done {
            return Err(CoreError::EpisodeFinished);
        }
        let a = match action {
            Action::Discrete(a) if *a < 4 => *a,
            other => {
                return Err(CoreError::ActionOutOfRange {
                    got: format!("{other:?}"),
                    space: "Discrete(4)".into(),
                })
            }
        };
        let prev = self.state;
        let next = self.apply_move(prev, a);
        self.steps += 1;
        let reached = next == self.terminal;
        let reward = if reached { GOAL_REWARD } else { 0.0 };
        self.done = reached || self.steps >= self.max_episode_steps;
        self.state = next;
        Ok(Transition {
            state: self.one_hot(prev),
            action: Action::Discrete(a),
            reward,
            next_state: self.one_hot(next),
            done: self.done,
        })
    }

    fn set_state_from_obs(&mut self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.n_states() {
            return Err(CoreError::BadObservation {
                reason: format!("expected one-hot of length {}", self.n_states()),
            });
        }
        let s = obs
            .iter()
            .position(|&v| v == 1.0)
            .ok_or_else(|| CoreError::BadObservation {
                reason: "no hot entry in grid observation".into(),
            })?;
        self.state = s;
        self.steps = 0;
        self.done = s == self.terminal;
        Ok(())
    }

    fn state_snapshot(&self) -> Vec<f64> {
        vec![self.state as f64, self.steps as f64, self.done as u8 as f64]
    }

    fn restore_snapshot(&mut self, snap: &[f64]) -> Result<()> {
        if snap.len() != 3 {
            return Err(CoreError::BadObservation {
                reason: "grid snapshot must have 3 entries".into(),
            });
        }
        self.state = snap[0] as usize;
        self.steps = snap[1] as usize;
        self.done = snap[2] != 0.0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn enter_terminal_from_its_left() {
        let mut env = GridWorld::paper_default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(&mut rng);
        env.set_state_from_obs(&{
            let mut v = vec![0.0; 20];
            v[18] = 1.0; // row 3, col 3
            v
        })
        .unwrap();
        let t = env.step(&Action::Discrete(3)).unwrap();
        assert_eq!(t.reward, 10.0);
        assert!(t.done);
        assert_eq!(t.next_state[19], 1.0);
    }

    #[test]
    fn boundary_clamps_in_place() {
        let mut env = GridWorld::paper_default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(&mut rng);
        let mut obs = vec![0.0; 20];
        obs[0] = 1.0;
        env.set_state_from_obs(&obs).unwrap();
        let t = env.step(&Action::Discrete(0)).unwrap(); // up from the top row
        assert_eq!(t.reward, 0.0);
        assert_eq!(t.next_state[0], 1.0);
        assert!(!t.done);
    }

    #[test]
    fn reset_is_deterministic_per_seed() {
        let mut env = GridWorld::paper_default();
        let a = env.reset(&mut ChaCha8Rng::seed_from_u64(7));
        let b = env.reset(&mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn reset_is_uniform_over_non_terminal_states() {
        let mut env = GridWorld::paper_default();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 100_000;
        let mut counts = [0usize; 20];
        for _ in 0..n {
            let obs = env.reset(&mut rng);
            let s = obs.iter().position(|&v| v == 1.0).unwrap();
            counts[s] += 1;
        }
        assert_eq!(counts[19], 0);
        let p = 1.0 / 19.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let expected = n as f64 * p;
        for &c in &counts[..19] {
            assert!(
                (c as f64 - expected).abs() < 3.0 * sigma,
                "count {c} vs expected {expected} (sigma {sigma})"
            );
        }
    }

    #[test]
    fn stepping_finished_episode_errors() {
        let mut env = GridWorld::new(1, 2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(&mut rng); // only possible start: state 0
        let t = env.step(&Action::Discrete(3)).unwrap();
        assert!(t.done);
        assert!(matches!(
            env.step(&Action::Discrete(3)),
            Err(CoreError::EpisodeFinished)
        ));
    }

    #[test]
    fn out_of_range_action_errors() {
        let mut env = GridWorld::paper_default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(&mut rng);
        assert!(matches!(
            env.step(&Action::Discrete(4)),
            Err(CoreError::ActionOutOfRange { .. })
        ));
    }

    #[test]
    fn every_state_is_within_seven_steps_of_goal() {
        let env = GridWorld::paper_default();
        for s in 0..20 {
            assert!(env.shortest_path_len(s) <= 7);
        }
    }

    #[test]
    fn episode_return_is_zero_or_ten() {
        let mut env = GridWorld::paper_default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            env.reset(&mut rng);
            let mut total = 0.0;
            loop {
                let a = Action::Discrete(rng.random_range(0..4));
                let t = env.step(&a).unwrap();
                total += t.reward;
                if t.done {
                    break;
                }
            }
            assert!(total == 0.0 || total == 10.0);
        }
    }
}
