//! Agents: the value/policy networks, the similarity regularizers, and the
//! training steps that combine them.

mod dpg;
mod dqn;
mod regularizers;

pub use dpg::DpgAgent;
pub use dqn::DqnAgent;
pub use regularizers::{
    adjacency_diagnostics, batch_bounds, beer_bound, beer_bound_from_norms, bound_gap_values,
    AdjacencyDiagnostics,
};

use crate::env::{Action, Transition};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegKind {
    None,
    Beer,
    Dr3,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferConfig {
    /// Number of auxiliary heads (k).
    pub heads: usize,
    /// Scale applied to the frozen-initialization targets.
    pub beta: f64,
    /// Weight of the auxiliary loss in the total loss.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub gamma: f64,
    /// Similarity-regularizer coefficient.
    pub beta: f64,
    /// Target smoothing coefficient.
    pub tau: f64,
    pub lr_critic: f64,
    pub lr_actor: f64,
    pub batch_size: usize,
    /// Epsilon-greedy exploration probability (discrete control).
    pub epsilon: f64,
    /// Gaussian exploration noise scale (continuous control).
    pub sigma: f64,
    pub warmup_steps: usize,
    pub regularizer: RegKind,
    pub hidden: Vec<usize>,
    pub infer: InferConfig,
    pub dr3_c0: f64,
    /// Source the next-pair representation from the target trunk instead of
    /// the online trunk.
    pub next_phi_from_target: bool,
    /// Exclude terminal transitions from the similarity regularizer and the
    /// adjacency diagnostics. Note that in reward-at-goal tasks the bound is
    /// vacuous on every zero-reward pair (AM-GM), so masking can switch the
    /// regularizer off entirely; presets for such tasks disable this.
    pub mask_terminal_regularizer: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.99,
            beta: 5e-3,
            tau: 0.005,
            lr_critic: 1e-4,
            lr_actor: 1e-4,
            batch_size: 64,
            epsilon: 0.1,
            sigma: 0.2,
            warmup_steps: 1000,
            regularizer: RegKind::None,
            hidden: vec![32, 32],
            infer: InferConfig {
                heads: 10,
                beta: 100.0,
                alpha: 0.1,
            },
            dr3_c0: 5e-3,
            next_phi_from_target: false,
            mask_terminal_regularizer: true,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::InvalidConfig(msg));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must be in (0,1), got {}", self.gamma));
        }
        if self.beta < 0.0 {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must be in (0,1], got {}", self.tau));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden layer widths must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must be in [0,1], got {}", self.epsilon));
        }
        if self.sigma < 0.0 {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if self.lr_critic <= 0.0 || self.lr_actor <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        if self.regularizer == RegKind::Infer && self.infer.heads == 0 {
            return bad("auxiliary-head regularizer needs at least one head".into());
        }
        Ok(())
    }

    /// Representation dimension implied by the hidden widths.
    pub fn n_features(&self) -> usize {
        *self.hidden.last().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Explore,
    Greedy,
}

/// Quantities reported by one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub td_loss: f64,
    pub regularizer_value: f64,
    pub mean_cosine: Option<f64>,
    pub bound_gap_mean: Option<f64>,
    pub bound_gap_max: Option<f64>,
}

/// Greedy control surface shared by the evaluation and rollout metrics.
pub trait Policy {
    fn greedy_action(&self, obs: &[f64]) -> Action;
    fn q_estimate(&self, obs: &[f64], action: &Action) -> f64;
}

/// Per-sample adjacency data extracted from a batch: current and next
/// representations, rewards, head-column norms, and the non-terminal mask.
#[derive(Debug, Clone)]
pub struct AdjacencyBatch {
    pub rows: usize,
    pub cols: usize,
    pub phi: Vec<f64>,
    pub phi_next: Vec<f64>,
    pub rewards: Vec<f64>,
    pub w_norms: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Read-only view of a value model used by the metrics module.
pub trait ValueModel {
    fn n_features(&self) -> usize;
    fn gamma(&self) -> f64;
    /// Representation rows for the batch's state(-action) pairs.
    fn phi_batch(&self, batch: &[&Transition]) -> Vec<f64>;
    fn adjacency_batch(&self, batch: &[&Transition]) -> AdjacencyBatch;
}

pub(crate) struct FlatBatch {
    pub len: usize,
    pub states: Vec<f64>,
    pub next_states: Vec<f64>,
    pub rewards: Vec<f64>,
    pub mask: Vec<bool>,
}

pub(crate) fn flatten_batch(batch: &[&Transition], obs_dim: usize) -> FlatBatch {
    let len = batch.len();
    let mut states = Vec::with_capacity(len * obs_dim);
    let mut next_states = Vec::with_capacity(len * obs_dim);
    let mut rewards = Vec::with_capacity(len);
    let mut mask = Vec::with_capacity(len);
    for t in batch {
        debug_assert_eq!(t.state.len(), obs_dim);
        states.extend_from_slice(&t.state);
        next_states.extend_from_slice(&t.next_state);
        rewards.push(t.reward);
        mask.push(!t.done);
    }
    FlatBatch {
        len,
        states,
        next_states,
        rewards,
        mask,
    }
}

/// Row-wise concatenation of `[rows, a_cols]` and `[rows, b_cols]` data.
pub(crate) fn concat_rows(
    a: &[f64],
    b: &[f64],
    rows: usize,
    a_cols: usize,
    b_cols: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * (a_cols + b_cols));
    for i in 0..rows {
        out.extend_from_slice(&a[i * a_cols..(i + 1) * a_cols]);
        out.extend_from_slice(&b[i * b_cols..(i + 1) * b_cols]);
    }
    out
}
