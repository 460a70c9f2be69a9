//! Measured quantities: representation rank over sampled batches, adjacency
//! cosine/bound-gap diagnostics, Monte-Carlo value-approximation error,
//! policy evaluation, and the cosine-minimization rank demo.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::adam::{adam_step, AdamState};
use crate::agents::{bound_gap_values, Policy, ValueModel};
use crate::env::{Environment, Transition};
use crate::error::Result;
use crate::kernels;
use crate::linalg::numerical_rank;
use crate::replay::ReplayBuffer;
use crate::tape::Tape;

/// One row of the metric stream. Fields are optional where the quantity is
/// not measurable at that step (empty buffer, no training yet, wrong env).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricSnapshot {
    pub step: usize,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
    pub steps_to_goal: Option<f64>,
    pub representation_rank: Option<f64>,
    pub mean_cosine: Option<f64>,
    pub bound_gap_mean: Option<f64>,
    pub bound_gap_max: Option<f64>,
    pub approx_error: Option<f64>,
    pub td_loss: Option<f64>,
    pub regularizer_value: Option<f64>,
}

/// Mean numerical rank of the representation matrix over `n_repeats` sampled
/// batches of `n_batch` pairs: the expectation in the rank definition is
/// realized by Monte Carlo over the buffer.
pub fn representation_rank_metric(
    model: &dyn ValueModel,
    buffer: &ReplayBuffer,
    epsilon: f64,
    n_batch: usize,
    n_repeats: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let mut total = 0usize;
    for _ in 0..n_repeats {
        let batch = buffer.sample_uniform(n_batch, rng)?;
        let phi = model.phi_batch(&batch);
        total += numerical_rank(&phi, n_batch, model.n_features(), epsilon)?;
    }
    Ok(total as f64 / n_repeats as f64)
}

/// Inner-product-form bound gap C per sample; `None` for terminal samples.
/// C <= 0 exactly when the similarity bound holds.
pub fn bound_gap_c(model: &dyn ValueModel, batch: &[&Transition]) -> Result<Vec<Option<f64>>> {
    let adj = model.adjacency_batch(batch);
    bound_gap_values(
        &adj.phi,
        &adj.phi_next,
        &adj.rewards,
        &adj.w_norms,
        &adj.mask,
        adj.rows,
        adj.cols,
        model.gamma(),
    )
}

/// Normalized Monte-Carlo approximation error of the greedy policy's value
/// estimates, averaged over start states drawn from the buffer:
/// mean |Q_est - Q_mc| / (Q_mc + 1e-6), clipped to [0, 5] for reporting.
#[allow(clippy::too_many_arguments)]
pub fn approx_error_monte_carlo(
    policy: &dyn Policy,
    env: &mut dyn Environment,
    buffer: &ReplayBuffer,
    n_states: usize,
    n_rollouts: usize,
    horizon: usize,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let starts = buffer.sample_uniform(n_states, rng)?;
    let mut total = 0.0;
    for t in &starts {
        let s = &t.state;
        let a = policy.greedy_action(s);
        let q_est = policy.q_estimate(s, &a);
        let mut q_mc = 0.0;
        for _ in 0..n_rollouts {
            q_mc += rollout_return(policy, env, s, &a, horizon, gamma)?;
        }
        q_mc /= n_rollouts as f64;
        let err = (q_est - q_mc).abs() / (q_mc + 1e-6);
        total += err.clamp(0.0, 5.0);
    }
    Ok(total / n_states as f64)
}

/// Discounted return of one greedy rollout from (s, a), truncated at
/// `horizon` steps or the environment's own episode cap.
pub fn rollout_return(
    policy: &dyn Policy,
    env: &mut dyn Environment,
    state: &[f64],
    first_action: &crate::env::Action,
    horizon: usize,
    gamma: f64,
) -> Result<f64> {
    env.set_state_from_obs(state)?;
    let mut ret = 0.0;
    let mut discount = 1.0;
    let mut action = first_action.clone();
    for _ in 0..horizon {
        let tr = env.step(&action)?;
        ret += discount * tr.reward;
        discount *= gamma;
        if tr.done {
            break;
        }
        action = policy.greedy_action(&tr.next_state);
    }
    Ok(ret)
}

/// Truncation horizon such that the discarded tail is below `tol * r_max /
/// (1 - gamma)`.
pub fn mc_horizon(gamma: f64, tol: f64) -> usize {
    (tol.ln() / gamma.ln()).ceil() as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub return_mean: f64,
    /// Population standard deviation across episodes.
    pub return_std: f64,
    /// Mean episode length; for the grid world this is steps-to-goal with the
    /// episode cap counted for episodes that never arrive.
    pub steps_mean: f64,
}

/// Run `n_episodes` greedy episodes and report undiscounted return stats.
pub fn evaluate_policy(
    policy: &dyn Policy,
    env: &mut dyn Environment,
    n_episodes: usize,
    rng: &mut dyn RngCore,
) -> Result<EvalStats> {
    let mut returns = Vec::with_capacity(n_episodes);
    let mut lengths = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut obs = env.reset(rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        loop {
            let a = policy.greedy_action(&obs);
            let tr = env.step(&a)?;
            total += tr.reward;
            steps += 1;
            if tr.done {
                break;
            }
            obs = tr.next_state;
        }
        returns.push(total);
        lengths.push(steps as f64);
    }
    let n = n_episodes as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok(EvalStats {
        return_mean: mean,
        return_std: var.sqrt(),
        steps_mean: lengths.iter().sum::<f64>() / n,
    })
}

// ── cosine-minimization rank demo ───────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoPoint {
    pub step: usize,
    pub mean_cosine: f64,
    pub rank: usize,
}

/// Start from a matrix of near-collinear rows (high cosine, rank ~1), then
/// repeatedly sample `batch` rows and push their mean pairwise cosine down
/// with Adam, logging the full-matrix mean cosine and numerical rank.
pub fn cosine_rank_demo(
    dim: usize,
    batch: usize,
    lr: f64,
    steps: usize,
    epsilon: f64,
    log_every: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<DemoPoint>> {
    assert!(dim >= batch, "batch cannot exceed the number of rows");
    let normal = StandardNormal;

    // One random unit row plus dim-1 noisy copies (noise scale 1e-2).
    let mut base: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let norm = kernels::l2_norm(&base);
    base.iter_mut().for_each(|v| *v /= norm);
    let mut m = Vec::with_capacity(dim * dim);
    m.extend_from_slice(&base);
    for _ in 1..dim {
        for &b in &base {
            let noise: f64 = normal.sample(rng);
            m.push(b + 1e-2 * noise);
        }
    }

    let mut opt = AdamState::new(dim * dim, lr);
    let mut trace = Vec::new();
    trace.push(DemoPoint {
        step: 0,
        mean_cosine: full_matrix_mean_cosine(&m, dim, dim),
        rank: numerical_rank(&m, dim, dim, epsilon)?,
    });

    for step in 1..=steps {
        let idx = sample_distinct(dim, batch, rng);
        let mut tape = Tape::new();
        let mat = tape.leaf(m.clone(), vec![dim, dim])?;
        let rows = tape.gather_rows(&mat, &idx)?;
        let sq_norms = tape.row_dot(&rows, &rows)?;
        let norms = tape.sqrt(&sq_norms)?;
        let normed = tape.div_rows(&rows, &norms)?;
        let gram = tape.matmul_nt(&normed, &normed)?;
        let total = tape.sum(&gram)?;
        // Mean over off-diagonal pairs; the diagonal sums to exactly `batch`.
        let centered = tape.add_scalar(&total, -(batch as f64))?;
        let loss = tape.mul_scalar(&centered, 1.0 / (batch * (batch - 1)) as f64)?;
        tape.backward(&loss)?;
        let g = tape.grad(&mat).expect("matrix is a leaf");
        adam_step(&mut m, g, &mut opt)?;

        if step % log_every == 0 {
            trace.push(DemoPoint {
                step,
                mean_cosine: full_matrix_mean_cosine(&m, dim, dim),
                rank: numerical_rank(&m, dim, dim, epsilon)?,
            });
        }
    }
    Ok(trace)
}

fn sample_distinct(n: usize, k: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    // Partial Fisher-Yates over 0..n.
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Mean pairwise cosine over all distinct row pairs.
pub fn full_matrix_mean_cosine(m: &[f64], rows: usize, cols: usize) -> f64 {
    let norms = kernels::row_norms(m, rows, cols);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..rows {
        for j in (i + 1)..rows {
            let d = kernels::dot(&m[i * cols..(i + 1) * cols], &m[j * cols..(j + 1) * cols]);
            total += d / (norms[i] * norms[j]);
            count += 1;
        }
    }
    total / count as f64
}
