//! Similarity bound, regularizer terms, and adjacency diagnostics.
//!
//! The bound caps the cosine of consecutive representations at
//! (|phi|^2 + g^2 |phi'|^2 - r^2/|w|^2) / (2 g |phi| |phi'|); the penalty is
//! the ReLU of how far the measured cosine exceeds it. The whole bound term
//! is treated as a constant during differentiation, and the next-pair
//! representation enters through a stop gradient, so only the current
//! representation is pushed.

use crate::error::{CoreError, Result};
use crate::kernels;
use crate::tape::Tape;
use crate::tensor::{Tensor, NORM_FLOOR};

fn check_norm(norm: f64, context: &'static str) -> Result<f64> {
    if norm <= NORM_FLOOR {
        return Err(CoreError::DegenerateVector {
            context,
            norm,
            floor: NORM_FLOOR,
        });
    }
    Ok(norm)
}

/// Cosine-similarity cap from the representation norms, the (scalar) reward
/// magnitude, and the head-weight norm.
pub fn beer_bound_from_norms(
    norm_phi: f64,
    norm_phi_next: f64,
    r_abs: f64,
    norm_w: f64,
    gamma: f64,
) -> f64 {
    debug_assert!(gamma > 0.0 && gamma < 1.0);
    (norm_phi * norm_phi + gamma * gamma * norm_phi_next * norm_phi_next
        - r_abs * r_abs / (norm_w * norm_w))
        / (2.0 * gamma * norm_phi * norm_phi_next)
}

/// Per-pair similarity cap. Errors when any participating vector is
/// degenerate (non-triviality assumption violated).
pub fn beer_bound(phi: &[f64], phi_next: &[f64], r: f64, w: &[f64], gamma: f64) -> Result<f64> {
    let np = check_norm(kernels::l2_norm(phi), "beer_bound phi")?;
    let nn = check_norm(kernels::l2_norm(phi_next), "beer_bound phi_next")?;
    let nw = check_norm(kernels::l2_norm(w), "beer_bound w")?;
    Ok(beer_bound_from_norms(np, nn, r.abs(), nw, gamma))
}

/// Per-sample bounds for a batch of representation rows. Masked rows yield
/// 0.0 (they contribute nothing downstream); unmasked degenerate rows error.
#[allow(clippy::too_many_arguments)]
pub fn batch_bounds(
    phi: &[f64],
    phi_next: &[f64],
    rewards: &[f64],
    w_norms: &[f64],
    mask: &[bool],
    rows: usize,
    cols: usize,
    gamma: f64,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; rows];
    for i in 0..rows {
        if !mask[i] {
            continue;
        }
        let np = check_norm(
            kernels::l2_norm(&phi[i * cols..(i + 1) * cols]),
            "bound phi",
        )?;
        let nn = check_norm(
            kernels::l2_norm(&phi_next[i * cols..(i + 1) * cols]),
            "bound phi_next",
        )?;
        let nw = check_norm(w_norms[i], "bound w")?;
        out[i] = beer_bound_from_norms(np, nn, rewards[i].abs(), nw, gamma);
    }
    Ok(out)
}

/// Inner-product-form bound gap per sample:
/// C = <phi, phi'> - (|phi|^2 + g^2 |phi'|^2 - r^2/|w|^2) / (2 g).
/// C <= 0 means the bound holds. Masked (terminal) rows yield `None`.
#[allow(clippy::too_many_arguments)]
pub fn bound_gap_values(
    phi: &[f64],
    phi_next: &[f64],
    rewards: &[f64],
    w_norms: &[f64],
    mask: &[bool],
    rows: usize,
    cols: usize,
    gamma: f64,
) -> Result<Vec<Option<f64>>> {
    let mut out = vec![None; rows];
    for i in 0..rows {
        if !mask[i] {
            continue;
        }
        let p = &phi[i * cols..(i + 1) * cols];
        let n = &phi_next[i * cols..(i + 1) * cols];
        let np = check_norm(kernels::l2_norm(p), "bound_gap phi")?;
        let nn = check_norm(kernels::l2_norm(n), "bound_gap phi_next")?;
        let nw = check_norm(w_norms[i], "bound_gap w")?;
        let r = rewards[i];
        let cap = (np * np + gamma * gamma * nn * nn - r * r / (nw * nw)) / (2.0 * gamma);
        out[i] = Some(kernels::dot(p, n) - cap);
    }
    Ok(out)
}

/// Logged adjacency statistics for one batch. Terminal rows are excluded;
/// degenerate rows are skipped rather than treated as errors, since this is
/// diagnostic output, not a loss term.
#[derive(Debug, Clone, Copy, Default)]
pub struct AdjacencyDiagnostics {
    pub mean_cosine: Option<f64>,
    pub bound_gap_mean: Option<f64>,
    pub bound_gap_max: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn adjacency_diagnostics(
    phi: &[f64],
    phi_next: &[f64],
    rewards: &[f64],
    w_norms: &[f64],
    mask: &[bool],
    rows: usize,
    cols: usize,
    gamma: f64,
) -> AdjacencyDiagnostics {
    let mut cos_sum = 0.0;
    let mut c_sum = 0.0;
    let mut c_max = f64::NEG_INFINITY;
    let mut count = 0usize;
    for i in 0..rows {
        if !mask[i] {
            continue;
        }
        let p = &phi[i * cols..(i + 1) * cols];
        let n = &phi_next[i * cols..(i + 1) * cols];
        let np = kernels::l2_norm(p);
        let nn = kernels::l2_norm(n);
        let nw = w_norms[i];
        if np <= NORM_FLOOR || nn <= NORM_FLOOR || nw <= NORM_FLOOR {
            continue;
        }
        let d = kernels::dot(p, n);
        let r = rewards[i];
        let cap = (np * np + gamma * gamma * nn * nn - r * r / (nw * nw)) / (2.0 * gamma);
        cos_sum += d / (np * nn);
        let c = d - cap;
        c_sum += c;
        c_max = c_max.max(c);
        count += 1;
    }
    if count == 0 {
        AdjacencyDiagnostics::default()
    } else {
        AdjacencyDiagnostics {
            mean_cosine: Some(cos_sum / count as f64),
            bound_gap_mean: Some(c_sum / count as f64),
            bound_gap_max: Some(c_max),
        }
    }
}

/// Batch-mean penalty ReLU(cos(phi, phi') - bound) on the tape. `phi_next`
/// should already be stop-gradiented (or constant) and `bounds` are plain
/// numbers, so gradient flows only through `phi` inside the cosine. Terminal
/// rows carry mask=false and contribute exactly 0.
pub fn beer_penalty_on_tape(
    tape: &mut Tape,
    phi: &Tensor,
    phi_next: &Tensor,
    bounds: &[f64],
    mask: &[bool],
) -> Result<Tensor> {
    let cos = tape.cosine_rows_masked(phi, phi_next, mask)?;
    let bounds_const = tape.constant(bounds.to_vec(), vec![bounds.len()])?;
    let gap = tape.sub(&cos, &bounds_const)?;
    let gated = tape.relu(&gap)?;
    tape.mean(&gated)
}

/// c0 * mean_i <phi_i, phi'_i> added to the minimized loss.
pub fn dr3_penalty_on_tape(
    tape: &mut Tape,
    phi: &Tensor,
    phi_next: &Tensor,
    c0: f64,
) -> Result<Tensor> {
    let d = tape.row_dot(phi, phi_next)?;
    let m = tape.mean(&d)?;
    tape.mul_scalar(&m, c0)
}

/// alpha * MSE between the scaled live auxiliary-head outputs and frozen,
/// initialization-time targets (already scaled by the caller). Scaling both
/// sides by the same factor keeps the penalty exactly 0 while the network
/// equals its snapshot.
#[allow(clippy::too_many_arguments)]
pub fn aux_head_penalty_on_tape(
    tape: &mut Tape,
    phi: &Tensor,
    aux_w: &Tensor,
    frozen_targets: &[f64],
    rows: usize,
    k: usize,
    alpha: f64,
    live_scale: f64,
) -> Result<Tensor> {
    let raw = tape.linear(phi, aux_w, None)?;
    let live = tape.mul_scalar(&raw, live_scale)?;
    let targets = tape.constant(frozen_targets.to_vec(), vec![rows, k])?;
    let diff = tape.sub(&live, &targets)?;
    let sq = tape.square(&diff)?;
    let mse = tape.mean(&sq)?;
    tape.mul_scalar(&mse, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_reward_bound_exceeds_one() {
        // Unit norms, r=0, gamma=.99: (1 + 0.9801) / 1.98 > 1, so the cosine
        // constraint is vacuous.
        let b = beer_bound_from_norms(1.0, 1.0, 0.0, 1.0, 0.99);
        assert!((b - 1.9801 / 1.98).abs() < 1e-15);
        assert!(b >= 1.0);
    }

    #[test]
    fn direct_substitution_quarter() {
        let b = beer_bound(&[1.0, 0.0], &[0.0, 1.0], 1.0, &[1.0, 0.0], 0.5).unwrap();
        assert!((b - 0.25).abs() < 1e-15);
    }

    #[test]
    fn degenerate_weight_errors() {
        assert!(matches!(
            beer_bound(&[1.0], &[1.0], 1.0, &[0.0], 0.5),
            Err(CoreError::DegenerateVector { .. })
        ));
    }

    #[test]
    fn bellman_consistent_rewards_respect_the_bound() {
        // r := phi.w - gamma phi'.w makes the Cauchy-Schwarz chain exact, so
        // cos(phi, phi') <= bound always. Brute-forced over random draws.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..10_000 {
            let dim = rng.random_range(2..8);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                (0..dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()
            };
            let phi = draw(&mut rng);
            let phi2 = draw(&mut rng);
            let w = draw(&mut rng);
            let gamma = [0.5, 0.9, 0.99][rng.random_range(0..3)];
            if kernels::l2_norm(&phi) <= 1e-6
                || kernels::l2_norm(&phi2) <= 1e-6
                || kernels::l2_norm(&w) <= 1e-6
            {
                continue;
            }
            let r = kernels::dot(&phi, &w) - gamma * kernels::dot(&phi2, &w);
            let bound = beer_bound(&phi, &phi2, r, &w, gamma).unwrap();
            let cos = kernels::dot(&phi, &phi2)
                / (kernels::l2_norm(&phi) * kernels::l2_norm(&phi2));
            assert!(
                cos <= bound + 1e-9,
                "cos {cos} exceeded bound {bound} (gamma {gamma})"
            );
        }
    }

    #[test]
    fn bound_gap_sign_matches_cosine_form() {
        // C <= 0 exactly when cos <= bound, cross-checked by reconstruction.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let phi: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let phi2: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let w: Vec<f64> = (0..4).map(|_| rng.random::<f64>() + 0.1).collect();
            let r = rng.random::<f64>();
            let np = kernels::l2_norm(&phi);
            let nn = kernels::l2_norm(&phi2);
            if np <= 1e-3 || nn <= 1e-3 {
                continue;
            }
            let nw = kernels::l2_norm(&w);
            let gamma = 0.9;
            let c = bound_gap_values(&phi, &phi2, &[r], &[nw], &[true], 1, 4, gamma).unwrap()[0]
                .unwrap();
            let bound = beer_bound_from_norms(np, nn, r.abs(), nw, gamma);
            let reconstructed = kernels::dot(&phi, &phi2) - bound * np * nn;
            assert!((c - reconstructed).abs() < 1e-10);
        }
    }

    #[test]
    fn bound_gap_examples() {
        // phi = phi', unit norms, r=0, gamma=.99: C = 1 - 1.9801/1.98.
        let c = bound_gap_values(&[1.0], &[1.0], &[0.0], &[1.0], &[true], 1, 1, 0.99).unwrap()[0]
            .unwrap();
        assert!((c - (1.0 - 1.9801 / 1.98)).abs() < 1e-15);
        assert!(c < 0.0);

        // Scaling |r| up strictly increases C.
        let c_small =
            bound_gap_values(&[1.0], &[1.0], &[0.5], &[1.0], &[true], 1, 1, 0.99).unwrap()[0]
                .unwrap();
        let c_large =
            bound_gap_values(&[1.0], &[1.0], &[2.0], &[1.0], &[true], 1, 1, 0.99).unwrap()[0]
                .unwrap();
        assert!(c_large > c_small && c_small > c);
    }

    #[test]
    fn satisfied_bound_gives_zero_penalty_and_zero_gradient() {
        let mut tape = Tape::new();
        // Orthogonal unit rows: cos = 0, bound 1.0051 > 0 -> gated to zero.
        let phi = tape.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let phi2c = tape
            .constant(vec![0.0, 1.0, 1.0, 0.0], vec![2, 2])
            .unwrap();
        let bounds = vec![1.005, 1.005];
        let r = beer_penalty_on_tape(&mut tape, &phi, &phi2c, &bounds, &[true, true]).unwrap();
        assert_eq!(r.item(), 0.0);
        tape.backward(&r).unwrap();
        assert!(tape.grad(&phi).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn violated_bound_penalty_value() {
        // cos = 0.9 against bound 0.25 gives R = 0.65.
        let mut tape = Tape::new();
        let s = (1.0_f64 - 0.81).sqrt();
        let phi = tape.leaf(vec![1.0, 0.0], vec![1, 2]).unwrap();
        let phi2 = tape.constant(vec![0.9, s], vec![1, 2]).unwrap();
        let r = beer_penalty_on_tape(&mut tape, &phi, &phi2, &[0.25], &[true]).unwrap();
        assert!((r.item() - 0.65).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_keeps_mean_penalty() {
        let mut tape = Tape::new();
        let s = (1.0_f64 - 0.81).sqrt();
        let phi1 = tape.leaf(vec![1.0, 0.0], vec![1, 2]).unwrap();
        let nxt1 = tape.constant(vec![0.9, s], vec![1, 2]).unwrap();
        let r1 = beer_penalty_on_tape(&mut tape, &phi1, &nxt1, &[0.25], &[true]).unwrap();

        let phi2 = tape
            .leaf(vec![1.0, 0.0, 1.0, 0.0], vec![2, 2])
            .unwrap();
        let nxt2 = tape.constant(vec![0.9, s, 0.9, s], vec![2, 2]).unwrap();
        let r2 =
            beer_penalty_on_tape(&mut tape, &phi2, &nxt2, &[0.25, 0.25], &[true, true]).unwrap();
        assert!((r1.item() - r2.item()).abs() < 1e-15);
    }

    #[test]
    fn all_terminal_batch_contributes_nothing() {
        let mut tape = Tape::new();
        let phi = tape.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let phi2 = tape.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let r =
            beer_penalty_on_tape(&mut tape, &phi, &phi2, &[0.0, 0.0], &[false, false]).unwrap();
        assert_eq!(r.item(), 0.0);
    }

    #[test]
    fn dr3_examples() {
        let mut tape = Tape::new();
        // Orthogonal rows: penalty 0.
        let phi = tape.leaf(vec![1.0, 0.0], vec![1, 2]).unwrap();
        let orth = tape.constant(vec![0.0, 1.0], vec![1, 2]).unwrap();
        let p0 = dr3_penalty_on_tape(&mut tape, &phi, &orth, 5e-3).unwrap();
        assert_eq!(p0.item(), 0.0);
        // Identical unit rows with c0 = 5e-3.
        let same = tape.constant(vec![1.0, 0.0], vec![1, 2]).unwrap();
        let p1 = dr3_penalty_on_tape(&mut tape, &phi, &same, 5e-3).unwrap();
        assert!((p1.item() - 5e-3).abs() < 1e-15);
    }

    #[test]
    fn aux_head_penalty_hand_mse() {
        // Single head, two samples: live outputs (2, 4), targets (1, 1):
        // mse = ((2-1)^2 + (4-1)^2)/2 = 5, alpha .1 -> 0.5.
        let mut tape = Tape::new();
        let phi = tape.constant(vec![2.0, 4.0], vec![2, 1]).unwrap();
        let aux_w = tape.leaf(vec![1.0], vec![1, 1]).unwrap();
        let p = aux_head_penalty_on_tape(&mut tape, &phi, &aux_w, &[1.0, 1.0], 2, 1, 0.1, 1.0)
            .unwrap();
        assert!((p.item() - 0.5).abs() < 1e-12);
    }
}
