//! Deterministic policy gradient for continuous control: a critic over
//! (state, action) with the expectation-form similarity regularizer, plus an
//! actor trained to climb the critic. No twin critics, target smoothing, or
//! delayed updates.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::regularizers::{
    adjacency_diagnostics, aux_head_penalty_on_tape, batch_bounds, beer_penalty_on_tape,
    dr3_penalty_on_tape,
};
use super::{
    concat_rows, flatten_batch, ActionMode, AdjacencyBatch, AgentConfig, Policy, RegKind,
    StepMetrics, ValueModel,
};
use crate::adam::{adam_step, AdamState};
use crate::env::{Action, Transition};
use crate::error::{CoreError, Result};
use crate::kernels;
use crate::net::{soft_update_actor, soft_update_value_net, Actor, ValueNetwork};
use crate::replay::ReplayBuffer;
use crate::tape::Tape;

pub struct DpgAgent {
    pub cfg: AgentConfig,
    pub critic: ValueNetwork,
    pub critic_target: ValueNetwork,
    pub actor: Actor,
    pub actor_target: Actor,
    pub frozen: Option<ValueNetwork>,
    pub opt_critic: Vec<AdamState>,
    pub opt_actor: Vec<AdamState>,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_low: f64,
    pub action_high: f64,
}

impl DpgAgent {
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        action_low: f64,
        action_high: f64,
        cfg: AgentConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        cfg.validate()?;
        let aux_k = (cfg.regularizer == RegKind::Infer).then_some(cfg.infer.heads);
        // Init order is fixed (critic, then actor) so a seed pins both.
        let critic = ValueNetwork::init(obs_dim + act_dim, &cfg.hidden, 1, aux_k, rng);
        let actor = Actor::init(obs_dim, &cfg.hidden, act_dim, action_low, action_high, rng);
        let critic_target = critic.clone();
        let actor_target = actor.clone();
        let frozen = aux_k.map(|_| critic.clone());
        let opt_critic = critic
            .params()
            .iter()
            .map(|(_, d, _)| AdamState::new(d.len(), cfg.lr_critic))
            .collect();
        let opt_actor = actor
            .params()
            .iter()
            .map(|(_, d, _)| AdamState::new(d.len(), cfg.lr_actor))
            .collect();
        Ok(DpgAgent {
            cfg,
            critic,
            critic_target,
            actor,
            actor_target,
            frozen,
            opt_critic,
            opt_actor,
            obs_dim,
            act_dim,
            action_low,
            action_high,
        })
    }

    pub fn select_action(&self, obs: &[f64], mode: ActionMode, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut a = self.actor.forward_data(obs, 1);
        if mode == ActionMode::Explore && self.cfg.sigma > 0.0 {
            let noise = Normal::new(0.0, self.cfg.sigma).expect("valid sigma");
            for v in &mut a {
                *v = (*v + noise.sample(rng)).clamp(self.action_low, self.action_high);
            }
        }
        a
    }

    fn taken_actions(&self, batch: &[&Transition]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(batch.len() * self.act_dim);
        for t in batch {
            match &t.action {
                Action::Continuous(a) if a.len() == self.act_dim => out.extend_from_slice(a),
                other => {
                    return Err(CoreError::ActionOutOfRange {
                        got: format!("{other:?}"),
                        space: format!("Continuous dim {}", self.act_dim),
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn train_step(
        &mut self,
        buffer: &ReplayBuffer,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepMetrics> {
        if buffer.len() < self.cfg.warmup_steps.max(self.cfg.batch_size) {
            return Err(CoreError::UnderfullBuffer {
                size: buffer.len(),
                requested: self.cfg.warmup_steps.max(self.cfg.batch_size),
            });
        }
        let batch = buffer.sample_uniform(self.cfg.batch_size, rng)?;
        let b = batch.len();
        let flat = flatten_batch(&batch, self.obs_dim);
        let actions = self.taken_actions(&batch)?;
        let in_dim = self.obs_dim + self.act_dim;

        // Critic target: y = r + gamma Q'(s', pi'(s')) (1 - done).
        let a2 = self.actor_target.forward_data(&flat.next_states, b);
        let x2 = concat_rows(&flat.next_states, &a2, b, self.obs_dim, self.act_dim);
        let q2 = self.critic_target.q_values_data(&x2, b);
        let y: Vec<f64> = (0..b)
            .map(|i| {
                flat.rewards[i]
                    + self.cfg.gamma * q2[i] * if flat.mask[i] { 1.0 } else { 0.0 }
            })
            .collect();

        let x = concat_rows(&flat.states, &actions, b, self.obs_dim, self.act_dim);
        let w_norm = kernels::l2_norm(&self.critic.head);
        let w_norms = vec![w_norm; b];

        let reg_mask: Vec<bool> = if self.cfg.mask_terminal_regularizer {
            flat.mask.clone()
        } else {
            vec![true; b]
        };

        // ── critic update ───────────────────────────────────────────────
        let mut tape = Tape::new();
        let taped = self.critic.to_tape(&mut tape, true)?;
        let x_const = tape.constant(x.clone(), vec![b, in_dim])?;
        let phi = taped.phi(&mut tape, &x_const)?;
        let q = taped.q_from_phi(&mut tape, &phi)?;
        let q_flat = tape.reshape(&q, &[b])?;
        let y_const = tape.constant(y, vec![b])?;
        let diff = tape.sub(&y_const, &q_flat)?;
        let sq = tape.square(&diff)?;
        let mut loss = tape.mean(&sq)?;
        let td_loss = loss.item();

        let n_feat = self.critic.n_features;
        let beer_active = self.cfg.regularizer == RegKind::Beer && self.cfg.beta > 0.0;
        let dr3_active = self.cfg.regularizer == RegKind::Dr3 && self.cfg.dr3_c0 != 0.0;

        let next_on_tape = (beer_active || dr3_active) && !self.cfg.next_phi_from_target;
        let (phi_next_tensor, phi_next_vals) = if next_on_tape {
            let x2_const = tape.constant(x2.clone(), vec![b, in_dim])?;
            let p2 = taped.phi(&mut tape, &x2_const)?;
            let sg = tape.stop_gradient(&p2)?;
            let vals = sg.data().to_vec();
            (Some(sg), vals)
        } else {
            let src = if self.cfg.next_phi_from_target {
                &self.critic_target
            } else {
                &self.critic
            };
            (None, src.phi_data(&x2, b))
        };

        let mut regularizer_value = 0.0;
        if beer_active {
            let bounds = batch_bounds(
                phi.data(),
                &phi_next_vals,
                &flat.rewards,
                &w_norms,
                &reg_mask,
                b,
                n_feat,
                self.cfg.gamma,
            )?;
            let phi_next = match &phi_next_tensor {
                Some(t) => t.clone(),
                None => tape.constant(phi_next_vals.clone(), vec![b, n_feat])?,
            };
            let penalty = beer_penalty_on_tape(&mut tape, &phi, &phi_next, &bounds, &reg_mask)?;
            regularizer_value = penalty.item();
            let scaled = tape.mul_scalar(&penalty, self.cfg.beta)?;
            loss = tape.add(&loss, &scaled)?;
        } else if dr3_active {
            let phi_next = match &phi_next_tensor {
                Some(t) => t.clone(),
                None => tape.constant(phi_next_vals.clone(), vec![b, n_feat])?,
            };
            let penalty = dr3_penalty_on_tape(&mut tape, &phi, &phi_next, self.cfg.dr3_c0)?;
            regularizer_value = penalty.item();
            loss = tape.add(&loss, &penalty)?;
        } else if self.cfg.regularizer == RegKind::Infer && self.cfg.infer.alpha != 0.0 {
            let frozen = self
                .frozen
                .as_ref()
                .ok_or(CoreError::MissingFrozenSnapshot)?;
            let targets: Vec<f64> = frozen
                .aux_values_data(&x, b)
                .ok_or(CoreError::MissingFrozenSnapshot)?
                .iter()
                .map(|v| v * self.cfg.infer.beta)
                .collect();
            let aux_w = taped.aux.as_ref().ok_or(CoreError::MissingFrozenSnapshot)?;
            let penalty = aux_head_penalty_on_tape(
                &mut tape,
                &phi,
                aux_w,
                &targets,
                b,
                self.cfg.infer.heads,
                self.cfg.infer.alpha,
                self.cfg.infer.beta,
            )?;
            regularizer_value = penalty.item();
            loss = tape.add(&loss, &penalty)?;
        }

        let diag = adjacency_diagnostics(
            phi.data(),
            &phi_next_vals,
            &flat.rewards,
            &w_norms,
            &reg_mask,
            b,
            n_feat,
            self.cfg.gamma,
        );

        tape.backward(&loss)?;
        {
            let leaves = taped.leaves();
            let mut params = self.critic.params_mut();
            debug_assert_eq!(leaves.len(), params.len());
            for ((leaf, (_, param)), state) in leaves
                .iter()
                .zip(params.iter_mut())
                .zip(self.opt_critic.iter_mut())
            {
                match tape.grad(leaf) {
                    Some(g) => adam_step(param, g, state)?,
                    None => {
                        let zeros = vec![0.0; param.len()];
                        adam_step(param, &zeros, state)?;
                    }
                }
            }
        }

        // ── actor update (critic frozen) ────────────────────────────────
        let mut atape = Tape::new();
        let taped_actor = self.actor.to_tape(&mut atape, true)?;
        let critic_const = self.critic.to_tape(&mut atape, false)?;
        let s_const = atape.constant(flat.states.clone(), vec![b, self.obs_dim])?;
        let a_pred = taped_actor.forward(&mut atape, &s_const)?;
        let qin = atape.concat2(&s_const, &a_pred)?;
        let phi_a = critic_const.phi(&mut atape, &qin)?;
        let q_a = critic_const.q_from_phi(&mut atape, &phi_a)?;
        let q_mean = atape.mean(&q_a)?;
        let actor_loss = atape.mul_scalar(&q_mean, -1.0)?;
        atape.backward(&actor_loss)?;
        {
            let leaves = taped_actor.leaves();
            let mut params = self.actor.params_mut();
            debug_assert_eq!(leaves.len(), params.len());
            for ((leaf, (_, param)), state) in leaves
                .iter()
                .zip(params.iter_mut())
                .zip(self.opt_actor.iter_mut())
            {
                match atape.grad(leaf) {
                    Some(g) => adam_step(param, g, state)?,
                    None => {
                        let zeros = vec![0.0; param.len()];
                        adam_step(param, &zeros, state)?;
                    }
                }
            }
        }

        soft_update_value_net(&self.critic, &mut self.critic_target, self.cfg.tau);
        soft_update_actor(&self.actor, &mut self.actor_target, self.cfg.tau);

        Ok(StepMetrics {
            td_loss,
            regularizer_value,
            mean_cosine: diag.mean_cosine,
            bound_gap_mean: diag.bound_gap_mean,
            bound_gap_max: diag.bound_gap_max,
        })
    }
}

impl Policy for DpgAgent {
    fn greedy_action(&self, obs: &[f64]) -> Action {
        Action::Continuous(self.actor.forward_data(obs, 1))
    }

    fn q_estimate(&self, obs: &[f64], action: &Action) -> f64 {
        match action {
            Action::Continuous(a) => {
                let x = concat_rows(obs, a, 1, self.obs_dim, self.act_dim);
                self.critic.q_values_data(&x, 1)[0]
            }
            _ => f64::NAN,
        }
    }
}

impl ValueModel for DpgAgent {
    fn n_features(&self) -> usize {
        self.critic.n_features
    }

    fn gamma(&self) -> f64 {
        self.cfg.gamma
    }

    fn phi_batch(&self, batch: &[&Transition]) -> Vec<f64> {
        let flat = flatten_batch(batch, self.obs_dim);
        let actions = self.taken_actions(batch).expect("continuous batch");
        let x = concat_rows(&flat.states, &actions, flat.len, self.obs_dim, self.act_dim);
        self.critic.phi_data(&x, flat.len)
    }

    fn adjacency_batch(&self, batch: &[&Transition]) -> AdjacencyBatch {
        let flat = flatten_batch(batch, self.obs_dim);
        let actions = self.taken_actions(batch).expect("continuous batch");
        let x = concat_rows(&flat.states, &actions, flat.len, self.obs_dim, self.act_dim);
        let a2 = self.actor_target.forward_data(&flat.next_states, flat.len);
        let x2 = concat_rows(&flat.next_states, &a2, flat.len, self.obs_dim, self.act_dim);
        let src = if self.cfg.next_phi_from_target {
            &self.critic_target
        } else {
            &self.critic
        };
        let w_norm = kernels::l2_norm(&self.critic.head);
        AdjacencyBatch {
            rows: flat.len,
            cols: self.critic.n_features,
            phi: self.critic.phi_data(&x, flat.len),
            phi_next: src.phi_data(&x2, flat.len),
            rewards: flat.rewards,
            w_norms: vec![w_norm; flat.len],
            mask: if self.cfg.mask_terminal_regularizer {
                flat.mask
            } else {
                vec![true; flat.len]
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Environment, Pendulum};
    use rand::{Rng, SeedableRng};

    fn small_cfg(reg: RegKind, beta: f64) -> AgentConfig {
        AgentConfig {
            beta,
            regularizer: reg,
            warmup_steps: 64,
            batch_size: 16,
            hidden: vec![16, 16],
            lr_critic: 1e-3,
            lr_actor: 1e-3,
            ..AgentConfig::default()
        }
    }

    fn fill_buffer(n: usize, seed: u64) -> ReplayBuffer {
        let mut env = Pendulum::default_episode();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buffer = ReplayBuffer::new(n);
        env.reset(&mut rng);
        for _ in 0..n {
            let torque = rng.random::<f64>() * 4.0 - 2.0;
            let t = env.step(&Action::Continuous(vec![torque])).unwrap();
            let done = t.done;
            buffer.push(t);
            if done {
                env.reset(&mut rng);
            }
        }
        buffer
    }

    #[test]
    fn exploration_noise_is_clipped_to_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AgentConfig {
            sigma: 5.0,
            ..small_cfg(RegKind::None, 0.0)
        };
        let agent = DpgAgent::new(3, 1, -2.0, 2.0, cfg, &mut rng).unwrap();
        for _ in 0..200 {
            let a = agent.select_action(&[1.0, 0.0, 0.0], ActionMode::Explore, &mut rng);
            assert!(a[0] >= -2.0 && a[0] <= 2.0);
        }
    }

    #[test]
    fn greedy_mode_skips_the_noise_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let agent =
            DpgAgent::new(3, 1, -2.0, 2.0, small_cfg(RegKind::None, 0.0), &mut rng).unwrap();
        let a = agent.select_action(&[0.5, 0.5, 0.0], ActionMode::Greedy, &mut rng);
        let b = agent.select_action(&[0.5, 0.5, 0.0], ActionMode::Greedy, &mut rng);
        assert_eq!(a, b);
    }

    #[test]
    fn beta_zero_matches_plain_dpg_bitwise() {
        let run = |reg: RegKind, beta: f64| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let mut agent = DpgAgent::new(3, 1, -2.0, 2.0, small_cfg(reg, beta), &mut rng).unwrap();
            let buffer = fill_buffer(300, 2);
            let mut train_rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..20 {
                agent.train_step(&buffer, &mut train_rng).unwrap();
            }
            let mut out: Vec<f64> = agent
                .critic
                .params()
                .into_iter()
                .flat_map(|(_, d, _)| d.clone())
                .collect();
            out.extend(agent.actor.params().into_iter().flat_map(|(_, d, _)| d.clone()));
            out
        };
        let plain = run(RegKind::None, 0.0);
        let beer0 = run(RegKind::Beer, 0.0);
        assert!(plain
            .iter()
            .zip(&beer0)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn tau_one_copies_targets_after_one_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AgentConfig {
            tau: 1.0,
            ..small_cfg(RegKind::None, 0.0)
        };
        let mut agent = DpgAgent::new(3, 1, -2.0, 2.0, cfg, &mut rng).unwrap();
        let buffer = fill_buffer(200, 9);
        let mut train_rng = ChaCha8Rng::seed_from_u64(0);
        agent.train_step(&buffer, &mut train_rng).unwrap();
        for ((_, a, _), (_, b, _)) in agent
            .critic
            .params()
            .into_iter()
            .zip(agent.critic_target.params())
        {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x == y));
        }
    }

    #[test]
    fn single_transition_critic_gradient_matches_hand_derivation() {
        // One hidden unit: phi = relu(w1 s + w2 a + c), q = w_h phi.
        // With y fixed, d loss / d w_h = -2 (y - q) phi, and
        // d loss / d w1 = -2 (y - q) w_h s on the active side.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AgentConfig {
            batch_size: 1,
            warmup_steps: 1,
            hidden: vec![1],
            gamma: 0.5,
            tau: 1e-9,
            lr_critic: 1e-9,
            lr_actor: 1e-9,
            ..small_cfg(RegKind::None, 0.0)
        };
        let mut agent = DpgAgent::new(1, 1, -2.0, 2.0, cfg, &mut rng).unwrap();
        agent.critic.trunk.layers[0].w = vec![1.0, 0.5]; // w1, w2
        agent.critic.trunk.layers[0].b = Some(vec![0.25]);
        agent.critic.head = vec![2.0];
        // Mirror into the target so y is hand-computable.
        agent.critic_target = agent.critic.clone();
        // Actor with zero weights outputs tanh(bias) scaled; zero those too.
        for (_, p) in agent.actor.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        agent.actor_target = agent.actor.clone();

        let mut buffer = ReplayBuffer::new(4);
        let (s, a, r, s2) = (3.0, -1.0, 0.7, 2.0);
        buffer.push(Transition {
            state: vec![s],
            action: Action::Continuous(vec![a]),
            reward: r,
            next_state: vec![s2],
            done: false,
        });

        // Hand: phi = relu(3 - 0.5 + 0.25) = 2.75, q = 5.5.
        // Next action a2 = 0, phi2 = relu(2 + 0.25) = 2.25, q2 = 4.5,
        // y = 0.7 + 0.5 * 4.5 = 2.95. dq = y - q = -2.55.
        // d loss/d w_h = -2 dq phi = 14.025 -> Adam moves w_h down.
        let mut train_rng = ChaCha8Rng::seed_from_u64(0);
        let m = agent.train_step(&buffer, &mut train_rng).unwrap();
        let expected_td = (2.95_f64 - 5.5).powi(2);
        assert!((m.td_loss - expected_td).abs() < 1e-12);
        // lr is tiny, so the Adam step direction is what we can observe:
        // sign(delta) = -sign(gradient).
        let w_h = agent.critic.head[0];
        assert!(w_h < 2.0 && (2.0 - w_h) < 1e-6);
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut agent =
                DpgAgent::new(3, 1, -2.0, 2.0, small_cfg(RegKind::Beer, 1e-3), &mut rng)
                    .unwrap();
            let buffer = fill_buffer(300, 8);
            let mut train_rng = ChaCha8Rng::seed_from_u64(4);
            let mut trace = Vec::new();
            for _ in 0..30 {
                let m = agent.train_step(&buffer, &mut train_rng).unwrap();
                trace.push(m.td_loss);
            }
            trace
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
