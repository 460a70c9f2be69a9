//! Value and policy networks.
//!
//! The value network keeps the representation/head split explicit: a ReLU MLP
//! trunk produces the representation phi, and a bias-free linear head maps it
//! to Q values, so Q(s,a) = phi(s,a)^T w holds exactly (one head column per
//! action in the discrete case).

use rand::{Rng, RngCore};

use crate::error::Result;
use crate::kernels;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: Vec<f64>, // [d_in, d_out] row-major
    pub b: Option<Vec<f64>>,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearLayer {
    /// Uniform init in [-1/sqrt(d_in), 1/sqrt(d_in)] for weights and bias.
    pub fn init(d_in: usize, d_out: usize, bias: bool, rng: &mut dyn RngCore) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| -bound + rng.random::<f64>() * 2.0 * bound)
                .collect()
        };
        let w = draw(d_in * d_out);
        let b = if bias { Some(draw(d_out)) } else { None };
        LinearLayer { w, b, d_in, d_out }
    }

    pub fn forward_data(&self, x: &[f64], batch: usize) -> Vec<f64> {
        kernels::matmul_bias(
            x,
            &self.w,
            self.b.as_deref(),
            batch,
            self.d_in,
            self.d_out,
        )
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.as_ref().map_or(0, |b| b.len())
    }
}

/// MLP applying ReLU after every layer; the final activation is the
/// representation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
}

impl Mlp {
    pub fn init(dims: &[usize], rng: &mut dyn RngCore) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer::init(w[0], w[1], true, rng))
            .collect();
        Mlp { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().d_out
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().unwrap().d_in
    }

    pub fn forward_data(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut h = self.layers[0].forward_data(x, batch);
        h = kernels::relu(&h);
        for layer in &self.layers[1..] {
            h = layer.forward_data(&h, batch);
            h = kernels::relu(&h);
        }
        h
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }
}

/// Parameters of an MLP registered on a tape.
pub struct TapedMlp {
    layers: Vec<(Tensor, Option<Tensor>)>,
}

impl TapedMlp {
    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (w, b) in &self.layers {
            let lin = tape.linear(&h, w, b.as_ref())?;
            h = tape.relu(&lin)?;
        }
        Ok(h)
    }
}

fn tape_layer(
    tape: &mut Tape,
    layer: &LinearLayer,
    trainable: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let shape = vec![layer.d_in, layer.d_out];
    let w = if trainable {
        tape.leaf(layer.w.clone(), shape)?
    } else {
        tape.constant(layer.w.clone(), shape)?
    };
    let b = match &layer.b {
        Some(bias) => Some(if trainable {
            tape.leaf(bias.clone(), vec![layer.d_out])?
        } else {
            tape.constant(bias.clone(), vec![layer.d_out])?
        }),
        None => None,
    };
    Ok((w, b))
}

impl Mlp {
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> Result<TapedMlp> {
        let layers = self
            .layers
            .iter()
            .map(|l| tape_layer(tape, l, trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(TapedMlp { layers })
    }
}

// ── value network ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ValueNetwork {
    pub trunk: Mlp,
    /// Bias-free head, `[n_features, n_outputs]`; column a is the per-action
    /// weight vector w_a.
    pub head: Vec<f64>,
    /// Bias-free auxiliary heads `[n_features, k]`, present only when the
    /// auxiliary-head regularizer is configured.
    pub aux_heads: Option<Vec<f64>>,
    pub input_dim: usize,
    pub n_features: usize,
    pub n_outputs: usize,
    pub aux_k: usize,
}

impl ValueNetwork {
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        n_outputs: usize,
        aux_k: Option<usize>,
        rng: &mut dyn RngCore,
    ) -> Self {
        assert!(!hidden.is_empty(), "value network needs hidden layers");
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        let trunk = Mlp::init(&dims, rng);
        let n_features = *hidden.last().unwrap();
        let head = LinearLayer::init(n_features, n_outputs, false, rng).w;
        let aux_heads = aux_k.map(|k| LinearLayer::init(n_features, k, false, rng).w);
        ValueNetwork {
            trunk,
            head,
            aux_heads,
            input_dim,
            n_features,
            n_outputs,
            aux_k: aux_k.unwrap_or(0),
        }
    }

    pub fn phi_data(&self, x: &[f64], batch: usize) -> Vec<f64> {
        self.trunk.forward_data(x, batch)
    }

    /// `[batch, n_outputs]` Q values.
    pub fn q_values_data(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let phi = self.phi_data(x, batch);
        kernels::matmul_bias(&phi, &self.head, None, batch, self.n_features, self.n_outputs)
    }

    /// Q values, representation, and head weights for one input row. The Q
    /// entries equal dot(phi, w_column) bit-exactly.
    pub fn q_with_features(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, &[f64]) {
        let phi = self.phi_data(x, 1);
        let q = kernels::matmul_bias(&phi, &self.head, None, 1, self.n_features, self.n_outputs);
        (q, phi, &self.head)
    }

    pub fn aux_values_data(&self, x: &[f64], batch: usize) -> Option<Vec<f64>> {
        let aux = self.aux_heads.as_ref()?;
        let phi = self.phi_data(x, batch);
        Some(kernels::matmul_bias(
            &phi,
            aux,
            None,
            batch,
            self.n_features,
            self.aux_k,
        ))
    }

    /// Norm of head column `a` (the per-action weight vector).
    pub fn head_column_norm(&self, a: usize) -> f64 {
        kernels::column_norm(&self.head, self.n_features, self.n_outputs, a)
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count()
            + self.head.len()
            + self.aux_heads.as_ref().map_or(0, |a| a.len())
    }

    /// Named parameters in a fixed order (trunk layers, head, aux heads).
    pub fn params(&self) -> Vec<(String, &Vec<f64>, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.trunk.layers.iter().enumerate() {
            out.push((
                format!("trunk.{i}.w"),
                &layer.w,
                vec![layer.d_in, layer.d_out],
            ));
            if let Some(b) = &layer.b {
                out.push((format!("trunk.{i}.b"), b, vec![layer.d_out]));
            }
        }
        out.push((
            "head.w".to_string(),
            &self.head,
            vec![self.n_features, self.n_outputs],
        ));
        if let Some(aux) = &self.aux_heads {
            out.push((
                "aux.w".to_string(),
                aux,
                vec![self.n_features, self.aux_k],
            ));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = Vec::new();
        for (i, layer) in self.trunk.layers.iter_mut().enumerate() {
            out.push((format!("trunk.{i}.w"), &mut layer.w));
            if let Some(b) = &mut layer.b {
                out.push((format!("trunk.{i}.b"), b));
            }
        }
        out.push(("head.w".to_string(), &mut self.head));
        if let Some(aux) = &mut self.aux_heads {
            out.push(("aux.w".to_string(), aux));
        }
        out
    }
}

/// Value-network parameters registered on a tape.
pub struct TapedValueNet {
    pub trunk: TapedMlp,
    pub head: Tensor,
    pub aux: Option<Tensor>,
}

impl ValueNetwork {
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> Result<TapedValueNet> {
        let trunk = self.trunk.to_tape(tape, trainable)?;
        let head_shape = vec![self.n_features, self.n_outputs];
        let head = if trainable {
            tape.leaf(self.head.clone(), head_shape)?
        } else {
            tape.constant(self.head.clone(), head_shape)?
        };
        let aux = match &self.aux_heads {
            Some(a) => Some(if trainable {
                tape.leaf(a.clone(), vec![self.n_features, self.aux_k])?
            } else {
                tape.constant(a.clone(), vec![self.n_features, self.aux_k])?
            }),
            None => None,
        };
        Ok(TapedValueNet { trunk, head, aux })
    }
}

impl TapedValueNet {
    pub fn phi(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        self.trunk.forward(tape, x)
    }

    pub fn q_from_phi(&self, tape: &mut Tape, phi: &Tensor) -> Result<Tensor> {
        tape.linear(phi, &self.head, None)
    }

    /// Leaf tensors in the same order as [`ValueNetwork::params`].
    pub fn leaves(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for (w, b) in &self.trunk.layers {
            out.push(w);
            if let Some(b) = b {
                out.push(b);
            }
        }
        out.push(&self.head);
        if let Some(aux) = &self.aux {
            out.push(aux);
        }
        out
    }
}

// ── actor ───────────────────────────────────────────────────────────────

/// Deterministic policy network: ReLU hidden layers, then a linear layer with
/// tanh squashing scaled to the action bounds.
#[derive(Debug, Clone)]
pub struct Actor {
    pub hidden: Mlp,
    pub out: LinearLayer,
    pub action_low: f64,
    pub action_high: f64,
}

impl Actor {
    pub fn init(
        obs_dim: usize,
        hidden: &[usize],
        act_dim: usize,
        action_low: f64,
        action_high: f64,
        rng: &mut dyn RngCore,
    ) -> Self {
        assert!(!hidden.is_empty());
        let mut dims = vec![obs_dim];
        dims.extend_from_slice(hidden);
        let net = Mlp::init(&dims, rng);
        let out = LinearLayer::init(*hidden.last().unwrap(), act_dim, true, rng);
        Actor {
            hidden: net,
            out,
            action_low,
            action_high,
        }
    }

    fn scale(&self) -> f64 {
        (self.action_high - self.action_low) / 2.0
    }

    fn offset(&self) -> f64 {
        (self.action_high + self.action_low) / 2.0
    }

    pub fn act_dim(&self) -> usize {
        self.out.d_out
    }

    pub fn forward_data(&self, obs: &[f64], batch: usize) -> Vec<f64> {
        let h = self.hidden.forward_data(obs, batch);
        let raw = self.out.forward_data(&h, batch);
        raw.iter()
            .map(|v| v.tanh() * self.scale() + self.offset())
            .collect()
    }

    pub fn params(&self) -> Vec<(String, &Vec<f64>, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.hidden.layers.iter().enumerate() {
            out.push((
                format!("hidden.{i}.w"),
                &layer.w,
                vec![layer.d_in, layer.d_out],
            ));
            if let Some(b) = &layer.b {
                out.push((format!("hidden.{i}.b"), b, vec![layer.d_out]));
            }
        }
        out.push((
            "out.w".to_string(),
            &self.out.w,
            vec![self.out.d_in, self.out.d_out],
        ));
        if let Some(b) = &self.out.b {
            out.push(("out.b".to_string(), b, vec![self.out.d_out]));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = Vec::new();
        for (i, layer) in self.hidden.layers.iter_mut().enumerate() {
            out.push((format!("hidden.{i}.w"), &mut layer.w));
            if let Some(b) = &mut layer.b {
                out.push((format!("hidden.{i}.b"), b));
            }
        }
        out.push(("out.w".to_string(), &mut self.out.w));
        if let Some(b) = &mut self.out.b {
            out.push(("out.b".to_string(), b));
        }
        out
    }
}

pub struct TapedActor {
    hidden: TapedMlp,
    out_w: Tensor,
    out_b: Tensor,
    scale: f64,
    offset: f64,
}

impl Actor {
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> Result<TapedActor> {
        let hidden = self.hidden.to_tape(tape, trainable)?;
        let (out_w, out_b) = tape_layer(tape, &self.out, trainable)?;
        Ok(TapedActor {
            hidden,
            out_w,
            out_b: out_b.expect("actor output layer has a bias"),
            scale: self.scale(),
            offset: self.offset(),
        })
    }
}

impl TapedActor {
    pub fn forward(&self, tape: &mut Tape, obs: &Tensor) -> Result<Tensor> {
        let h = self.hidden.forward(tape, obs)?;
        let raw = tape.linear(&h, &self.out_w, Some(&self.out_b))?;
        let squashed = tape.tanh(&raw)?;
        let scaled = tape.mul_scalar(&squashed, self.scale)?;
        tape.add_scalar(&scaled, self.offset)
    }

    pub fn leaves(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for (w, b) in &self.hidden.layers {
            out.push(w);
            if let Some(b) = b {
                out.push(b);
            }
        }
        out.push(&self.out_w);
        out.push(&self.out_b);
        out
    }
}

// ── target updates ──────────────────────────────────────────────────────

/// theta' <- tau * theta + (1 - tau) * theta', elementwise.
pub fn soft_update_slice(online: &[f64], target: &mut [f64], tau: f64) {
    debug_assert_eq!(online.len(), target.len());
    for i in 0..target.len() {
        target[i] = tau * online[i] + (1.0 - tau) * target[i];
    }
}

pub fn soft_update_value_net(online: &ValueNetwork, target: &mut ValueNetwork, tau: f64) {
    let src: Vec<Vec<f64>> = online.params().into_iter().map(|(_, d, _)| d.clone()).collect();
    for ((_, dst), s) in target.params_mut().into_iter().zip(src) {
        soft_update_slice(&s, dst, tau);
    }
}

pub fn soft_update_actor(online: &Actor, target: &mut Actor, tau: f64) {
    let src: Vec<Vec<f64>> = online.params().into_iter().map(|(_, d, _)| d.clone()).collect();
    for ((_, dst), s) in target.params_mut().into_iter().zip(src) {
        soft_update_slice(&s, dst, tau);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn critic_parameter_count_formula() {
        // in*h + h + h*h + h + h*1 for two hidden layers and a bias-free head.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (input, h) = (4, 32);
        let net = ValueNetwork::init(input, &[h, h], 1, None, &mut rng);
        assert_eq!(net.param_count(), input * h + h + h * h + h + h);
    }

    #[test]
    fn head_has_no_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = ValueNetwork::init(20, &[32, 32], 4, None, &mut rng);
        assert_eq!(net.head.len(), 32 * 4);
        let names: Vec<String> = net.params().into_iter().map(|(n, _, _)| n).collect();
        assert!(names.contains(&"head.w".to_string()));
        assert!(!names.iter().any(|n| n == "head.b"));
    }

    #[test]
    fn q_equals_phi_dot_head_column_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ValueNetwork::init(6, &[16, 16], 3, None, &mut rng);
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.3).sin()).collect();
        let (q, phi, w) = net.q_with_features(&x);
        for a in 0..3 {
            let col: Vec<f64> = (0..16).map(|k| w[k * 3 + a]).collect();
            let dot = kernels::dot(&phi, &col);
            assert_eq!(q[a].to_bits(), dot.to_bits());
        }
    }

    #[test]
    fn zero_trunk_weights_give_bias_representation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = ValueNetwork::init(4, &[8], 2, None, &mut rng);
        for layer in &mut net.trunk.layers {
            layer.w.iter_mut().for_each(|v| *v = 0.0);
            if let Some(b) = &mut layer.b {
                b.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (q, phi, _) = net.q_with_features(&[1.0, -2.0, 3.0, 4.0]);
        assert!(phi.iter().all(|&v| v == 0.0));
        assert!(q.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_built_single_unit_forward() {
        // trunk 1->1 with w=1, b=0 so phi = relu(x); head w=2: q = 2x for x>0.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = ValueNetwork::init(1, &[1], 1, None, &mut rng);
        net.trunk.layers[0].w = vec![1.0];
        net.trunk.layers[0].b = Some(vec![0.0]);
        net.head = vec![2.0];
        let (q, phi, _) = net.q_with_features(&[3.0]);
        assert_eq!(phi, vec![3.0]);
        assert_eq!(q, vec![6.0]);
    }

    #[test]
    fn tape_forward_matches_data_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = ValueNetwork::init(5, &[12, 12], 2, None, &mut rng);
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).cos()).collect();
        let data_q = net.q_values_data(&x, 2);

        let mut tape = Tape::new();
        let taped = net.to_tape(&mut tape, true).unwrap();
        let xc = tape.constant(x, vec![2, 5]).unwrap();
        let phi = taped.phi(&mut tape, &xc).unwrap();
        let q = taped.q_from_phi(&mut tape, &phi).unwrap();
        assert!(q
            .data()
            .iter()
            .zip(&data_q)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn actor_outputs_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let actor = Actor::init(3, &[16, 16], 1, -2.0, 2.0, &mut rng);
        for k in 0..50 {
            let obs = vec![(k as f64).sin(), (k as f64).cos(), k as f64 / 10.0];
            let a = actor.forward_data(&obs, 1);
            assert!(a[0] > -2.0 && a[0] < 2.0);
        }
    }

    #[test]
    fn soft_update_examples() {
        let mut target = vec![0.0];
        soft_update_slice(&[1.0], &mut target, 0.005);
        assert!((target[0] - 0.005).abs() < 1e-15);

        let mut t2 = vec![3.0, -1.0];
        soft_update_slice(&[5.0, 2.0], &mut t2, 1.0);
        assert_eq!(t2, vec![5.0, 2.0]);

        let mut t3 = vec![0.7];
        soft_update_slice(&[0.7], &mut t3, 0.3);
        assert!((t3[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ValueNetwork::init(5, &[8, 8], 2, None, &mut ChaCha8Rng::seed_from_u64(11));
        let b = ValueNetwork::init(5, &[8, 8], 2, None, &mut ChaCha8Rng::seed_from_u64(11));
        for ((_, pa, _), (_, pb, _)) in a.params().into_iter().zip(b.params()) {
            assert!(pa.iter().zip(pb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
