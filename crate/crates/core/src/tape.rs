//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Operations are recorded on an append-only [`Tape`] in forward order, each
//! node holding its operation id, input handles, and whatever values its
//! backward rule needs. `backward` visits nodes in strict reverse insertion
//! order exactly once. A tape lives for one optimizer step; build a fresh one
//! per step rather than resetting.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{CoreError, Result};
use crate::kernels;
use crate::tensor::{NodeHandle, Tensor, NORM_FLOOR};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        x_saved: Vec<f64>,
        w_saved: Vec<f64>,
        batch: usize,
        d_in: usize,
        d_out: usize,
    },
    Relu {
        x: usize,
        x_saved: Vec<f64>,
    },
    Tanh {
        x: usize,
        y_saved: Vec<f64>,
    },
    StopGradient,
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
        a_saved: Vec<f64>,
        b_saved: Vec<f64>,
    },
    Div {
        a: usize,
        b: usize,
        a_saved: Vec<f64>,
        b_saved: Vec<f64>,
    },
    Square {
        x: usize,
        x_saved: Vec<f64>,
    },
    Sqrt {
        x: usize,
        y_saved: Vec<f64>,
    },
    AddScalar {
        x: usize,
    },
    MulScalar {
        x: usize,
        c: f64,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
        n: usize,
    },
    Dot {
        a: usize,
        b: usize,
        a_saved: Vec<f64>,
        b_saved: Vec<f64>,
    },
    L2Norm {
        x: usize,
        x_saved: Vec<f64>,
        norm: f64,
    },
    RowDot {
        a: usize,
        b: usize,
        a_saved: Vec<f64>,
        b_saved: Vec<f64>,
        rows: usize,
        cols: usize,
    },
    /// Per-row cosine similarity with a row mask; masked rows produce 0 and
    /// receive no gradient. Fused so masked rows never divide by their norms.
    CosineRows {
        a: usize,
        b: usize,
        a_saved: Vec<f64>,
        b_saved: Vec<f64>,
        mask: Vec<bool>,
        cos: Vec<f64>,
        norm_a: Vec<f64>,
        norm_b: Vec<f64>,
        rows: usize,
        cols: usize,
    },
    Gather {
        x: usize,
        idx: Vec<usize>,
        cols: usize,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
        cols: usize,
    },
    Concat2 {
        a: usize,
        b: usize,
        rows: usize,
        a_cols: usize,
        b_cols: usize,
    },
    /// `a [m,k] * b[n,k]^T -> [m,n]`.
    MatMulNT {
        a: usize,
        b: usize,
        a_saved: Vec<f64>,
        b_saved: Vec<f64>,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Divide each row of `x [rows, cols]` by the matching entry of `d [rows]`.
    DivRows {
        x: usize,
        d: usize,
        x_saved: Vec<f64>,
        d_saved: Vec<f64>,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    numel: usize,
    requires_grad: bool,
}

pub struct Tape {
    uid: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn debug_check_finite(context: &'static str, data: &[f64]) {
    if cfg!(debug_assertions) {
        for &v in data {
            debug_assert!(v.is_finite(), "non-finite value out of {context}");
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            uid: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            numel: data.len(),
            requires_grad,
        });
        self.grads.push(None);
        Tensor {
            data,
            shape,
            requires_grad,
            tape_id: Some(NodeHandle {
                tape_uid: self.uid,
                index,
            }),
        }
    }

    fn id_of(&self, t: &Tensor, op: &'static str) -> Result<usize> {
        match t.tape_id {
            Some(h) if h.tape_uid == self.uid => Ok(h.index),
            _ => Err(CoreError::DetachedTensor { op }),
        }
    }

    /// Register a trainable leaf. Gradients accumulate for it during backward.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "leaf",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(Op::Leaf, data, shape, true))
    }

    /// Register a non-trainable value (targets, masks, inputs).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(Op::Constant, data, shape, false))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Tensor {
        self.push(Op::Constant, vec![v], vec![], false)
    }

    // ── layers and activations ──────────────────────────────────────────

    /// `x [batch, d_in] * w [d_in, d_out] (+ b [d_out])`.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let xid = self.id_of(x, "linear")?;
        let wid = self.id_of(w, "linear")?;
        if x.shape.len() != 2 || w.shape.len() != 2 || x.shape[1] != w.shape[0] {
            return Err(CoreError::ShapeMismatch {
                op: "linear",
                lhs: x.shape.clone(),
                rhs: w.shape.clone(),
            });
        }
        let (batch, d_in, d_out) = (x.shape[0], x.shape[1], w.shape[1]);
        let bid = match b {
            Some(bias) => {
                let id = self.id_of(bias, "linear")?;
                if bias.shape != [d_out] {
                    return Err(CoreError::ShapeMismatch {
                        op: "linear_bias",
                        lhs: bias.shape.clone(),
                        rhs: vec![d_out],
                    });
                }
                Some(id)
            }
            None => None,
        };
        let data = kernels::matmul_bias(
            &x.data,
            &w.data,
            b.map(|t| t.data.as_slice()),
            batch,
            d_in,
            d_out,
        );
        debug_check_finite("linear", &data);
        let rg = x.requires_grad
            || w.requires_grad
            || b.map(|t| t.requires_grad).unwrap_or(false);
        Ok(self.push(
            Op::Linear {
                x: xid,
                w: wid,
                b: bid,
                x_saved: x.data.clone(),
                w_saved: w.data.clone(),
                batch,
                d_in,
                d_out,
            },
            data,
            vec![batch, d_out],
            rg,
        ))
    }

    /// Elementwise max(0, x). The subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let xid = self.id_of(x, "relu")?;
        let data = kernels::relu(&x.data);
        Ok(self.push(
            Op::Relu {
                x: xid,
                x_saved: x.data.clone(),
            },
            data,
            x.shape.clone(),
            x.requires_grad,
        ))
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        let xid = self.id_of(x, "tanh")?;
        let data = kernels::tanh(&x.data);
        Ok(self.push(
            Op::Tanh {
                x: xid,
                y_saved: data.clone(),
            },
            data,
            x.shape.clone(),
            x.requires_grad,
        ))
    }

    /// Identity in the forward pass; the backward contribution through this
    /// edge is explicitly zero.
    pub fn stop_gradient(&mut self, x: &Tensor) -> Result<Tensor> {
        self.id_of(x, "stop_gradient")?;
        Ok(self.push(
            Op::StopGradient,
            x.data.clone(),
            x.shape.clone(),
            false,
        ))
    }

    // ── elementwise arithmetic ──────────────────────────────────────────

    fn binary_ids(&self, a: &Tensor, b: &Tensor, op: &'static str) -> Result<(usize, usize)> {
        let aid = self.id_of(a, op)?;
        let bid = self.id_of(b, op)?;
        if a.shape != b.shape {
            return Err(CoreError::ShapeMismatch {
                op,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        Ok((aid, bid))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (aid, bid) = self.binary_ids(a, b, "add")?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        Ok(self.push(
            Op::Add { a: aid, b: bid },
            data,
            a.shape.clone(),
            a.requires_grad || b.requires_grad,
        ))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (aid, bid) = self.binary_ids(a, b, "sub")?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
        Ok(self.push(
            Op::Sub { a: aid, b: bid },
            data,
            a.shape.clone(),
            a.requires_grad || b.requires_grad,
        ))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (aid, bid) = self.binary_ids(a, b, "mul")?;
        let data: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        debug_check_finite("mul", &data);
        Ok(self.push(
            Op::Mul {
                a: aid,
                b: bid,
                a_saved: a.data.clone(),
                b_saved: b.data.clone(),
            },
            data,
            a.shape.clone(),
            a.requires_grad || b.requires_grad,
        ))
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (aid, bid) = self.binary_ids(a, b, "div")?;
        let data: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x / y).collect();
        debug_check_finite("div", &data);
        Ok(self.push(
            Op::Div {
                a: aid,
                b: bid,
                a_saved: a.data.clone(),
                b_saved: b.data.clone(),
            },
            data,
            a.shape.clone(),
            a.requires_grad || b.requires_grad,
        ))
    }

    pub fn square(&mut self, x: &Tensor) -> Result<Tensor> {
        let xid = self.id_of(x, "square")?;
        let data: Vec<f64> = x.data.iter().map(|v| v * v).collect();
        debug_check_finite("square", &data);
        Ok(self.push(
            Op::Square {
                x: xid,
                x_saved: x.data.clone(),
            },
            data,
            x.shape.clone(),
            x.requires_grad,
        ))
    }

    pub fn sqrt(&mut self, x: &Tensor) -> Result<Tensor> {
        let xid = self.id_of(x, "sqrt")?;
        let data: Vec<f64> = x.data.iter().map(|v| v.sqrt()).collect();
        debug_check_finite("sqrt", &data);
        Ok(self.push(
            Op::Sqrt {
                x: xid,
                y_saved: data.clone(),
            },
            data,
            x.shape.clone(),
            x.requires_grad,
        ))
    }

    pub fn add_scalar(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let xid = self.id_of(x, "add_scalar")?;
        let data = x.data.iter().map(|v| v + c).collect();
        Ok(self.push(
            Op::AddScalar { x: xid },
            data,
            x.shape.clone(),
            x.requires_grad,
        ))
    }

    pub fn mul_scalar(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let xid = self.id_of(x, "mul_scalar")?;
        let data = x.data.iter().map(|v| v * c).collect();
        Ok(self.push(
            Op::MulScalar { x: xid, c },
            data,
            x.shape.clone(),
            x.requires_grad,
        ))
    }

    // ── reductions and geometry ─────────────────────────────────────────

    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let xid = self.id_of(x, "sum")?;
        let total: f64 = x.data.iter().sum();
        Ok(self.push(Op::Sum { x: xid }, vec![total], vec![], x.requires_grad))
    }

    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        let xid = self.id_of(x, "mean")?;
        let n = x.data.len().max(1);
        let total: f64 = x.data.iter().sum();
        Ok(self.push(
            Op::Mean { x: xid, n },
            vec![total / n as f64],
            vec![],
            x.requires_grad,
        ))
    }

    pub fn dot(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (aid, bid) = self.binary_ids(a, b, "dot")?;
        let v = kernels::dot(&a.data, &b.data);
        Ok(self.push(
            Op::Dot {
                a: aid,
                b: bid,
                a_saved: a.data.clone(),
                b_saved: b.data.clone(),
            },
            vec![v],
            vec![],
            a.requires_grad || b.requires_grad,
        ))
    }

    pub fn l2_norm(&mut self, x: &Tensor) -> Result<Tensor> {
        let xid = self.id_of(x, "l2_norm")?;
        let norm = kernels::l2_norm(&x.data);
        Ok(self.push(
            Op::L2Norm {
                x: xid,
                x_saved: x.data.clone(),
                norm,
            },
            vec![norm],
            vec![],
            x.requires_grad,
        ))
    }

    /// cos(u, v) = dot(u, v) / (|u| |v|), differentiable through the tape.
    /// Errors when either norm is at or below [`NORM_FLOOR`].
    pub fn cosine(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let na = kernels::l2_norm(&a.data);
        let nb = kernels::l2_norm(&b.data);
        for norm in [na, nb] {
            if norm <= NORM_FLOOR {
                return Err(CoreError::DegenerateVector {
                    context: "cosine",
                    norm,
                    floor: NORM_FLOOR,
                });
            }
        }
        let d = self.dot(a, b)?;
        let la = self.l2_norm(a)?;
        let lb = self.l2_norm(b)?;
        let denom = self.mul(&la, &lb)?;
        self.div(&d, &denom)
    }

    pub fn row_dot(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (aid, bid) = self.binary_ids(a, b, "row_dot")?;
        if a.shape.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "row_dot",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (rows, cols) = (a.shape[0], a.shape[1]);
        let data: Vec<f64> = (0..rows)
            .map(|i| {
                kernels::dot(
                    &a.data[i * cols..(i + 1) * cols],
                    &b.data[i * cols..(i + 1) * cols],
                )
            })
            .collect();
        Ok(self.push(
            Op::RowDot {
                a: aid,
                b: bid,
                a_saved: a.data.clone(),
                b_saved: b.data.clone(),
                rows,
                cols,
            },
            data,
            vec![rows],
            a.requires_grad || b.requires_grad,
        ))
    }

    /// Per-row cosine similarity of two `[rows, cols]` matrices. Rows where
    /// `mask` is false yield 0 without touching their norms; unmasked rows
    /// with a norm at or below [`NORM_FLOOR`] are an error.
    pub fn cosine_rows_masked(&mut self, a: &Tensor, b: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let (aid, bid) = self.binary_ids(a, b, "cosine_rows")?;
        if a.shape.len() != 2 || mask.len() != a.shape[0] {
            return Err(CoreError::ShapeMismatch {
                op: "cosine_rows_mask",
                lhs: a.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let (rows, cols) = (a.shape[0], a.shape[1]);
        let mut cos = vec![0.0; rows];
        let mut norm_a = vec![0.0; rows];
        let mut norm_b = vec![0.0; rows];
        for i in 0..rows {
            if !mask[i] {
                continue;
            }
            let ra = &a.data[i * cols..(i + 1) * cols];
            let rb = &b.data[i * cols..(i + 1) * cols];
            let na = kernels::l2_norm(ra);
            let nb = kernels::l2_norm(rb);
            for norm in [na, nb] {
                if norm <= NORM_FLOOR {
                    return Err(CoreError::DegenerateVector {
                        context: "cosine_rows",
                        norm,
                        floor: NORM_FLOOR,
                    });
                }
            }
            norm_a[i] = na;
            norm_b[i] = nb;
            cos[i] = kernels::dot(ra, rb) / (na * nb);
        }
        let data = cos.clone();
        Ok(self.push(
            Op::CosineRows {
                a: aid,
                b: bid,
                a_saved: a.data.clone(),
                b_saved: b.data.clone(),
                mask: mask.to_vec(),
                cos,
                norm_a,
                norm_b,
                rows,
                cols,
            },
            data,
            vec![rows],
            a.requires_grad || b.requires_grad,
        ))
    }

    // ── indexing and shaping ────────────────────────────────────────────

    /// `y[i] = x[i, idx[i]]` for a `[rows, cols]` input.
    pub fn gather(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let xid = self.id_of(x, "gather")?;
        if x.shape.len() != 2 || idx.len() != x.shape[0] {
            return Err(CoreError::ShapeMismatch {
                op: "gather",
                lhs: x.shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        let (rows, cols) = (x.shape[0], x.shape[1]);
        let mut data = Vec::with_capacity(rows);
        for (i, &j) in idx.iter().enumerate() {
            if j >= cols {
                return Err(CoreError::ShapeMismatch {
                    op: "gather_index",
                    lhs: vec![j],
                    rhs: vec![cols],
                });
            }
            data.push(x.data[i * cols + j]);
        }
        Ok(self.push(
            Op::Gather {
                x: xid,
                idx: idx.to_vec(),
                cols,
            },
            data,
            vec![rows],
            x.requires_grad,
        ))
    }

    /// Select rows of `x [src_rows, cols]` by index; duplicates accumulate in
    /// the backward pass.
    pub fn gather_rows(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let xid = self.id_of(x, "gather_rows")?;
        if x.shape.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "gather_rows",
                lhs: x.shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        let (src_rows, cols) = (x.shape[0], x.shape[1]);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= src_rows {
                return Err(CoreError::ShapeMismatch {
                    op: "gather_rows_index",
                    lhs: vec![i],
                    rhs: vec![src_rows],
                });
            }
            data.extend_from_slice(&x.data[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            Op::GatherRows {
                x: xid,
                idx: idx.to_vec(),
                cols,
            },
            data,
            vec![idx.len(), cols],
            x.requires_grad,
        ))
    }

    /// Column-wise concatenation of two `[rows, *]` matrices.
    pub fn concat2(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let aid = self.id_of(a, "concat2")?;
        let bid = self.id_of(b, "concat2")?;
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[0] != b.shape[0] {
            return Err(CoreError::ShapeMismatch {
                op: "concat2",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (rows, a_cols, b_cols) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut data = Vec::with_capacity(rows * (a_cols + b_cols));
        for i in 0..rows {
            data.extend_from_slice(&a.data[i * a_cols..(i + 1) * a_cols]);
            data.extend_from_slice(&b.data[i * b_cols..(i + 1) * b_cols]);
        }
        Ok(self.push(
            Op::Concat2 {
                a: aid,
                b: bid,
                rows,
                a_cols,
                b_cols,
            },
            data,
            vec![rows, a_cols + b_cols],
            a.requires_grad || b.requires_grad,
        ))
    }

    /// `a [m,k] * b[n,k]^T -> [m,n]`. Passing the same tensor twice yields the
    /// Gram matrix with both gradient paths accumulated.
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let aid = self.id_of(a, "matmul_nt")?;
        let bid = self.id_of(b, "matmul_nt")?;
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
            return Err(CoreError::ShapeMismatch {
                op: "matmul_nt",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let ra = &a.data[i * k..(i + 1) * k];
            for j in 0..n {
                data[i * n + j] = kernels::dot(ra, &b.data[j * k..(j + 1) * k]);
            }
        }
        debug_check_finite("matmul_nt", &data);
        Ok(self.push(
            Op::MatMulNT {
                a: aid,
                b: bid,
                a_saved: a.data.clone(),
                b_saved: b.data.clone(),
                m,
                k,
                n,
            },
            data,
            vec![m, n],
            a.requires_grad || b.requires_grad,
        ))
    }

    /// Divide each row of `x [rows, cols]` by `d [rows]`.
    pub fn div_rows(&mut self, x: &Tensor, d: &Tensor) -> Result<Tensor> {
        let xid = self.id_of(x, "div_rows")?;
        let did = self.id_of(d, "div_rows")?;
        if x.shape.len() != 2 || d.shape != [x.shape[0]] {
            return Err(CoreError::ShapeMismatch {
                op: "div_rows",
                lhs: x.shape.clone(),
                rhs: d.shape.clone(),
            });
        }
        let (rows, cols) = (x.shape[0], x.shape[1]);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let di = d.data[i];
            for j in 0..cols {
                data.push(x.data[i * cols + j] / di);
            }
        }
        debug_check_finite("div_rows", &data);
        Ok(self.push(
            Op::DivRows {
                x: xid,
                d: did,
                x_saved: x.data.clone(),
                d_saved: d.data.clone(),
                rows,
                cols,
            },
            data,
            vec![rows, cols],
            x.requires_grad || d.requires_grad,
        ))
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let xid = self.id_of(x, "reshape")?;
        let numel: usize = shape.iter().product();
        if numel != x.data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                lhs: x.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.push(
            Op::Reshape { x: xid },
            x.data.clone(),
            shape.to_vec(),
            x.requires_grad,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulate gradients for every `requires_grad` node reachable from the
    /// scalar `loss`. May run once per tape.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        let lid = self.id_of(loss, "backward")?;
        if loss.numel() != 1 {
            return Err(CoreError::NonScalarLoss {
                shape: loss.shape.clone(),
            });
        }
        if !self.nodes[lid].requires_grad {
            return Err(CoreError::DetachedLoss);
        }
        if self.backward_done {
            return Err(CoreError::BackwardAlreadyRun);
        }
        self.backward_done = true;
        self.grads[lid] = Some(vec![1.0]);

        for id in (0..=lid).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            {
                let nodes = &self.nodes;
                let grads = &mut self.grads;
                let mut add_to = |target: usize, f: &mut dyn FnMut(&mut Vec<f64>)| {
                    if !nodes[target].requires_grad {
                        return;
                    }
                    let slot =
                        grads[target].get_or_insert_with(|| vec![0.0; nodes[target].numel]);
                    f(slot);
                };
                match &nodes[id].op {
                    Op::Leaf | Op::Constant | Op::StopGradient => {}
                    Op::Linear {
                        x,
                        w,
                        b,
                        x_saved,
                        w_saved,
                        batch,
                        d_in,
                        d_out,
                    } => {
                        let (batch, d_in, d_out) = (*batch, *d_in, *d_out);
                        add_to(*x, &mut |dx| {
                            for i in 0..batch {
                                let gi = &g[i * d_out..(i + 1) * d_out];
                                for k in 0..d_in {
                                    let wk = &w_saved[k * d_out..(k + 1) * d_out];
                                    let mut acc = 0.0;
                                    for j in 0..d_out {
                                        acc += gi[j] * wk[j];
                                    }
                                    dx[i * d_in + k] += acc;
                                }
                            }
                        });
                        add_to(*w, &mut |dw| {
                            for i in 0..batch {
                                let gi = &g[i * d_out..(i + 1) * d_out];
                                let xi = &x_saved[i * d_in..(i + 1) * d_in];
                                for (k, &xik) in xi.iter().enumerate() {
                                    if xik == 0.0 {
                                        continue;
                                    }
                                    let dwk = &mut dw[k * d_out..(k + 1) * d_out];
                                    for j in 0..d_out {
                                        dwk[j] += xik * gi[j];
                                    }
                                }
                            }
                        });
                        if let Some(bid) = b {
                            add_to(*bid, &mut |db| {
                                for i in 0..batch {
                                    let gi = &g[i * d_out..(i + 1) * d_out];
                                    for j in 0..d_out {
                                        db[j] += gi[j];
                                    }
                                }
                            });
                        }
                    }
                    Op::Relu { x, x_saved } => add_to(*x, &mut |dx| {
                        for (i, &xv) in x_saved.iter().enumerate() {
                            if xv > 0.0 {
                                dx[i] += g[i];
                            }
                        }
                    }),
                    Op::Tanh { x, y_saved } => add_to(*x, &mut |dx| {
                        for (i, &yv) in y_saved.iter().enumerate() {
                            dx[i] += g[i] * (1.0 - yv * yv);
                        }
                    }),
                    Op::Add { a, b } => {
                        add_to(*a, &mut |da| {
                            for i in 0..g.len() {
                                da[i] += g[i];
                            }
                        });
                        add_to(*b, &mut |db| {
                            for i in 0..g.len() {
                                db[i] += g[i];
                            }
                        });
                    }
                    Op::Sub { a, b } => {
                        add_to(*a, &mut |da| {
                            for i in 0..g.len() {
                                da[i] += g[i];
                            }
                        });
                        add_to(*b, &mut |db| {
                            for i in 0..g.len() {
                                db[i] -= g[i];
                            }
                        });
                    }
                    Op::Mul {
                        a,
                        b,
                        a_saved,
                        b_saved,
                    } => {
                        add_to(*a, &mut |da| {
                            for i in 0..g.len() {
                                da[i] += g[i] * b_saved[i];
                            }
                        });
                        add_to(*b, &mut |db| {
                            for i in 0..g.len() {
                                db[i] += g[i] * a_saved[i];
                            }
                        });
                    }
                    Op::Div {
                        a,
                        b,
                        a_saved,
                        b_saved,
                    } => {
                        add_to(*a, &mut |da| {
                            for i in 0..g.len() {
                                da[i] += g[i] / b_saved[i];
                            }
                        });
                        add_to(*b, &mut |db| {
                            for i in 0..g.len() {
                                db[i] -= g[i] * a_saved[i] / (b_saved[i] * b_saved[i]);
                            }
                        });
                    }
                    Op::Square { x, x_saved } => add_to(*x, &mut |dx| {
                        for i in 0..g.len() {
                            dx[i] += 2.0 * x_saved[i] * g[i];
                        }
                    }),
                    Op::Sqrt { x, y_saved } => add_to(*x, &mut |dx| {
                        for i in 0..g.len() {
                            dx[i] += g[i] / (2.0 * y_saved[i]);
                        }
                    }),
                    Op::AddScalar { x } => add_to(*x, &mut |dx| {
                        for i in 0..g.len() {
                            dx[i] += g[i];
                        }
                    }),
                    Op::MulScalar { x, c } => {
                        let c = *c;
                        add_to(*x, &mut |dx| {
                            for i in 0..g.len() {
                                dx[i] += c * g[i];
                            }
                        });
                    }
                    Op::Sum { x } => add_to(*x, &mut |dx| {
                        for v in dx.iter_mut() {
                            *v += g[0];
                        }
                    }),
                    Op::Mean { x, n } => {
                        let scale = g[0] / *n as f64;
                        add_to(*x, &mut |dx| {
                            for v in dx.iter_mut() {
                                *v += scale;
                            }
                        });
                    }
                    Op::Dot {
                        a,
                        b,
                        a_saved,
                        b_saved,
                    } => {
                        add_to(*a, &mut |da| {
                            for i in 0..da.len() {
                                da[i] += g[0] * b_saved[i];
                            }
                        });
                        add_to(*b, &mut |db| {
                            for i in 0..db.len() {
                                db[i] += g[0] * a_saved[i];
                            }
                        });
                    }
                    Op::L2Norm { x, x_saved, norm } => {
                        let denom = norm.max(NORM_FLOOR);
                        add_to(*x, &mut |dx| {
                            for i in 0..dx.len() {
                                dx[i] += g[0] * x_saved[i] / denom;
                            }
                        });
                    }
                    Op::RowDot {
                        a,
                        b,
                        a_saved,
                        b_saved,
                        rows,
                        cols,
                    } => {
                        let (rows, cols) = (*rows, *cols);
                        add_to(*a, &mut |da| {
                            for i in 0..rows {
                                for j in 0..cols {
                                    da[i * cols + j] += g[i] * b_saved[i * cols + j];
                                }
                            }
                        });
                        add_to(*b, &mut |db| {
                            for i in 0..rows {
                                for j in 0..cols {
                                    db[i * cols + j] += g[i] * a_saved[i * cols + j];
                                }
                            }
                        });
                    }
                    Op::CosineRows {
                        a,
                        b,
                        a_saved,
                        b_saved,
                        mask,
                        cos,
                        norm_a,
                        norm_b,
                        rows,
                        cols,
                    } => {
                        let (rows, cols) = (*rows, *cols);
                        add_to(*a, &mut |da| {
                            for i in 0..rows {
                                if !mask[i] {
                                    continue;
                                }
                                let (na, nb, ci) = (norm_a[i], norm_b[i], cos[i]);
                                for j in 0..cols {
                                    let av = a_saved[i * cols + j];
                                    let bv = b_saved[i * cols + j];
                                    da[i * cols + j] +=
                                        g[i] * (bv / (na * nb) - ci * av / (na * na));
                                }
                            }
                        });
                        add_to(*b, &mut |db| {
                            for i in 0..rows {
                                if !mask[i] {
                                    continue;
                                }
                                let (na, nb, ci) = (norm_a[i], norm_b[i], cos[i]);
                                for j in 0..cols {
                                    let av = a_saved[i * cols + j];
                                    let bv = b_saved[i * cols + j];
                                    db[i * cols + j] +=
                                        g[i] * (av / (na * nb) - ci * bv / (nb * nb));
                                }
                            }
                        });
                    }
                    Op::Gather { x, idx, cols } => {
                        let cols = *cols;
                        add_to(*x, &mut |dx| {
                            for (i, &j) in idx.iter().enumerate() {
                                dx[i * cols + j] += g[i];
                            }
                        });
                    }
                    Op::GatherRows { x, idx, cols, .. } => {
                        let cols = *cols;
                        add_to(*x, &mut |dx| {
                            for (out_row, &src_row) in idx.iter().enumerate() {
                                for j in 0..cols {
                                    dx[src_row * cols + j] += g[out_row * cols + j];
                                }
                            }
                        });
                    }
                    Op::Concat2 {
                        a,
                        b,
                        rows,
                        a_cols,
                        b_cols,
                    } => {
                        let (rows, a_cols, b_cols) = (*rows, *a_cols, *b_cols);
                        let total = a_cols + b_cols;
                        add_to(*a, &mut |da| {
                            for i in 0..rows {
                                for j in 0..a_cols {
                                    da[i * a_cols + j] += g[i * total + j];
                                }
                            }
                        });
                        add_to(*b, &mut |db| {
                            for i in 0..rows {
                                for j in 0..b_cols {
                                    db[i * b_cols + j] += g[i * total + a_cols + j];
                                }
                            }
                        });
                    }
                    Op::MatMulNT {
                        a,
                        b,
                        a_saved,
                        b_saved,
                        m,
                        k,
                        n,
                    } => {
                        let (m, k, n) = (*m, *k, *n);
                        add_to(*a, &mut |da| {
                            // da = g [m,n] * b [n,k]
                            for i in 0..m {
                                for j in 0..n {
                                    let gij = g[i * n + j];
                                    if gij == 0.0 {
                                        continue;
                                    }
                                    for c in 0..k {
                                        da[i * k + c] += gij * b_saved[j * k + c];
                                    }
                                }
                            }
                        });
                        add_to(*b, &mut |db| {
                            // db = g^T [n,m] * a [m,k]
                            for j in 0..n {
                                for i in 0..m {
                                    let gij = g[i * n + j];
                                    if gij == 0.0 {
                                        continue;
                                    }
                                    for c in 0..k {
                                        db[j * k + c] += gij * a_saved[i * k + c];
                                    }
                                }
                            }
                        });
                    }
                    Op::DivRows {
                        x,
                        d,
                        x_saved,
                        d_saved,
                        rows,
                        cols,
                    } => {
                        let (rows, cols) = (*rows, *cols);
                        add_to(*x, &mut |dx| {
                            for i in 0..rows {
                                for j in 0..cols {
                                    dx[i * cols + j] += g[i * cols + j] / d_saved[i];
                                }
                            }
                        });
                        add_to(*d, &mut |dd| {
                            for i in 0..rows {
                                let mut acc = 0.0;
                                for j in 0..cols {
                                    acc += g[i * cols + j] * x_saved[i * cols + j];
                                }
                                dd[i] -= acc / (d_saved[i] * d_saved[i]);
                            }
                        });
                    }
                    Op::Reshape { x } => add_to(*x, &mut |dx| {
                        for i in 0..g.len() {
                            dx[i] += g[i];
                        }
                    }),
                }
            }
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Gradient accumulated for a tensor during `backward`, if any.
    pub fn grad(&self, t: &Tensor) -> Option<&[f64]> {
        let h = t.tape_id?;
        if h.tape_uid != self.uid {
            return None;
        }
        self.grads[h.index].as_deref()
    }
}
