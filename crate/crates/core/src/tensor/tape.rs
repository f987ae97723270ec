//! Reverse-mode autodiff over a recorded op graph.
//!
//! A [`Tape`] owns every intermediate value of one forward computation. Ops
//! append nodes and return [`Var`] handles; parents always precede children,
//! so the recorded graph is acyclic by construction and a single reverse
//! sweep visits each node exactly once.
//!
//! Broadcasting follows the trailing-dimension rule: shapes are aligned at
//! their last axis, the shorter shape is padded with leading 1s, and each
//! aligned pair of extents must be equal or 1. Anything else requires an
//! explicit `reshape`.

use crate::error::{Error, Result};
use crate::tensor::{softmax_slice, Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

const GELU_C1: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C2: f64 = 0.044_715;

enum Op<E: Element> {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, c: E },
    Exp { a: Var },
    Log { a: Var },
    Neg { a: Var },
    Gelu { a: Var },
    SumAll { a: Var },
    Softmax { a: Var, temperature: E },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64, mean: Vec<E>, inv_std: Vec<E> },
    Gather { table: Var, ids: Vec<usize> },
    TakeLastAxis { a: Var, ids: Vec<usize> },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    ExpandFirst { a: Var, copies: usize },
}

struct Node<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    op: Op<E>,
}

/// Recorded computation graph for one forward pass.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    backward_done: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input value. Its `requires_grad` flag decides whether
    /// `backward` will produce a gradient for it.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        let requires_grad = t.requires_grad;
        self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[E] {
        &self.nodes[v.0].data
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if one was computed.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copy a node out as a plain tensor.
    pub fn tensor(&self, v: Var) -> Tensor<E> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape node is a valid tensor")
    }

    /// Drop accumulated gradients so the tape can run `backward` again.
    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Op<E>) -> Var {
        self.nodes.push(Node { shape, data, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── binary elementwise ───────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[b.0].data.iter().any(|v| v.to_f64() == 0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(a, b, "div")
    }

    fn binary(&mut self, a: Var, b: Var, tag: &str) -> Result<Var> {
        let out_shape = broadcast_shape(&self.nodes[a.0].shape, &self.nodes[b.0].shape)
            .ok_or_else(|| {
                Error::Shape(format!(
                    "{tag}: shapes {:?} and {:?} are not broadcast-compatible",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ))
            })?;
        let f: fn(f64, f64) -> f64 = match tag {
            "add" => |x, y| x + y,
            "sub" => |x, y| x - y,
            "mul" => |x, y| x * y,
            "div" => |x, y| x / y,
            _ => unreachable!(),
        };
        let data = broadcast_apply(
            &self.nodes[a.0].data,
            &self.nodes[a.0].shape,
            &self.nodes[b.0].data,
            &self.nodes[b.0].shape,
            &out_shape,
            f,
        );
        let rg = self.any_grad(&[a, b]);
        let op = match tag {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            "mul" => Op::Mul { a, b },
            "div" => Op::Div { a, b },
            _ => unreachable!(),
        };
        Ok(self.push(out_shape, data, rg, op))
    }

    // ── scalar and unary ─────────────────────────────────────────────────

    pub fn add_scalar(&mut self, a: Var, c: E) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&v| E::from_f64(v.to_f64() + c.to_f64())).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: Var, c: E) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&v| E::from_f64(v.to_f64() * c.to_f64())).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::MulScalar { a, c })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let data: Vec<E> = self.nodes[a.0].data.iter().map(|v| E::from_f64(v.to_f64().exp())).collect();
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("exp overflow produced {bad}")));
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Exp { a }))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].data.iter().any(|v| v.to_f64() <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        let data = self.nodes[a.0].data.iter().map(|v| E::from_f64(v.to_f64().ln())).collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Log { a }))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|v| E::from_f64(-v.to_f64())).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Neg { a })
    }

    /// Gaussian error linear unit (tanh approximation), the MLP nonlinearity.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|v| {
                let x = v.to_f64();
                let u = GELU_C1 * (x + GELU_C2 * x * x * x);
                E::from_f64(0.5 * x * (1.0 + u.tanh()))
            })
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Gelu { a })
    }

    // ── reductions ───────────────────────────────────────────────────────

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = 0.0;
        for v in &self.nodes[a.0].data {
            acc += v.to_f64();
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![E::from_f64(acc)], rg, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len();
        let s = self.sum_all(a);
        self.mul_scalar(s, E::from_f64(1.0 / n as f64))
    }

    // ── row ops ──────────────────────────────────────────────────────────

    /// Row softmax over the last axis in max-subtracted form.
    pub fn softmax_rows(&mut self, a: Var, temperature: E) -> Result<Var> {
        if temperature.to_f64() <= 0.0 {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let shape = self.nodes[a.0].shape.clone();
        let n = *shape.last().ok_or_else(|| Error::Shape("softmax on 0-d tensor".into()))?;
        let mut data = vec![E::ZERO; self.nodes[a.0].data.len()];
        for (row_in, row_out) in self.nodes[a.0].data.chunks(n).zip(data.chunks_mut(n)) {
            softmax_slice(row_in, temperature, row_out);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, data, rg, Op::Softmax { a, temperature }))
    }

    /// Row log-softmax over the last axis; never materializes tiny probabilities.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let n = *shape.last().ok_or_else(|| Error::Shape("log_softmax on 0-d tensor".into()))?;
        let mut data = vec![E::ZERO; self.nodes[a.0].data.len()];
        for (row_in, row_out) in self.nodes[a.0].data.chunks(n).zip(data.chunks_mut(n)) {
            let max = row_in.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
            let mut sum = 0.0;
            for v in row_in {
                sum += (v.to_f64() - max).exp();
            }
            let log_z = max + sum.ln();
            for (o, v) in row_out.iter_mut().zip(row_in) {
                *o = E::from_f64(v.to_f64() - log_z);
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, data, rg, Op::LogSoftmax { a }))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let n = *shape.last().ok_or_else(|| Error::Shape("layer_norm on 0-d tensor".into()))?;
        if self.nodes[gamma.0].shape != [n] || self.nodes[beta.0].shape != [n] {
            return Err(Error::Shape(format!(
                "layer_norm scale/shift must have shape [{n}], got {:?} and {:?}",
                self.nodes[gamma.0].shape, self.nodes[beta.0].shape
            )));
        }
        let rows = self.nodes[x.0].data.len() / n;
        let mut data = vec![E::ZERO; self.nodes[x.0].data.len()];
        let mut mean = vec![E::ZERO; rows];
        let mut inv_std = vec![E::ZERO; rows];
        for r in 0..rows {
            let row = &self.nodes[x.0].data[r * n..(r + 1) * n];
            let m = row.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            mean[r] = E::from_f64(m);
            inv_std[r] = E::from_f64(is);
            for j in 0..n {
                let xhat = (row[j].to_f64() - m) * is;
                data[r * n + j] = E::from_f64(
                    xhat * self.nodes[gamma.0].data[j].to_f64()
                        + self.nodes[beta.0].data[j].to_f64(),
                );
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(shape, data, rg, Op::LayerNorm { x, gamma, beta, eps, mean, inv_std }))
    }

    // ── gather / indexing ────────────────────────────────────────────────

    /// Row lookup into a 2-D table (embedding lookup). Output is `[ids.len(), n]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tshape = self.nodes[table.0].shape.clone();
        if tshape.len() != 2 {
            return Err(Error::Shape(format!("gather_rows table must be 2-D, got {tshape:?}")));
        }
        let (v, n) = (tshape[0], tshape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape(format!("gather_rows index {bad} out of range for table with {v} rows")));
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(&self.nodes[table.0].data[i * n..(i + 1) * n]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(vec![ids.len(), n], data, rg, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Pick one element along the last axis per leading position.
    /// `ids.len()` must equal the product of the leading extents.
    pub fn take_last_axis(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() < 2 {
            return Err(Error::Shape("take_last_axis needs at least 2 axes".into()));
        }
        let n = *shape.last().unwrap();
        let lead: Vec<usize> = shape[..shape.len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        if ids.len() != rows {
            return Err(Error::Shape(format!(
                "take_last_axis got {} indices for {rows} rows",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("take_last_axis index {bad} out of range for axis of extent {n}")));
        }
        let data: Vec<E> = ids
            .iter()
            .enumerate()
            .map(|(r, &i)| self.nodes[a.0].data[r * n + i])
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(lead, data, rg, Op::TakeLastAxis { a, ids: ids.to_vec() }))
    }

    // ── shape ops ────────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let expected: usize = shape.iter().product();
        if expected != self.nodes[a.0].data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.nodes[a.0].shape
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, data, rg, Op::Reshape { a }))
    }

    /// Reorder axes; `axes` must be a permutation of `0..ndim`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let in_shape = self.nodes[a.0].shape.clone();
        let nd = in_shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&ax| ax >= nd || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::Shape(format!("invalid permutation {axes:?} for {nd} axes")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
        let data = permute_data(&self.nodes[a.0].data, &in_shape, axes);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out_shape, data, rg, Op::Permute { a, axes: axes.to_vec() }))
    }

    /// Tile along a new leading axis: `[..]` becomes `[copies, ..]`.
    pub fn expand_first(&mut self, a: Var, copies: usize) -> Result<Var> {
        if copies == 0 {
            return Err(Error::Parameter("expand_first needs at least one copy".into()));
        }
        let mut shape = vec![copies];
        shape.extend_from_slice(&self.nodes[a.0].shape);
        let src = self.nodes[a.0].data.clone();
        let mut data = Vec::with_capacity(src.len() * copies);
        for _ in 0..copies {
            data.extend_from_slice(&src);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, data, rg, Op::ExpandFirst { a, copies }))
    }

    // ── matmul ───────────────────────────────────────────────────────────

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`; `b` is either `[k, n]` (shared right-hand side,
    /// applied to every batch slice) or `[.., k, n]` with leading extents
    /// equal to `a`'s.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ashape = self.nodes[a.0].shape.clone();
        let bshape = self.nodes[b.0].shape.clone();
        let mismatch = || {
            Error::Shape(format!("matmul: incompatible shapes {ashape:?} and {bshape:?}"))
        };
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (bk, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        if k != bk {
            return Err(mismatch());
        }
        let batch: usize = ashape[..ashape.len() - 2].iter().product();
        let b_batched = if bshape.len() == 2 {
            false
        } else if bshape[..bshape.len() - 2] == ashape[..ashape.len() - 2] {
            true
        } else {
            return Err(mismatch());
        };
        let mut out = vec![E::ZERO; batch * m * n];
        for s in 0..batch {
            let a_off = s * m * k;
            let b_off = if b_batched { s * k * n } else { 0 };
            matmul_kernel(
                &self.nodes[a.0].data[a_off..a_off + m * k],
                &self.nodes[b.0].data[b_off..b_off + k * n],
                m,
                k,
                n,
                &mut out[s * m * n..(s + 1) * m * n],
            );
        }
        let mut out_shape = ashape[..ashape.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out_shape, out, rg, Op::Matmul { a, b }))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar node. Every upstream node with
    /// `requires_grad` receives its gradient; leaves keep theirs for readout.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; call clear_grads or record a fresh graph".into(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![E::ONE]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[E]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].data.len();
        debug_assert_eq!(len, delta.len());
        let g = self.nodes[v.0].grad.get_or_insert_with(|| vec![E::ZERO; len]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = E::from_f64(gi.to_f64() + di.to_f64());
        }
    }

    fn propagate(&mut self, id: usize) -> Result<()> {
        let dy = self.nodes[id].grad.clone().expect("grad present");
        // Ops keep Var parents; data reads borrow immutably, writes go through accumulate.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let da = reduce_to_shape(&dy, &self.nodes[id].shape, &self.nodes[a.0].shape);
                let db = reduce_to_shape(&dy, &self.nodes[id].shape, &self.nodes[b.0].shape);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                let da = reduce_to_shape(&dy, &self.nodes[id].shape, &self.nodes[a.0].shape);
                let mut db = reduce_to_shape(&dy, &self.nodes[id].shape, &self.nodes[b.0].shape);
                for v in &mut db {
                    *v = E::from_f64(-v.to_f64());
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let out_shape = self.nodes[id].shape.clone();
                let da_full = broadcast_apply(
                    &dy, &out_shape,
                    &self.nodes[b.0].data, &self.nodes[b.0].shape,
                    &out_shape,
                    |g, bv| g * bv,
                );
                let db_full = broadcast_apply(
                    &dy, &out_shape,
                    &self.nodes[a.0].data, &self.nodes[a.0].shape,
                    &out_shape,
                    |g, av| g * av,
                );
                let da = reduce_to_shape(&da_full, &out_shape, &self.nodes[a.0].shape);
                let db = reduce_to_shape(&db_full, &out_shape, &self.nodes[b.0].shape);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Div { a, b } => {
                let (a, b) = (*a, *b);
                let out_shape = self.nodes[id].shape.clone();
                let da_full = broadcast_apply(
                    &dy, &out_shape,
                    &self.nodes[b.0].data, &self.nodes[b.0].shape,
                    &out_shape,
                    |g, bv| g / bv,
                );
                // d/db (a/b) = -a / b^2 = -out / b
                let dout_b = broadcast_apply(
                    &dy, &out_shape,
                    &self.nodes[id].data, &out_shape,
                    &out_shape,
                    |g, o| g * o,
                );
                let db_full = broadcast_apply(
                    &dout_b, &out_shape,
                    &self.nodes[b.0].data, &self.nodes[b.0].shape,
                    &out_shape,
                    |go, bv| -go / bv,
                );
                let da = reduce_to_shape(&da_full, &out_shape, &self.nodes[a.0].shape);
                let db = reduce_to_shape(&db_full, &out_shape, &self.nodes[b.0].shape);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::AddScalar { a } => {
                let a = *a;
                self.accumulate(a, &dy);
            }
            Op::MulScalar { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<E> = dy.iter().map(|g| E::from_f64(g.to_f64() * c.to_f64())).collect();
                self.accumulate(a, &da);
            }
            Op::Exp { a } => {
                let a = *a;
                let da: Vec<E> = dy
                    .iter()
                    .zip(&self.nodes[id].data)
                    .map(|(g, o)| E::from_f64(g.to_f64() * o.to_f64()))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Log { a } => {
                let a = *a;
                let da: Vec<E> = dy
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, x)| E::from_f64(g.to_f64() / x.to_f64()))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Neg { a } => {
                let a = *a;
                let da: Vec<E> = dy.iter().map(|g| E::from_f64(-g.to_f64())).collect();
                self.accumulate(a, &da);
            }
            Op::Gelu { a } => {
                let a = *a;
                let da: Vec<E> = dy
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, xv)| {
                        let x = xv.to_f64();
                        let u = GELU_C1 * (x + GELU_C2 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C1 * (1.0 + 3.0 * GELU_C2 * x * x);
                        E::from_f64(g.to_f64() * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))
                    })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::SumAll { a } => {
                let a = *a;
                let g = dy[0];
                let da = vec![g; self.nodes[a.0].data.len()];
                self.accumulate(a, &da);
            }
            Op::Softmax { a, temperature } => {
                let (a, t) = (*a, temperature.to_f64());
                let n = *self.nodes[id].shape.last().unwrap();
                let p = &self.nodes[id].data;
                let mut da = vec![E::ZERO; p.len()];
                for r in 0..p.len() / n {
                    let row = r * n;
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += dy[row + j].to_f64() * p[row + j].to_f64();
                    }
                    for j in 0..n {
                        let v = p[row + j].to_f64() * (dy[row + j].to_f64() - dot) / t;
                        da[row + j] = E::from_f64(v);
                    }
                }
                self.accumulate(a, &da);
            }
            Op::LogSoftmax { a } => {
                let a = *a;
                let n = *self.nodes[id].shape.last().unwrap();
                let out = &self.nodes[id].data;
                let mut da = vec![E::ZERO; out.len()];
                for r in 0..out.len() / n {
                    let row = r * n;
                    let mut sum = 0.0;
                    for j in 0..n {
                        sum += dy[row + j].to_f64();
                    }
                    for j in 0..n {
                        let p = out[row + j].to_f64().exp();
                        da[row + j] = E::from_f64(dy[row + j].to_f64() - p * sum);
                    }
                }
                self.accumulate(a, &da);
            }
            Op::LayerNorm { x, gamma, beta, eps: _, mean, inv_std } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let n = *self.nodes[id].shape.last().unwrap();
                let rows = self.nodes[x.0].data.len() / n;
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                let mut dx = vec![E::ZERO; self.nodes[x.0].data.len()];
                let mut dgamma = vec![E::ZERO; n];
                let mut dbeta = vec![E::ZERO; n];
                for r in 0..rows {
                    let row = r * n;
                    let m = mean[r].to_f64();
                    let is = inv_std[r].to_f64();
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    let mut xhat = vec![0.0; n];
                    for j in 0..n {
                        xhat[j] = (self.nodes[x.0].data[row + j].to_f64() - m) * is;
                        let g = dy[row + j].to_f64() * self.nodes[gamma.0].data[j].to_f64();
                        sum_g += g;
                        sum_gx += g * xhat[j];
                    }
                    for j in 0..n {
                        let g = dy[row + j].to_f64() * self.nodes[gamma.0].data[j].to_f64();
                        let v = is * (g - sum_g / n as f64 - xhat[j] * sum_gx / n as f64);
                        dx[row + j] = E::from_f64(v);
                        dgamma[j] = E::from_f64(dgamma[j].to_f64() + dy[row + j].to_f64() * xhat[j]);
                        dbeta[j] = E::from_f64(dbeta[j].to_f64() + dy[row + j].to_f64());
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::Gather { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let n = self.nodes[table.0].shape[1];
                let mut dt = vec![E::ZERO; self.nodes[table.0].data.len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..n {
                        dt[i * n + j] =
                            E::from_f64(dt[i * n + j].to_f64() + dy[r * n + j].to_f64());
                    }
                }
                self.accumulate(table, &dt);
            }
            Op::TakeLastAxis { a, ids } => {
                let a = *a;
                let ids = ids.clone();
                let n = *self.nodes[a.0].shape.last().unwrap();
                let mut da = vec![E::ZERO; self.nodes[a.0].data.len()];
                for (r, &i) in ids.iter().enumerate() {
                    da[r * n + i] = E::from_f64(da[r * n + i].to_f64() + dy[r].to_f64());
                }
                self.accumulate(a, &da);
            }
            Op::Permute { a, axes } => {
                let a = *a;
                let axes = axes.clone();
                let mut inverse = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let da = permute_data(&dy, &self.nodes[id].shape, &inverse);
                self.accumulate(a, &da);
            }
            Op::Reshape { a } => {
                let a = *a;
                self.accumulate(a, &dy);
            }
            Op::ExpandFirst { a, copies } => {
                let (a, copies) = (*a, *copies);
                let n = self.nodes[a.0].data.len();
                let mut da = vec![E::ZERO; n];
                for c in 0..copies {
                    for j in 0..n {
                        da[j] = E::from_f64(da[j].to_f64() + dy[c * n + j].to_f64());
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let ashape = self.nodes[a.0].shape.clone();
                let bshape = self.nodes[b.0].shape.clone();
                let m = ashape[ashape.len() - 2];
                let k = ashape[ashape.len() - 1];
                let n = bshape[bshape.len() - 1];
                let batch: usize = ashape[..ashape.len() - 2].iter().product();
                let b_batched = bshape.len() > 2;
                let mut da = vec![E::ZERO; self.nodes[a.0].data.len()];
                let mut db = vec![E::ZERO; self.nodes[b.0].data.len()];
                for s in 0..batch {
                    let a_off = s * m * k;
                    let b_off = if b_batched { s * k * n } else { 0 };
                    let c_off = s * m * n;
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        for j in 0..n {
                            let g = dy[c_off + i * n + j].to_f64();
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                let idx = a_off + i * k + p;
                                da[idx] = E::from_f64(
                                    da[idx].to_f64()
                                        + g * self.nodes[b.0].data[b_off + p * n + j].to_f64(),
                                );
                            }
                        }
                    }
                    // dB = Aᵀ · dC (accumulates across batch for a shared B)
                    for i in 0..m {
                        for p in 0..k {
                            let av = self.nodes[a.0].data[a_off + i * k + p].to_f64();
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                let idx = b_off + p * n + j;
                                db[idx] =
                                    E::from_f64(db[idx].to_f64() + av * dy[c_off + i * n + j].to_f64());
                            }
                        }
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
        }
        Ok(())
    }
}

// ── shared kernels and broadcast helpers ────────────────────────────────

/// `c += a · b` for row-major `a [m,k]`, `b [k,n]`, `c [m,n]`.
pub(crate) fn matmul_kernel<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, c: &mut [E]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p].to_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = E::from_f64(crow[j].to_f64() + av * brow[j].to_f64());
            }
        }
    }
}

/// Plain (non-recorded) 2-D matrix product; used for merges and oracles.
pub fn matmul_plain<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::Shape(format!(
            "matmul: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![E::ZERO; m * n];
    matmul_kernel(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Output shape of broadcasting `a` against `b` under the trailing rule, or
/// `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

fn pad_shape(shape: &[usize], nd: usize) -> Vec<usize> {
    let mut padded = vec![1usize; nd];
    padded[nd - shape.len()..].copy_from_slice(shape);
    padded
}

/// Apply `f` elementwise over broadcast operands, producing `out_shape`.
fn broadcast_apply<E: Element>(
    a: &[E],
    a_shape: &[usize],
    b: &[E],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<E> {
    if a_shape == b_shape {
        return a
            .iter()
            .zip(b)
            .map(|(x, y)| E::from_f64(f(x.to_f64(), y.to_f64())))
            .collect();
    }
    let nd = out_shape.len();
    let ap = pad_shape(a_shape, nd);
    let bp = pad_shape(b_shape, nd);
    let a_strides = broadcast_strides(&ap, out_shape);
    let b_strides = broadcast_strides(&bp, out_shape);
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; nd];
    let mut a_off = 0usize;
    let mut b_off = 0usize;
    for _ in 0..numel {
        out.push(E::from_f64(f(a[a_off].to_f64(), b[b_off].to_f64())));
        // odometer increment
        for d in (0..nd).rev() {
            coords[d] += 1;
            a_off += a_strides[d];
            b_off += b_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            a_off -= a_strides[d] * out_shape[d];
            b_off -= b_strides[d] * out_shape[d];
        }
    }
    out
}

/// Row-major strides with 0 on broadcast (extent-1) axes.
fn broadcast_strides(padded: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = padded.len();
    let mut strides = vec![0usize; nd];
    let mut acc = 1usize;
    for d in (0..nd).rev() {
        if padded[d] == out_shape[d] {
            strides[d] = acc;
        } else {
            strides[d] = 0;
        }
        acc *= padded[d];
    }
    strides
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape` by collapsing
/// broadcast axes.
fn reduce_to_shape<E: Element>(grad: &[E], grad_shape: &[usize], target_shape: &[usize]) -> Vec<E> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let nd = grad_shape.len();
    let padded = pad_shape(target_shape, nd);
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![0.0f64; target_numel];
    let t_strides = {
        let mut strides = vec![0usize; nd];
        let mut acc = 1usize;
        for d in (0..nd).rev() {
            strides[d] = if padded[d] == 1 { 0 } else { acc };
            acc *= padded[d];
        }
        strides
    };
    let mut coords = vec![0usize; nd];
    let mut t_off = 0usize;
    for g in grad {
        out[t_off] += g.to_f64();
        for d in (0..nd).rev() {
            coords[d] += 1;
            t_off += t_strides[d];
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
            t_off -= t_strides[d] * grad_shape[d];
        }
    }
    out.into_iter().map(E::from_f64).collect()
}

fn permute_data<E: Element>(data: &[E], in_shape: &[usize], axes: &[usize]) -> Vec<E> {
    let nd = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
    let mut out_strides_for_in_axis = vec![0usize; nd];
    {
        // position of each input axis in the output, then row-major strides there
        let mut strides = vec![0usize; nd];
        let mut acc = 1usize;
        for d in (0..nd).rev() {
            strides[d] = acc;
            acc *= out_shape[d];
        }
        for (out_pos, &in_axis) in axes.iter().enumerate() {
            out_strides_for_in_axis[in_axis] = strides[out_pos];
        }
    }
    let mut out = vec![E::ZERO; data.len()];
    let mut coords = vec![0usize; nd];
    let mut out_off = 0usize;
    for &v in data {
        out[out_off] = v;
        for d in (0..nd).rev() {
            coords[d] += 1;
            out_off += out_strides_for_in_axis[d];
            if coords[d] < in_shape[d] {
                break;
            }
            coords[d] = 0;
            out_off -= out_strides_for_in_axis[d] * in_shape[d];
        }
    }
    out
}
