//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node to a [`Tape`]; nodes only reference earlier
//! nodes, so the recording order is a topological order and
//! [`Tape::backward`] simply walks it in reverse. Reductions always run in
//! index order, so two identical recordings produce bit-identical values and
//! gradients.

mod gradcheck;

pub use gradcheck::{
    check_gradients, compare_gradients, relative_error, GradReport, REL_ERROR_FLOOR,
};

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

type CustomForward = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;
type CustomBackward = dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        temperature: f64,
    },
    LogClamp {
        x: Var,
        floor: f64,
    },
    Pick {
        x: Var,
        index: Vec<usize>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Custom {
        name: String,
        x: Var,
        backward: Box<CustomBackward>,
    },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax { .. } => "softmax",
            Op::LogClamp { .. } => "log",
            Op::Pick { .. } => "pick",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Batch statistics produced by a train-mode batch-norm op, used by the
/// caller to update running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (1/N) batch variance.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            let at = value
                .data()
                .iter()
                .position(|x| !x.is_finite())
                .unwrap_or(0);
            return Err(Error::numeric(
                op.name().to_string(),
                format!("non-finite output at flat index {at}"),
            ));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            op => self
                .inputs(op)
                .iter()
                .any(|v| self.nodes[v.0].requires_grad),
        };
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            value,
            grad,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a) | Op::Scale(a, _) | Op::Relu(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::Softmax { x, .. } | Op::LogClamp { x, .. } | Op::Pick { x, .. } => vec![*x],
            Op::Custom { x, .. } => vec![*x],
            Op::BatchNormTrain { x, gamma, beta, .. }
            | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
        }
    }

    /// Records an input tensor. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let v = self.push(value, Op::Leaf)?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A new constant leaf holding the current value of `v`; gradient does not
    /// flow back through it.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = ta.dims2()?;
        let (c2, k) = tb.dims2()?;
        if c != c2 {
            return Err(Error::dim(format!(
                "matmul: inner dimensions disagree for {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = matmul_raw(ta.data(), tb.data(), r, c, k);
        self.push(Tensor::new(vec![r, k], out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let out = transpose_raw(t.data(), r, c);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        self.push(Tensor::new(ta.shape().to_vec(), out)?, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        self.push(Tensor::new(ta.shape().to_vec(), out)?, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(Tensor::new(ta.shape().to_vec(), out)?, Op::Mul(a, b))
    }

    /// Adds a length-`C` vector to every row of an `N × C` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (n, c) = tx.dims2()?;
        if tr.shape() != [c] {
            return Err(Error::dim(format!(
                "add_row: row vector {:?} does not match matrix {:?}",
                tr.shape(),
                tx.shape()
            )));
        }
        let mut out = tx.data().to_vec();
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] += tr.data()[j];
            }
        }
        self.push(Tensor::new(vec![n, c], out)?, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * c).collect();
        self.push(Tensor::new(t.shape().to_vec(), out)?, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = t
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        self.push(Tensor::new(t.shape().to_vec(), out)?, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(0.0, |acc, x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let s = t.data().iter().fold(0.0, |acc, x| acc + x) / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Row-wise `softmax(x / temperature)` of an `N × M` matrix, computed with
    /// the row maximum subtracted first.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let t = self.value(x);
        let (n, m) = t.dims2()?;
        if m < 2 {
            return Err(Error::dim(format!(
                "softmax needs at least 2 classes, got {m}"
            )));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                let e = ((row[j] - max) / temperature).exp();
                out[i * m + j] = e;
                z += e;
            }
            for j in 0..m {
                out[i * m + j] /= z;
            }
        }
        self.push(
            Tensor::new(vec![n, m], out)?,
            Op::Softmax { x, temperature },
        )
    }

    /// `ln(max(x, floor))` elementwise. The gradient is zero where the clamp
    /// is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(floor).ln()).collect();
        self.push(
            Tensor::new(t.shape().to_vec(), out)?,
            Op::LogClamp { x, floor },
        )
    }

    /// Selects `x[i, index[i]]` for each row, giving a length-`N` vector.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, m) = t.dims2()?;
        if index.len() != n {
            return Err(Error::dim(format!(
                "pick: {} indices for {n} rows",
                index.len()
            )));
        }
        let mut out = Vec::with_capacity(n);
        for (i, &j) in index.iter().enumerate() {
            if j >= m {
                return Err(Error::Input(format!(
                    "index {j} out of range for {m} columns"
                )));
            }
            out.push(t.data()[i * m + j]);
        }
        self.push(
            Tensor::vector(out),
            Op::Pick {
                x,
                index: index.to_vec(),
            },
        )
    }

    /// Batch normalization over the rows of an `N × C` matrix using batch
    /// statistics (biased variance).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c) = self.value(x).dims2()?;
        self.check_affine("batch_norm_train", gamma, beta, c)?;
        if n < 2 {
            return Err(Error::dim(format!(
                "batch_norm_train needs more than one row per batch, got {n}"
            )));
        }
        let t = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                mean[j] += t[i * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for i in 0..n {
            for j in 0..c {
                let d = t[i * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, &mean, &inv_std);
        let v = self.push(
            Tensor::new(vec![n, c], out)?,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )?;
        Ok((
            v,
            BatchStats {
                mean,
                var,
                count: n,
            },
        ))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        self.check_affine("batch_norm_eval", gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim(format!(
                "batch_norm_eval: running statistics of length {}/{} for {c} channels",
                mean.len(),
                var.len()
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, mean, &inv_std);
        self.push(
            Tensor::new(vec![n, c], out)?,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    fn check_affine(&self, op: &str, gamma: Var, beta: Var, c: usize) -> Result<()> {
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [c] || b.shape() != [c] {
            return Err(Error::dim(format!(
                "{op}: gamma {:?} / beta {:?} do not match {c} channels",
                g.shape(),
                b.shape()
            )));
        }
        Ok(())
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let t = self.value(x);
        let c = mean.len();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; t.len()];
        let mut out = vec![0.0; t.len()];
        for (idx, v) in t.data().iter().enumerate() {
            let j = idx % c;
            xhat[idx] = (v - mean[j]) * inv_std[j];
            out[idx] = xhat[idx] * g[j] + b[j];
        }
        (xhat, out)
    }

    /// Smallest `|input|` over every recorded relu, or `None` if there are
    /// none. Finite differences are only meaningful away from the kink.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(
                    self.value(a)
                        .data()
                        .iter()
                        .fold(f64::INFINITY, |m, x| m.min(x.abs())),
                ),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Records an elementwise unary op with a caller-supplied derivative.
    /// `backward(input, output, upstream)` returns the gradient w.r.t. the
    /// input.
    pub fn custom_unary<F, B>(&mut self, name: &str, x: Var, forward: F, backward: B) -> Result<Var>
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        B: Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        let t = self.value(x);
        let forward: Box<CustomForward> = Box::new(forward);
        let out = forward(t.data());
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            value,
            Op::Custom {
                name: name.to_string(),
                x,
                backward: Box::new(backward),
            },
        )
    }

    /// Accumulates `∂loss/∂v` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State(
                "tape already consumed by a backward pass; reset it first".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad[0] += 1.0;
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let gout = std::mem::take(&mut self.nodes[id].grad);
            self.propagate(id, &gout);
            self.nodes[id].grad = gout;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: impl IntoIterator<Item = f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        for (dst, src) in node.grad.iter_mut().zip(g) {
            *dst += src;
        }
    }

    fn propagate(&mut self, id: usize, gout: &[f64]) {
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        self.apply_rule(id, &op, gout);
        self.nodes[id].op = op;
    }

    fn apply_rule(&mut self, id: usize, op: &Op, gout: &[f64]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (r, c) = self.value(a).dims2().expect("matmul lhs");
                let k = self.value(b).shape()[1];
                let bt = transpose_raw(self.value(b).data(), c, k);
                let ga = matmul_raw(gout, &bt, r, k, c);
                let at = transpose_raw(self.value(a).data(), r, c);
                let gb = matmul_raw(&at, gout, c, r, k);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            &Op::Transpose(a) => {
                let (r, c) = self.value(a).dims2().expect("transpose input");
                let g = transpose_raw(gout, c, r);
                self.accumulate(a, g);
            }
            &Op::Add(a, b) => {
                self.accumulate(a, gout.iter().copied());
                self.accumulate(b, gout.iter().copied());
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, gout.iter().copied());
                self.accumulate(b, gout.iter().map(|g| -g));
            }
            &Op::Mul(a, b) => {
                let ga: Vec<f64> = gout
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(g, y)| g * y)
                    .collect();
                let gb: Vec<f64> = gout
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, x)| g * x)
                    .collect();
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            &Op::AddRow(x, row) => {
                let c = self.value(row).len();
                let mut gr = vec![0.0; c];
                for (idx, g) in gout.iter().enumerate() {
                    gr[idx % c] += g;
                }
                self.accumulate(x, gout.iter().copied());
                self.accumulate(row, gr);
            }
            &Op::Scale(a, c) => {
                self.accumulate(a, gout.iter().map(|g| g * c));
            }
            &Op::Relu(a) => {
                let g: Vec<f64> = gout
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, g);
            }
            &Op::Sum(a) => {
                let n = self.value(a).len();
                self.accumulate(a, std::iter::repeat_n(gout[0], n));
            }
            &Op::Mean(a) => {
                let n = self.value(a).len();
                let g = gout[0] / n as f64;
                self.accumulate(a, std::iter::repeat_n(g, n));
            }
            &Op::Softmax { x, temperature } => {
                let y = &self.nodes[id].value;
                let (n, m) = y.dims2().expect("softmax output");
                let mut g = vec![0.0; n * m];
                for i in 0..n {
                    let yr = y.row(i);
                    let gr = &gout[i * m..(i + 1) * m];
                    let dot = yr.iter().zip(gr).fold(0.0, |acc, (a, b)| acc + a * b);
                    for j in 0..m {
                        g[i * m + j] = yr[j] * (gr[j] - dot) / temperature;
                    }
                }
                self.accumulate(x, g);
            }
            &Op::LogClamp { x, floor } => {
                let g: Vec<f64> = gout
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(g, &v)| if v > floor { g / v } else { 0.0 })
                    .collect();
                self.accumulate(x, g);
            }
            Op::Pick { x, index } => {
                let x = *x;
                let m = self.value(x).shape()[1];
                let mut g = vec![0.0; self.value(x).len()];
                for (i, &j) in index.iter().enumerate() {
                    g[i * m + j] += gout[i];
                }
                self.accumulate(x, g);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = inv_std.len();
                let n = xhat.len() / c;
                let gam = self.value(gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (idx, g) in gout.iter().enumerate() {
                    dgamma[idx % c] += g * xhat[idx];
                    dbeta[idx % c] += g;
                }
                let nf = n as f64;
                let mut dx = vec![0.0; n * c];
                for (idx, g) in gout.iter().enumerate() {
                    let j = idx % c;
                    dx[idx] =
                        gam[j] * inv_std[j] / nf * (nf * g - dbeta[j] - xhat[idx] * dgamma[j]);
                }
                self.accumulate(x, dx);
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = inv_std.len();
                let gam = self.value(gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; gout.len()];
                for (idx, g) in gout.iter().enumerate() {
                    let j = idx % c;
                    dgamma[j] += g * xhat[idx];
                    dbeta[j] += g;
                    dx[idx] = g * gam[j] * inv_std[j];
                }
                self.accumulate(x, dx);
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            Op::Custom { x, backward, .. } => {
                let x = *x;
                let g = backward(self.value(x).data(), self.nodes[id].value.data(), gout);
                self.accumulate(x, g);
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], r: usize, c: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..c {
            let av = a[i * c + p];
            let brow = &b[p * k..(p + 1) * k];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::identity(2)).unwrap();
        let v = t.constant(mat(&[vec![1.0], vec![2.0]])).unwrap();
        let out = t.matmul(i2, v).unwrap();
        assert_eq!(t.value(out).data(), &[1.0, 2.0]);

        let a = t.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        let ones = t.constant(mat(&[vec![1.0], vec![1.0]])).unwrap();
        let out = t.matmul(a, ones).unwrap();
        assert_eq!(t.value(out).shape(), &[2, 1]);
        assert_eq!(t.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_sum_gradient_is_row_sums_of_b_transposed() {
        let mut t = Tape::new();
        let a = t
            .leaf(mat(&[vec![1.0, -2.0, 0.5], vec![3.0, 4.0, -1.0]]), true)
            .unwrap();
        let b = t
            .constant(mat(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![2.0, 2.0]]))
            .unwrap();
        let p = t.matmul(a, b).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        // d sum(AB) / dA[i][p] = sum_j B[p][j]
        assert_eq!(t.grad(a), &[3.0, -2.5, 4.0, 3.0, -2.5, 4.0]);
    }

    #[test]
    fn relu_add_mean_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = t.constant(Tensor::zeros(vec![3])).unwrap();
        let s = t.add(x, z).unwrap();
        assert_eq!(t.value(s), t.value(x));
        let v = t
            .constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let m = t.mean(v).unwrap();
        assert_eq!(t.value(m).item(), 2.5);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]), true).unwrap();
        let r = t.relu(x).unwrap();
        let s = t.sum(r).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2])).unwrap();
        let b = t.constant(Tensor::zeros(vec![3])).unwrap();
        assert!(matches!(t.add(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut t = Tape::new();
        let g = t.constant(mat(&[vec![3f64.ln(), 0.0]])).unwrap();
        let p = t.softmax(g, 1.0).unwrap();
        let d = t.value(p).data();
        assert!((d[0] - 0.75).abs() < 1e-15 && (d[1] - 0.25).abs() < 1e-15);

        let eq = t.constant(mat(&[vec![0.3; 5], vec![-7.0; 5]])).unwrap();
        let p = t.softmax(eq, 2.5).unwrap();
        assert!(t.value(p).data().iter().all(|v| (v - 0.2).abs() < 1e-15));

        let far = t.constant(mat(&[vec![1.0, 2.0, 0.5, 3.0]])).unwrap();
        let p = t.softmax(far, 1e6).unwrap();
        assert!(t.value(p).data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        let mut t = Tape::new();
        let g = t.constant(mat(&[vec![1.0, 2.0]])).unwrap();
        assert!(matches!(t.softmax(g, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(t.softmax(g, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::filled(vec![2, 3], 0.7), true).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[1.0; 6]);
    }

    #[test]
    fn backward_of_mean_square() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let m = t.mean(sq).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(x), &[1.0, 2.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0]), true).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::State(_))));
        t.reset();
        assert!(t.is_empty());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_values_raise() {
        let mut t = Tape::new();
        assert!(t
            .leaf(Tensor::vector(vec![f64::NAN]), true)
            .unwrap_err()
            .is_numeric());
        let big = t.constant(Tensor::vector(vec![1e308, 1e308])).unwrap();
        let err = t.add(big, big).unwrap_err();
        assert!(matches!(err, Error::Numeric { ref term, .. } if term == "add"));
    }

    #[test]
    fn zero_grad_clears() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        assert_eq!(t.grad(x), &[0.0, 0.0]);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        t.zero_grad();
        assert_eq!(t.grad(x), &[0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let c = t.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let d = t.detach(x).unwrap();
        let p = t.mul(x, c).unwrap();
        let q = t.mul(p, d).unwrap();
        let s = t.sum(q).unwrap();
        t.backward(s).unwrap();
        // d/dx sum(x * c * stop(x)) = c * x
        assert_eq!(t.grad(x), &[3.0, 8.0]);
        assert_eq!(t.grad(c), &[0.0, 0.0]);
        assert!(!t.requires_grad(d));
    }

    #[test]
    fn batch_norm_eval_with_identity_stats_is_near_identity() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[vec![1.0, -2.0], vec![0.5, 3.0]])).unwrap();
        let g = t.constant(Tensor::filled(vec![2], 1.0)).unwrap();
        let b = t.constant(Tensor::zeros(vec![2])).unwrap();
        let y = t
            .batch_norm_eval(x, g, b, &[0.0, 0.0], &[1.0, 1.0], 1e-5)
            .unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (o, i) in t.value(y).data().iter().zip(t.value(x).data()) {
            assert_eq!(*o, i * scale);
        }
    }

    #[test]
    fn batch_norm_train_rejects_single_row() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[vec![1.0, 2.0]])).unwrap();
        let g = t.constant(Tensor::filled(vec![2], 1.0)).unwrap();
        let b = t.constant(Tensor::zeros(vec![2])).unwrap();
        assert!(t.batch_norm_train(x, g, b, 1e-5).is_err());
    }
}
