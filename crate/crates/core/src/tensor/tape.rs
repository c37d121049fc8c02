use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, transpose_b: bool },
    Softmax(Var),
    CausalSoftmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    Pick { x: Var, cols: Vec<usize> },
    RowEntropy(Var),
    Reshape(Var),
    SwapAxes12(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// An append-only record of one differentiable computation.
///
/// Nodes are stored in creation order, so every node's parents precede it.
/// [`Tape::backward`] consumes the tape and walks it in reverse exactly once.
/// A tape is meant to live for one training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `var`, if it is a parameter leaf. Parameters that the loss
    /// does not depend on get an all-zero gradient.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite input to {what}")))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf that requires gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Register a leaf treated as fixed data.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor { shape: src.shape().to_vec(), data };
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `a[..., n] + bias[n]`, broadcasting over the leading axes.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "add_bias: {:?} with bias {:?}",
                self.shape(a),
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push(value, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map_unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    /// `a[..., k] · w[k, n] -> [..., n]`; the leading axes of `a` are folded
    /// into rows.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let a_shape = self.shape(a).to_vec();
        let w_shape = self.shape(w).to_vec();
        let k = *a_shape.last().unwrap();
        if w_shape.len() != 2 || w_shape[0] != k {
            return Err(Error::Shape(format!("matmul: {a_shape:?} x {w_shape:?}")));
        }
        let n = w_shape[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(w).data(), &mut out, m, k, n);
        let mut shape = a_shape;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, w), &[a, w]))
    }

    /// Batched product over a shared leading axis: `a[B, m, k] · b[B, k, n]`,
    /// or `a[B, m, k] · b[B, n, k]ᵀ` when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        let bad = || Error::Shape(format!("bmm: {a_shape:?} x {b_shape:?} (transpose_b={transpose_b})"));
        if a_shape.len() != 3 || b_shape.len() != 3 || a_shape[0] != b_shape[0] {
            return Err(bad());
        }
        let (batch, m, k) = (a_shape[0], a_shape[1], a_shape[2]);
        let n = if transpose_b {
            if b_shape[2] != k {
                return Err(bad());
            }
            b_shape[1]
        } else {
            if b_shape[1] != k {
                return Err(bad());
            }
            b_shape[2]
        };
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let a_i = &ad[i * m * k..(i + 1) * m * k];
            let b_i = &bd[i * k * n..(i + 1) * k * n];
            let c_i = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                gemm_nt(a_i, b_i, c_i, m, k, n);
            } else {
                gemm_nn(a_i, b_i, c_i, m, k, n);
            }
        }
        let value = Tensor { shape: vec![batch, m, n], data: out };
        Ok(self.push(value, Op::Bmm { a, b, transpose_b }, &[a, b]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        check_finite(self.value(a), "softmax")?;
        let n = self.value(a).last_dim();
        let mut data = self.value(a).data().to_vec();
        data.chunks_mut(n).for_each(kernels::softmax_in_place);
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Softmax of `scores[B, T, T]` where row `i` only sees columns `<= i`.
    /// Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, scores: Var) -> Result<Var> {
        let shape = self.shape(scores).to_vec();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(Error::Shape(format!("causal_softmax expects [B, T, T], got {shape:?}")));
        }
        check_finite(self.value(scores), "causal_softmax")?;
        let t = shape[1];
        let mut data = self.value(scores).data().to_vec();
        for (r, row) in data.chunks_mut(t).enumerate() {
            let i = r % t;
            kernels::softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(self.push(Tensor { shape, data }, Op::CausalSoftmax(scores), &[scores]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        check_finite(self.value(a), "log_softmax")?;
        let n = self.value(a).last_dim();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            let lse = kernels::logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push(value, Op::LogSoftmax(a), &[a]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0 || !x.is_finite()) {
            return Err(Error::Numeric("log of non-positive or non-finite value".into()));
        }
        Ok(self.map_unary(a, Op::Log(a), f64::ln))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Exp(a), f64::exp)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Gelu(a), kernels::gelu)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Layer norm over the last axis with learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: input {:?}, gain {:?}, bias {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let (_, s) = kernels::layer_norm_row(&src[r * d..(r + 1) * d], g, b, eps, &mut out[r * d..(r + 1) * d]);
            rstd.push(s);
        }
        let value = Tensor { shape: self.shape(x).to_vec(), data: out };
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, rstd }, &[x, gain, bias]))
    }

    /// Row lookup `table[V, d]` at `ids`, producing `out_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let t_shape = self.shape(table).to_vec();
        if t_shape.len() != 2 {
            return Err(Error::Shape(format!("embedding table must be 2-D, got {t_shape:?}")));
        }
        if out_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape(format!("{} ids do not fill {out_shape:?}", ids.len())));
        }
        let (rows, d) = (t_shape[0], t_shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Vocab { token: bad, vocab: rows });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        Ok(self.push(Tensor { shape, data }, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Index-select rows of a 2-D `x[N, d]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("gather_rows expects 2-D input, got {shape:?}")));
        }
        if rows.is_empty() {
            return Err(Error::Shape("gather_rows with no rows".into()));
        }
        let (n, d) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("row {bad} out of range for {n} rows")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let value = Tensor { shape: vec![rows.len(), d], data };
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// `out[i] = x[i, cols[i]]` for a 2-D `x`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != cols.len() {
            return Err(Error::Shape(format!("pick: {} columns for input {shape:?}", cols.len())));
        }
        let d = shape[1];
        if let Some(&bad) = cols.iter().find(|&&c| c >= d) {
            return Err(Error::Shape(format!("column {bad} out of range for width {d}")));
        }
        let src = self.value(x).data();
        let data = cols.iter().enumerate().map(|(i, &c)| src[i * d + c]).collect();
        let value = Tensor { shape: vec![cols.len()], data };
        Ok(self.push(value, Op::Pick { x, cols: cols.to_vec() }, &[x]))
    }

    /// Entropy of softmax over each row of `logits[N, V]`, giving `[N]`.
    pub fn row_entropy(&mut self, logits: Var) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("row_entropy expects 2-D input, got {shape:?}")));
        }
        check_finite(self.value(logits), "row_entropy")?;
        let v = shape[1];
        let data = self.value(logits).data().chunks(v).map(kernels::entropy_of_logits).collect();
        let value = Tensor { shape: vec![shape[0]], data };
        Ok(self.push(value, Op::RowEntropy(logits), &[logits]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// `[A, B, C, D] -> [A, C, B, D]`.
    pub fn swap_axes12(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("swap_axes12 expects rank 4, got {shape:?}")));
        }
        let data = swap12(self.value(a).data(), shape[0], shape[1], shape[2], shape[3]);
        let value = Tensor { shape: vec![shape[0], shape[2], shape[1], shape[3]], data };
        Ok(self.push(value, Op::SwapAxes12(a), &[a]))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        if loss.0 >= nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out[i] = Some(Tensor { shape: node.value.shape().to_vec(), data: g });
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let rg = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if rg(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if rg(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::AddBias(a, bias) => {
                    if rg(*bias) {
                        let n = val(*bias).numel();
                        let mut gb = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (s, x) in gb.iter_mut().zip(row) {
                                *s += x;
                            }
                        }
                        accumulate(&mut grads[bias.0], gb);
                    }
                    if rg(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        let c = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads[a.0], c);
                    }
                    if rg(*b) {
                        let c = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads[b.0], c);
                    }
                }
                Op::Scale(a, f) => {
                    let c = g.iter().map(|x| x * f).collect();
                    accumulate(&mut grads[a.0], c);
                }
                Op::MatMul(a, w) => {
                    let (k, n) = (val(*w).shape()[0], val(*w).shape()[1]);
                    let m = val(*a).numel() / k;
                    if rg(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm_nt(&g, val(*w).data(), &mut ga, m, n, k);
                        accumulate(&mut grads[a.0], ga);
                    }
                    if rg(*w) {
                        let mut gw = vec![0.0; k * n];
                        gemm_tn(val(*a).data(), &g, &mut gw, k, m, n);
                        accumulate(&mut grads[w.0], gw);
                    }
                }
                Op::Bmm { a, b, transpose_b } => {
                    let s = val(*a).shape();
                    let (batch, m, k) = (s[0], s[1], s[2]);
                    let n = node.value.shape()[2];
                    let (ad, bd) = (val(*a).data(), val(*b).data());
                    if rg(*a) {
                        let mut ga = vec![0.0; batch * m * k];
                        for i in 0..batch {
                            let g_i = &g[i * m * n..(i + 1) * m * n];
                            let b_i = &bd[i * k * n..(i + 1) * k * n];
                            let out = &mut ga[i * m * k..(i + 1) * m * k];
                            if *transpose_b {
                                // b_i is [n, k]
                                gemm_nn(g_i, b_i, out, m, n, k);
                            } else {
                                gemm_nt(g_i, b_i, out, m, n, k);
                            }
                        }
                        accumulate(&mut grads[a.0], ga);
                    }
                    if rg(*b) {
                        let mut gb = vec![0.0; batch * k * n];
                        for i in 0..batch {
                            let g_i = &g[i * m * n..(i + 1) * m * n];
                            let a_i = &ad[i * m * k..(i + 1) * m * k];
                            let out = &mut gb[i * k * n..(i + 1) * k * n];
                            if *transpose_b {
                                // d b_i[n, k] = g_iᵀ · a_i
                                gemm_tn(g_i, a_i, out, n, m, k);
                            } else {
                                gemm_tn(a_i, g_i, out, k, m, n);
                            }
                        }
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Softmax(a) | Op::CausalSoftmax(a) => {
                    let p = node.value.data();
                    let n = node.value.last_dim();
                    let mut ga = vec![0.0; p.len()];
                    for ((gr, pr), out) in g.chunks(n).zip(p.chunks(n)).zip(ga.chunks_mut(n)) {
                        let s = kernels::dot(gr, pr);
                        for j in 0..n {
                            out[j] = pr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LogSoftmax(a) => {
                    let ls = node.value.data();
                    let n = node.value.last_dim();
                    let mut ga = vec![0.0; ls.len()];
                    for ((gr, lr), out) in g.chunks(n).zip(ls.chunks(n)).zip(ga.chunks_mut(n)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            out[j] = gr[j] - lr[j].exp() * s;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Log(a) => {
                    let c = g.iter().zip(val(*a).data()).map(|(x, y)| x / y).collect();
                    accumulate(&mut grads[a.0], c);
                }
                Op::Exp(a) => {
                    let c = g.iter().zip(node.value.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], c);
                }
                Op::Gelu(a) => {
                    let c = g.iter().zip(val(*a).data()).map(|(x, &y)| x * kernels::gelu_grad(y)).collect();
                    accumulate(&mut grads[a.0], c);
                }
                Op::Sum(a) => {
                    accumulate(&mut grads[a.0], vec![g[0]; val(*a).numel()]);
                }
                Op::Mean(a) => {
                    let n = val(*a).numel();
                    accumulate(&mut grads[a.0], vec![g[0] / n as f64; n]);
                }
                Op::LayerNorm { x, gain, bias, rstd } => {
                    let xd = val(*x).data();
                    let gd = val(*gain).data();
                    let d = gd.len();
                    let mut gx = vec![0.0; xd.len()];
                    let mut ggain = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    let mut xhat = vec![0.0; d];
                    let mut dxhat = vec![0.0; d];
                    for (r, &s) in rstd.iter().enumerate() {
                        let xr = &xd[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        for j in 0..d {
                            xhat[j] = (xr[j] - mean) * s;
                            dxhat[j] = gr[j] * gd[j];
                            ggain[j] += gr[j] * xhat[j];
                            gbias[j] += gr[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = kernels::dot(&dxhat, &xhat) / d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = s * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                    if rg(*x) {
                        accumulate(&mut grads[x.0], gx);
                    }
                    if rg(*gain) {
                        accumulate(&mut grads[gain.0], ggain);
                    }
                    if rg(*bias) {
                        accumulate(&mut grads[bias.0], gbias);
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = val(*table).shape()[1];
                    let mut gt = vec![0.0; val(*table).numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[i * d + j];
                        }
                    }
                    accumulate(&mut grads[table.0], gt);
                }
                Op::GatherRows { x, rows } => {
                    let d = val(*x).shape()[1];
                    let mut gx = vec![0.0; val(*x).numel()];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            gx[r * d + j] += g[i * d + j];
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Pick { x, cols } => {
                    let d = val(*x).shape()[1];
                    let mut gx = vec![0.0; val(*x).numel()];
                    for (i, &c) in cols.iter().enumerate() {
                        gx[i * d + c] += g[i];
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::RowEntropy(a) => {
                    let z = val(*a).data();
                    let v = val(*a).last_dim();
                    let mut ga = vec![0.0; z.len()];
                    let mut p = vec![0.0; v];
                    for (r, zr) in z.chunks(v).enumerate() {
                        p.copy_from_slice(zr);
                        kernels::softmax_in_place(&mut p);
                        let expected = kernels::dot(&p, zr);
                        let out = &mut ga[r * v..(r + 1) * v];
                        for j in 0..v {
                            out[j] = -g[r] * p[j] * (zr[j] - expected);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Reshape(a) => accumulate(&mut grads[a.0], g),
                Op::SwapAxes12(a) => {
                    let s = node.value.shape();
                    // node is [A, C, B, D]; swapping again restores [A, B, C, D]
                    let back = swap12(&g, s[0], s[1], s[2], s[3]);
                    accumulate(&mut grads[a.0], back);
                }
            }
        }
        // Parameter leaves created after the loss are unreachable from it.
        for (i, node) in nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn swap12(src: &[f64], a: usize, b: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let from = ((i * b + j) * c + k) * d;
                let to = ((i * c + k) * b + j) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    out
}
