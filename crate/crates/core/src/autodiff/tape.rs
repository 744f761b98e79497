//! Wengert tape: every op evaluates eagerly, records its inputs, and
//! `backward` replays the list in reverse accumulating vector-Jacobian products.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::kernels;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a tensor recorded on a specific [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn tape_id(self) -> u32 {
        self.tape
    }

    fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddLast { x: Var, b: Var },
    MulLast { x: Var, g: Var },
    ScaleRows { x: Var, s: Var, cols: usize },
    Affine { x: Var, scale: f64 },
    Concat { inputs: Vec<Var>, sizes: Vec<usize>, outer: usize, inner: usize },
    Slice { x: Var, outer: usize, in_len: usize, start: usize, len: usize, inner: usize },
    Index { x: Var, src: Vec<usize> },
    Reshape(Var),
    Softmax { x: Var, cols: usize },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    LayerNorm { x: Var, cols: usize, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, outer: usize, len: usize, inner: usize, mean: bool },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-threaded computation tape.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for the leaf `v`, or `None` when `v` is not a leaf,
    /// is a constant, or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.index()].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.index()].value.data()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable {:?} does not belong to tape {}",
                v, self.id
            )));
        }
        Ok(())
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index()].needs_grad)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let idx = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self.id, idx }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericOverflow { op: name });
        }
        let needs = self.needs(inputs);
        Ok(self.push_unchecked(value, op, needs))
    }

    // ---- linear algebra -------------------------------------------------

    /// `a [m,k] @ b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `x [m,k] @ w [k,n] + b [n]`, with the bias optional.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::shape("linear", format!("{sx:?} x {sw:?}")));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let mut out = match b {
            Some(b) => {
                self.check(b)?;
                if self.shape(b) != [n] {
                    return Err(Error::shape("linear", format!("bias {:?} for width {n}", self.shape(b))));
                }
                self.data(b).repeat(m)
            }
            None => vec![0.0; m * n],
        };
        kernels::gemm(self.data(x), self.data(w), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let inputs: &[Var] = match b {
            Some(b) => &[x, w, b],
            None => &[x, w],
        };
        self.push("linear", value, Op::Linear { x, w, b, m, k, n }, inputs)
    }

    /// Batched `a [B,m,k] @ b [B,k,n]`, or `a @ bᵀ` with `b [B,n,k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ab = &ad[bi * m * k..(bi + 1) * m * k];
            let bb = &bd[bi * k * n..(bi + 1) * k * n];
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(ab, bb, ob, m, k, n);
            } else {
                kernels::gemm(ab, bb, ob, m, k, n);
            }
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push("bmm", value, Op::BatchMatMul { a, b, batch, m, k, n, trans_b }, &[a, b])
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn last_dim_operand(&self, op: &'static str, x: Var, v: Var) -> Result<usize> {
        self.check(x)?;
        self.check(v)?;
        let sx = self.shape(x);
        let sv = self.shape(v);
        let n = *sx.last().unwrap_or(&0);
        if sx.is_empty() || sv.len() != 1 || sv[0] != n {
            return Err(Error::shape(op, format!("{sx:?} with {sv:?}")));
        }
        Ok(n)
    }

    /// Adds a vector `b [n]` to every row of `x [..., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.last_dim_operand("add_bias", x, b)?;
        let bd = self.data(b);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            for (a, c) in row.iter_mut().zip(bd) {
                *a += c;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("add_bias", value, Op::AddLast { x, b }, &[x, b])
    }

    /// Multiplies every row of `x [..., n]` by `g [n]` elementwise.
    pub fn mul_last(&mut self, x: Var, g: Var) -> Result<Var> {
        let n = self.last_dim_operand("mul_last", x, g)?;
        let gd = self.data(g);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            for (a, c) in row.iter_mut().zip(gd) {
                *a *= c;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("mul_last", value, Op::MulLast { x, g }, &[x, g])
    }

    /// Scales row `r` of `x [N, M]` by `s[r]` with `s [N]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check(x)?;
        self.check(s)?;
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.len() != 2 || ss.len() != 1 || ss[0] != sx[0] {
            return Err(Error::shape("scale_rows", format!("{sx:?} with {ss:?}")));
        }
        let cols = sx[1];
        let sd = self.data(s);
        let mut data = self.data(x).to_vec();
        for (row, &c) in data.chunks_mut(cols.max(1)).zip(sd) {
            row.iter_mut().for_each(|a| *a *= c);
        }
        let value = Tensor::new(sx.to_vec(), data)?;
        self.push("scale_rows", value, Op::ScaleRows { x, s, cols }, &[x, s])
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.check(x)?;
        let data = self.data(x).iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("affine", value, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(x)?;
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(name, value, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    // ---- structural -----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push_unchecked(value, Op::Reshape(x), needs))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        for &v in inputs {
            self.check(v)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in inputs.iter().zip(&sizes) {
                let d = self.data(v);
                data.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat { inputs: inputs.to_vec(), sizes, outer, inner },
            inputs,
        )
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("{s:?} axis {axis} range {start}..{}", start + len),
            ));
        }
        let (outer, in_len, inner) = split_axis(&s, axis);
        let d = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * in_len * inner + start * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        self.push("slice", value, Op::Slice { x, outer, in_len, start, len, inner }, &[x])
    }

    /// Selects positions of the last axis: `out[..., j] = x[..., indices[j]]`.
    pub fn gather_last(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::shape("gather_last", "scalar input"))?;
        if indices.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather_last", format!("index out of range for {s:?}")));
        }
        let rows = self.value(x).len().checked_div(n).unwrap_or(0);
        let mut src = Vec::with_capacity(rows * indices.len());
        for r in 0..rows {
            src.extend(indices.iter().map(|&i| r * n + i));
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = indices.len();
        self.index_op("gather_last", x, shape, src)
    }

    /// General axis permutation: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("{axes:?} for {s:?}")));
        }
        let mut in_strides = vec![1; s.len()];
        for d in (0..s.len().saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * s[d + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total: usize = out_shape.iter().product();
        let mut src = Vec::with_capacity(total);
        let mut counter = vec![0usize; out_shape.len()];
        let mut offset = 0usize;
        for _ in 0..total {
            src.push(offset);
            for d in (0..out_shape.len()).rev() {
                counter[d] += 1;
                offset += strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                offset -= strides[d] * out_shape[d];
                counter[d] = 0;
            }
        }
        self.index_op("permute", x, out_shape, src)
    }

    fn index_op(&mut self, name: &'static str, x: Var, shape: Vec<usize>, src: Vec<usize>) -> Result<Var> {
        let d = self.data(x);
        let data = src.iter().map(|&i| d[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push(name, value, Op::Index { x, src }, &[x])
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        let cols = *s.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if cols == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(cols) {
            kernels::softmax_in_place(row);
        }
        let value = Tensor::new(s, data)?;
        self.push("softmax", value, Op::Softmax { x, cols }, &[x])
    }

    /// Layer normalisation over the last axis (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        let cols = *s.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if cols == 0 {
            return Err(Error::shape("layer_norm", "empty last axis"));
        }
        let mut data = self.data(x).to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / cols);
        for row in data.chunks_mut(cols) {
            let mean = kernels::sum(row) / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(s, data)?;
        self.push("layer_norm", value, Op::LayerNorm { x, cols, inv_std }, &[x])
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = Tensor::scalar(kernels::sum(self.data(x)));
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let value = Tensor::scalar(kernels::sum(self.data(x)) / n as f64);
        self.push("mean", value, Op::Mean(x), &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("mean_axis", x, axis, true)
    }

    fn reduce_axis(&mut self, name: &'static str, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::shape(name, format!("axis {axis} for {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.data(x);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * len * inner;
            // first term seeds the accumulator so a single-element reduction is exact
            let mut acc = d[base..base + inner].to_vec();
            for a in 1..len {
                let row = &d[base + a * inner..base + (a + 1) * inner];
                for (t, v) in acc.iter_mut().zip(row) {
                    *t += v;
                }
            }
            if mean {
                let inv = len as f64;
                acc.iter_mut().for_each(|t| *t /= inv);
            }
            data.extend(acc);
        }
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(shape, data)?;
        self.push(name, value, Op::SumAxis { x, outer, len, inner, mean }, &[x])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index() + 1];
        grads[loss.index()] = Some(vec![1.0]);
        for i in (0..=loss.index()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            // a reshape hands its buffer straight to an input that has none yet
            if let Op::Reshape(x) = node.op {
                if self.nodes[x.index()].needs_grad && grads[x.index()].is_none() {
                    grads[x.index()] = Some(g);
                    continue;
                }
            }
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            // interior buffers are dropped as soon as they are consumed
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.index()];
            if !n.needs_grad {
                return;
            }
            let slot = grads[v.index()].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (ad, bd) = (self.data(a), self.data(b));
                acc(a, &mut |ga| kernels::gemm_nt(g, bd, ga, m, n, k));
                acc(b, &mut |gb| kernels::gemm_tn(ad, g, gb, m, k, n));
            }
            &Op::Linear { x, w, b, m, k, n } => {
                let (xd, wd) = (self.data(x), self.data(w));
                acc(x, &mut |gx| kernels::gemm_nt(g, wd, gx, m, n, k));
                acc(w, &mut |gw| kernels::gemm_tn(xd, g, gw, m, k, n));
                if let Some(b) = b {
                    acc(b, &mut |gb| {
                        for row in g.chunks(n) {
                            kernels::axpy(1.0, row, gb);
                        }
                    });
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (ad, bd) = (self.data(a), self.data(b));
                acc(a, &mut |ga| {
                    for bi in 0..batch {
                        let gb_ = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bd[bi * k * n..(bi + 1) * k * n];
                        let gab = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            kernels::gemm(gb_, bb, gab, m, n, k);
                        } else {
                            kernels::gemm_nt(gb_, bb, gab, m, n, k);
                        }
                    }
                });
                acc(b, &mut |gbm| {
                    for bi in 0..batch {
                        let gb_ = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &ad[bi * m * k..(bi + 1) * m * k];
                        let gbb = &mut gbm[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            // d(a bᵀ)/db = gᵀ a
                            kernels::gemm_tn(gb_, ab, gbb, m, n, k);
                        } else {
                            kernels::gemm_tn(ab, gb_, gbb, m, k, n);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| kernels::axpy(1.0, g, ga));
                acc(b, &mut |gb| kernels::axpy(1.0, g, gb));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| kernels::axpy(1.0, g, ga));
                acc(b, &mut |gb| kernels::axpy(-1.0, g, gb));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                acc(a, &mut |ga| {
                    for ((t, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                        *t += gi * bi;
                    }
                });
                acc(b, &mut |gb| {
                    for ((t, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                        *t += gi * ai;
                    }
                });
            }
            &Op::AddLast { x, b } => {
                let n = self.value(b).len();
                acc(x, &mut |gx| kernels::axpy(1.0, g, gx));
                acc(b, &mut |gb| {
                    for row in g.chunks(n) {
                        kernels::axpy(1.0, row, gb);
                    }
                });
            }
            &Op::MulLast { x, g: gam } => {
                let n = self.value(gam).len();
                let (xd, gd) = (self.data(x), self.data(gam));
                acc(x, &mut |gx| {
                    for (grow, gxrow) in g.chunks(n).zip(gx.chunks_mut(n)) {
                        for j in 0..n {
                            gxrow[j] += grow[j] * gd[j];
                        }
                    }
                });
                acc(gam, &mut |gg| {
                    for (grow, xrow) in g.chunks(n).zip(xd.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * xrow[j];
                        }
                    }
                });
            }
            &Op::ScaleRows { x, s, cols } => {
                let (xd, sd) = (self.data(x), self.data(s));
                acc(x, &mut |gx| {
                    for (r, &sv) in sd.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        kernels::axpy(sv, &g[span.clone()], &mut gx[span]);
                    }
                });
                acc(s, &mut |gs| {
                    for (r, t) in gs.iter_mut().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        *t += kernels::dot(&g[span.clone()], &xd[span]);
                    }
                });
            }
            &Op::Affine { x, scale } => acc(x, &mut |gx| kernels::axpy(scale, g, gx)),
            Op::Concat { inputs, sizes, outer, inner } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&v, &sz) in inputs.iter().zip(sizes) {
                    acc(v, &mut |gv| {
                        for o in 0..*outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * sz * inner;
                            kernels::axpy(1.0, &g[src..src + sz * inner], &mut gv[dst..dst + sz * inner]);
                        }
                    });
                    offset += sz;
                }
            }
            &Op::Slice { x, outer, in_len, start, len, inner } => acc(x, &mut |gx| {
                for o in 0..outer {
                    let dst = o * in_len * inner + start * inner;
                    let src = o * len * inner;
                    kernels::axpy(1.0, &g[src..src + len * inner], &mut gx[dst..dst + len * inner]);
                }
            }),
            Op::Index { x, src } => acc(*x, &mut |gx| {
                for (gi, &s) in g.iter().zip(src) {
                    gx[s] += gi;
                }
            }),
            &Op::Reshape(x) => acc(x, &mut |gx| kernels::axpy(1.0, g, gx)),
            &Op::Softmax { x, cols } => acc(x, &mut |gx| {
                for ((grow, yrow), gxrow) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dotp = kernels::dot(grow, yrow);
                    for j in 0..cols {
                        gxrow[j] += yrow[j] * (grow[j] - dotp);
                    }
                }
            }),
            &Op::Sigmoid(x) => acc(x, &mut |gx| {
                for ((t, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *t += gi * yi * (1.0 - yi);
                }
            }),
            &Op::Tanh(x) => acc(x, &mut |gx| {
                for ((t, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *t += gi * (1.0 - yi * yi);
                }
            }),
            &Op::Relu(x) => {
                let xd = self.data(x);
                acc(x, &mut |gx| {
                    for ((t, gi), xi) in gx.iter_mut().zip(g).zip(xd) {
                        if *xi > 0.0 {
                            *t += gi;
                        }
                    }
                })
            }
            &Op::Exp(x) => acc(x, &mut |gx| {
                for ((t, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *t += gi * yi;
                }
            }),
            &Op::Log(x) => {
                let xd = self.data(x);
                acc(x, &mut |gx| {
                    for ((t, gi), xi) in gx.iter_mut().zip(g).zip(xd) {
                        *t += gi / xi;
                    }
                })
            }
            Op::LayerNorm { x, cols, inv_std } => {
                let cols = *cols;
                acc(*x, &mut |gx| {
                    let rows = g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols));
                    for (((grow, yrow), gxrow), is) in rows.zip(inv_std) {
                        let mg = kernels::sum(grow) / cols as f64;
                        let mgy = kernels::dot(grow, yrow) / cols as f64;
                        for j in 0..cols {
                            gxrow[j] += is * (grow[j] - mg - yrow[j] * mgy);
                        }
                    }
                })
            }
            &Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|t| *t += g[0])),
            &Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                acc(x, &mut |gx| gx.iter_mut().for_each(|t| *t += g[0] / n))
            }
            &Op::SumAxis { x, outer, len, inner, mean } => {
                let w = if mean { 1.0 / len as f64 } else { 1.0 };
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            kernels::axpy(w, grow, &mut gx[base..base + inner]);
                        }
                    }
                })
            }
        }
    }
}

