//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to the [`Graph`]; nodes only reference earlier
//! nodes, so the tape order is already topological and the backward pass is
//! a single reverse sweep. A graph supports one backward pass.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::gemm;
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
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
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowVec(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    L2Normalize { x: Var, outer: usize, len: usize, inner: usize, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, end: usize },
    Conv3x3 { x: Var, w: Var, b: Var, cols: Vec<f64>, h: usize, wd: usize, cin: usize },
    Upsample2x { x: Var, h: usize, w: usize, c: usize },
    BceWithLogits { z: Var, target: Vec<f64>, inv_tau: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of performed operations; inputs always precede outputs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` tracks gradients.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(name, gradient)` for every trainable parameter that entered the graph.
    pub fn params(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.params.iter().filter_map(|(name, v)| self.get(*v).map(|g| (name.as_str(), g)))
    }

    /// Accumulates parameter gradients into the matching tensors of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, g) in self.params() {
            if let Some(t) = store.get_mut(name) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if cfg!(debug_assertions) && !t.is_finite() {
        return Err(Error::NonFinite(op.to_string()));
    }
    Ok(())
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange { axis, rank: shape.len() });
    }
    Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        check_finite(name, &value)?;
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Copies `t` in as a leaf; it tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never tracks gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut value = t;
        value.set_requires_grad(false);
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Brings a named parameter into the graph. Repeated calls with the same
    /// name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        let v = self.leaf(t);
        if t.requires_grad() {
            self.params.push((name.to_string(), v));
        }
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::ShapeMismatch(format!("{op} expects a matrix, got {s:?}"))),
        }
    }

    /// `a [m,k] x b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    /// `a [m,k] x b[n,k]^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_bt", a)?;
        let (n, k2) = self.matrix_dims("matmul_bt", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("matmul_bt [{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push("matmul_bt", Tensor::from_parts(vec![m, n], out), Op::MatMulBt(a, b), rg)
    }

    fn zip_with(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(name, Tensor::from_parts(shape, data), op, rg)
    }

    fn map(&mut self, name: &str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(name, Tensor::from_parts(shape, data), op, rg)
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

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, gelu, Op::Gelu(a))
    }

    /// Adds `b [n]` to every row of `x [.., n]`.
    pub fn add_row_vec(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().expect("rank >= 1");
        if self.value(b).len() != n {
            return Err(Error::ShapeMismatch(format!(
                "row bias {:?} for input {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bias).map(|(a, c)| a + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, b]);
        self.push("add_row_vec", Tensor::from_parts(shape, data), Op::AddRowVec(x, b), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax { x, outer, len, inner }, rg)
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = *self.shape(x).last().expect("rank >= 1");
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm gain {:?} bias {:?} for input {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(x)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::BadConfig(format!("layer_norm eps must be positive, got {eps}")));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            rg,
        )
    }

    /// Scales every slice along `axis` to unit Euclidean norm. Zero slices
    /// stay zero and pass no gradient.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let norm = (0..len).map(|j| src[at(j)] * src[at(j)]).sum::<f64>().sqrt();
                norms[o * inner + i] = norm;
                if norm > 0.0 {
                    for j in 0..len {
                        out[at(j)] = src[at(j)] / norm;
                    }
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(
            "l2_normalize",
            Tensor::from_parts(shape, out),
            Op::L2Normalize { x, outer, len, inner, norms },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        if refs.iter().any(|t| t.rank() != 2) {
            return Err(Error::ShapeMismatch("concat_rows expects matrices".into()));
        }
        let t = Tensor::concat_rows(&refs)?;
        let rg = self.rg(parts);
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.matrix_dims("slice_rows", x)?;
        let t = self.value(x).slice_rows(start, end)?;
        let rg = self.rg(&[x]);
        self.push("slice_rows", t, Op::SliceRows { x, start }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims("slice_cols", x)?;
        if start >= end || end > n {
            return Err(Error::ShapeMismatch(format!("cols {start}..{end} of [{m},{n}]")));
        }
        let src = self.value(x).data();
        let data = (0..m).flat_map(|r| src[r * n + start..r * n + end].iter().copied()).collect();
        let rg = self.rg(&[x]);
        self.push("slice_cols", Tensor::from_parts(vec![m, end - start], data), Op::SliceCols { x, start, end }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::ShapeMismatch("empty concat_cols".into()))?;
        let (m, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != m {
                return Err(Error::ShapeMismatch(format!("concat_cols rows {r} vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push("concat_cols", Tensor::from_parts(vec![m, total], data), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Same-padded 3x3 convolution of `x [H,W,Cin]` with `w [3,3,Cin,Cout]`
    /// and bias `b [Cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd, cin) = match self.shape(x) {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::ShapeMismatch(format!("conv3x3 input must be [H,W,C], got {s:?}"))),
        };
        let cout = match self.shape(w) {
            [3, 3, ci, co] if *ci == cin => *co,
            s => {
                return Err(Error::ShapeMismatch(format!("conv3x3 kernel {s:?} for {cin} input channels")))
            }
        };
        if self.value(b).len() != cout {
            return Err(Error::ShapeMismatch(format!("conv3x3 bias {:?} for {cout} outputs", self.shape(b))));
        }
        let src = self.value(x).data();
        let k = 9 * cin;
        let mut cols = vec![0.0; h * wd * k];
        for y in 0..h {
            for xx in 0..wd {
                let row = &mut cols[(y * wd + xx) * k..(y * wd + xx + 1) * k];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        let from = (sy as usize * wd + sx as usize) * cin;
                        let to = (ky * 3 + kx) * cin;
                        row[to..to + cin].copy_from_slice(&src[from..from + cin]);
                    }
                }
            }
        }
        let bias = self.value(b).data();
        let mut out: Vec<f64> = (0..h * wd).flat_map(|_| bias.iter().copied()).collect();
        gemm(h * wd, k, cout, &cols, false, self.value(w).data(), false, &mut out, 1.0);
        let rg = self.rg(&[x, w, b]);
        self.push(
            "conv3x3",
            Tensor::from_parts(vec![h, wd, cout], out),
            Op::Conv3x3 { x, w, b, cols, h, wd, cin },
            rg,
        )
    }

    /// Nearest-neighbour 2x upsampling of `x [H,W,C]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = match self.shape(x) {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::ShapeMismatch(format!("upsample2x input must be [H,W,C], got {s:?}"))),
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let from = ((y / 2) * w + xx / 2) * c;
                let to = (y * 2 * w + xx) * c;
                out[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
        let rg = self.rg(&[x]);
        self.push("upsample2x", Tensor::from_parts(vec![2 * h, 2 * w, c], out), Op::Upsample2x { x, h, w, c }, rg)
    }

    /// Mean binary cross-entropy of `sigmoid(z * inv_tau)` against `target`.
    pub fn bce_with_logits(&mut self, z: Var, target: &[f64], inv_tau: f64) -> Result<Var> {
        let src = self.value(z).data();
        if src.len() != target.len() {
            return Err(Error::ShapeMismatch(format!(
                "bce target length {} for logits {:?}",
                target.len(),
                self.shape(z)
            )));
        }
        let total: f64 = src
            .iter()
            .zip(target)
            .map(|(&zv, &y)| {
                let s = zv * inv_tau;
                s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()
            })
            .sum();
        let loss = total / src.len() as f64;
        let rg = self.rg(&[z]);
        self.push("bce_with_logits", Tensor::scalar(loss), Op::BceWithLogits { z, target: target.to_vec(), inv_tau }, rg)
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only leaves and intermediate values of tracked nodes keep gradients.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Gradient buffer of an input, allocated on first use; `None` when untracked.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let node = &nodes[v.0];
                if node.requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
                } else {
                    None
                }
            }};
        }
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if let Some(ga) = slot!(*a) {
                    gemm(m, n, k, g, false, val(*b), true, ga, 1.0);
                }
                if let Some(gb) = slot!(*b) {
                    gemm(k, m, n, val(*a), true, g, false, gb, 1.0);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[0];
                if let Some(ga) = slot!(*a) {
                    gemm(m, n, k, g, false, val(*b), false, ga, 1.0);
                }
                if let Some(gb) = slot!(*b) {
                    gemm(n, m, k, g, true, val(*a), false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot!(*a) {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *x += gy * av;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
                }
            }
            Op::AddRowVec(x, b) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if let Some(gb) = slot!(*b) {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((x, gy), av) in ga.iter_mut().zip(g).zip(val(*a)) {
                        if *av > 0.0 {
                            *x += gy;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((x, gy), av) in ga.iter_mut().zip(g).zip(val(*a)) {
                        *x += gy * gelu_grad(*av);
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if let Some(gx) = slot!(*x) {
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let at = |j: usize| o * len * inner + j * inner + ii;
                            let dot: f64 = (0..*len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..*len {
                                gx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = val(*gain);
                let n = gv.len();
                if let Some(gb) = slot!(*bias) {
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
                if let Some(gg) = slot!(*gain) {
                    for (row, xh) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += row[j] * xh[j];
                        }
                    }
                }
                if let Some(gx) = slot!(*x) {
                    for (r, (row, xh)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = row[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let d = row[j] * gv[j];
                            gx[r * n + j] += rstd[r] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::L2Normalize { x, outer, len, inner, norms } => {
                if let Some(gx) = slot!(*x) {
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let norm = norms[o * inner + ii];
                            if norm == 0.0 {
                                continue;
                            }
                            let at = |j: usize| o * len * inner + j * inner + ii;
                            let dot: f64 = (0..*len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..*len {
                                gx[at(j)] += (g[at(j)] - out[at(j)] * dot) / norm;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|p| *p += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot!(*x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|p| *p += s);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    if let Some(gp) = slot!(*p) {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(a, b)| *a += b);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(gx) = slot!(*x) {
                    let cols = nodes[i].value.cols();
                    let off = start * cols;
                    gx[off..off + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::SliceCols { x, start, end } => {
                if let Some(gx) = slot!(*x) {
                    let n = nodes[x.0].value.cols();
                    let w = end - start;
                    for (r, row) in g.chunks_exact(w).enumerate() {
                        gx[r * n + start..r * n + end].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    if let Some(gp) = slot!(*p) {
                        for (r, row) in g.chunks_exact(total).enumerate() {
                            gp[r * w..(r + 1) * w].iter_mut().zip(&row[off..off + w]).for_each(|(a, b)| *a += b);
                        }
                    }
                    off += w;
                }
            }
            Op::Conv3x3 { x, w, b, cols, h, wd, cin } => {
                let (h, wd, cin) = (*h, *wd, *cin);
                let k = 9 * cin;
                let cout = g.len() / (h * wd);
                if let Some(gb) = slot!(*b) {
                    for row in g.chunks_exact(cout) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
                if let Some(gw) = slot!(*w) {
                    gemm(k, h * wd, cout, cols, true, g, false, gw, 1.0);
                }
                if let Some(gx) = slot!(*x) {
                    let mut gcols = vec![0.0; h * wd * k];
                    gemm(h * wd, cout, k, g, false, val(*w), true, &mut gcols, 0.0);
                    for y in 0..h {
                        for xx in 0..wd {
                            let row = &gcols[(y * wd + xx) * k..(y * wd + xx + 1) * k];
                            for ky in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = xx as isize + kx as isize - 1;
                                    if sx < 0 || sx >= wd as isize {
                                        continue;
                                    }
                                    let to = (sy as usize * wd + sx as usize) * cin;
                                    let from = (ky * 3 + kx) * cin;
                                    gx[to..to + cin].iter_mut().zip(&row[from..from + cin]).for_each(|(a, b)| *a += b);
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample2x { x, h, w, c } => {
                if let Some(gx) = slot!(*x) {
                    let (w, c) = (*w, *c);
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let to = ((y / 2) * w + xx / 2) * c;
                            let from = (y * 2 * w + xx) * c;
                            gx[to..to + c].iter_mut().zip(&g[from..from + c]).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::BceWithLogits { z, target, inv_tau } => {
                if let Some(gz) = slot!(*z) {
                    let scale = g[0] * inv_tau / target.len() as f64;
                    for ((p, zv), y) in gz.iter_mut().zip(val(*z)).zip(target) {
                        *p += (sigmoid(zv * inv_tau) - y) * scale;
                    }
                }
            }
        }
    }
}
