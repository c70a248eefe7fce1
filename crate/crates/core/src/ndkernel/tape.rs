//! Expression tape over [`Array`] values.
//!
//! Every primitive records its inputs and output value. Two sweeps run over a
//! recorded tape: a reverse sweep propagating adjoints (vector-Jacobian
//! products) and a forward sweep propagating tangents (Jacobian-vector
//! products). Leaves may borrow their value for the tape's lifetime so model
//! parameters are never copied.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use super::{kernels, Array};
use crate::error::{invalid, shape_err, Result};

/// Layer-norm variance stabilizer.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Softmax(Var),
    Gelu(Var),
    Silu(Var),
    Scale(Var, f64),
    Reshape(Var),
    Mean(Var),
    Sum(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Transpose(Var),
    Gather { x: Var, index: Arc<[usize]> },
}

struct Node<'a> {
    value: Cow<'a, Array>,
    op: Op,
}

/// How the right operand of an elementwise binary op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Same,
    /// Right operand is one row repeated across every row of the left.
    Rows,
}

/// Recorded computation. Adjoint and tangent sweeps can be replayed any
/// number of times against one recording.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    bound: HashMap<String, Var>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Cow<'a, Array>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf.
    pub fn input(&mut self, value: Array) -> Var {
        self.push(Cow::Owned(value), Op::Leaf)
    }

    /// Borrowed leaf.
    pub fn input_ref(&mut self, value: &'a Array) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    /// Named parameter leaf; repeated calls with the same name return the same node.
    pub fn param(&mut self, name: &str, value: &'a Array) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = self.input_ref(value);
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    // ----- primitives -------------------------------------------------------

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
        );
        let value = Array::new([m, n], out)?;
        Ok(self.push(Cow::Owned(value), Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Cow::Owned(value), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Cow::Owned(value), Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Cow::Owned(value), Op::Mul(a, b)))
    }

    /// Concatenate along the last axis; leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat of zero arrays"))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        if self.shape(first).is_empty() {
            return Err(shape_err("concat", "rank-0 operand"));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?}", self.shape(first), s),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let value = Array::new(shape, out)?;
        Ok(self.push(Cow::Owned(value), Op::Concat(parts.to_vec())))
    }

    /// Normalize over the last axis: `(x - mean) / sqrt(var + 1e-6)`, no affine.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if xv.rank() == 0 || d == 0 {
            return Err(shape_err("layer_norm", format!("{:?}", xv.shape())));
        }
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let value = Array::new(xv.shape().to_vec(), out)?;
        Ok(self.push(Cow::Owned(value), Op::LayerNorm { x, rstd }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if xv.rank() == 0 || d == 0 {
            return Err(shape_err("softmax", format!("{:?}", xv.shape())));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Array::new(xv.shape().to_vec(), out)?;
        Ok(self.push(Cow::Owned(value), Op::Softmax(x)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        self.push(Cow::Owned(value), Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::silu);
        self.push(Cow::Owned(value), Op::Silu(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scaled(c);
        self.push(Cow::Owned(value), Op::Scale(x, c))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(Cow::Owned(value), Op::Reshape(x)))
    }

    /// Mean of all elements, as a rank-0 array.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        if self.value(x).is_empty() {
            return Err(shape_err("mean", "empty array"));
        }
        let value = Array::scalar(self.value(x).mean());
        Ok(self.push(Cow::Owned(value), Op::Mean(x)))
    }

    /// Sum of all elements, as a rank-0 array.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array::scalar(self.value(x).sum());
        self.push(Cow::Owned(value), Op::Sum(x))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("[{start}, {end}) on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = w;
        let value = Array::new(out_shape, out)?;
        Ok(self.push(Cow::Owned(value), Op::Slice { x, axis, start, end }))
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let value = Array::new([c, r], kernels::transpose(self.value(x).data(), r, c))?;
        Ok(self.push(Cow::Owned(value), Op::Transpose(x)))
    }

    /// `out[i] = x.flat[index[i]]`, shaped `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if index.iter().any(|&i| i >= n) || shape.iter().product::<usize>() != index.len() {
            return Err(shape_err(
                "gather",
                format!("index set of {} into {n} elements as {shape:?}", index.len()),
            ));
        }
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Array::new(shape.to_vec(), data)?;
        Ok(self.push(Cow::Owned(value), Op::Gather { x, index }))
    }

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array> {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = broadcast_kind(op, av.shape(), bv.shape())?;
        let data = match kind {
            Bcast::Same => av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Bcast::Rows => {
                let d = bv.len();
                av.data()
                    .chunks(d)
                    .flat_map(|row| row.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
                    .collect::<Vec<_>>()
            }
        };
        Array::new(av.shape().to_vec(), data)
    }

    // ----- sweeps -------------------------------------------------------------

    /// Reverse sweep from `output` seeded with `seed` (defaults to 1 for a
    /// one-element output). Returns per-node adjoints; `None` marks nodes the
    /// output does not depend on.
    pub fn backward(&self, output: Var, seed: Option<&Array>) -> Result<Vec<Option<Array>>> {
        let out_val = self.value(output);
        let seed = match seed {
            Some(s) => {
                out_val.check_same("backward seed", s)?;
                s.clone()
            }
            None if out_val.len() == 1 => Array::full(out_val.shape().to_vec(), 1.0),
            None => {
                return Err(shape_err(
                    "backward",
                    format!("loss must be scalar, got shape {:?}", out_val.shape()),
                ))
            }
        };
        let mut adj: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate_adjoint(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(adj)
    }

    fn propagate_adjoint(&self, i: usize, g: &Array, adj: &mut [Option<Array>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga);
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, av.data(), true, g.data(), false, &mut gb);
                accumulate(adj, *a, Array::new([m, k], ga)?)?;
                accumulate(adj, *b, Array::new([k, n], gb)?)?;
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                accumulate(adj, *a, g.clone())?;
                let gb = self.reduce_to_rhs(*a, *b, g.clone())?;
                accumulate(adj, *b, if sign < 0.0 { gb.scaled(-1.0) } else { gb })?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = self.binary_with(g, bv, |x, y| x * y)?;
                let gb_full = g.zip_map(av, |x, y| x * y)?;
                accumulate(adj, *a, ga)?;
                let gb = self.reduce_to_rhs(*a, *b, gb_full)?;
                accumulate(adj, *b, gb)?;
            }
            Op::Concat(parts) => {
                let total = g.last_dim();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let w = *shape.last().expect("concat operands have rank >= 1");
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(
                            &g.data()[r * total + offset..r * total + offset + w],
                        );
                    }
                    accumulate(adj, p, Array::new(shape, part)?)?;
                    offset += w;
                }
            }
            Op::LayerNorm { x, rstd } => {
                let gx = kernels::layer_norm_linear(node.value.data(), rstd, g.data());
                accumulate(adj, *x, Array::new(g.shape().to_vec(), gx)?)?;
            }
            Op::Softmax(x) => {
                let gx = kernels::softmax_linear(node.value.data(), g.data(), g.last_dim());
                accumulate(adj, *x, Array::new(g.shape().to_vec(), gx)?)?;
            }
            Op::Gelu(x) => {
                let gx = self.value(*x).zip_map(g, |xv, gv| kernels::gelu_grad(xv) * gv)?;
                accumulate(adj, *x, gx)?;
            }
            Op::Silu(x) => {
                let gx = self.value(*x).zip_map(g, |xv, gv| kernels::silu_grad(xv) * gv)?;
                accumulate(adj, *x, gx)?;
            }
            Op::Scale(x, c) => accumulate(adj, *x, g.scaled(*c))?,
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x).to_vec())?;
                accumulate(adj, *x, gx)?;
            }
            Op::Mean(x) | Op::Sum(x) => {
                let xv = self.value(*x);
                let c = if matches!(node.op, Op::Mean(_)) {
                    g.item()? / xv.len() as f64
                } else {
                    g.item()?
                };
                accumulate(adj, *x, Array::full(xv.shape().to_vec(), c))?;
            }
            Op::Slice { x, axis, start, end } => {
                let shape = self.shape(*x).to_vec();
                let gx = scatter_slice(&shape, *axis, *start, *end, g.data());
                accumulate(adj, *x, Array::new(shape, gx)?)?;
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                let gx = kernels::transpose(g.data(), c, r);
                accumulate(adj, *x, Array::new([r, c], gx)?)?;
            }
            Op::Gather { x, index } => {
                let shape = self.shape(*x).to_vec();
                let mut gx = vec![0.0; shape.iter().product()];
                for (&i, &gv) in index.iter().zip(g.data()) {
                    gx[i] += gv;
                }
                accumulate(adj, *x, Array::new(shape, gx)?)?;
            }
        }
        Ok(())
    }

    /// Forward tangent sweep. `seeds` assigns tangents to leaves; all other
    /// leaves have zero tangent. Returns per-node tangents, `None` for zero.
    pub fn tangents(&self, seeds: &[(Var, &Array)]) -> Result<Vec<Option<Array>>> {
        let mut tan: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        for &(v, t) in seeds {
            if !matches!(self.nodes[v.0].op, Op::Leaf) {
                return Err(invalid("tangent seeds must be leaves"));
            }
            self.value(v).check_same("tangent seed", t)?;
            tan[v.0] = Some(t.clone());
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            tan[i] = self.propagate_tangent(i, &tan)?;
        }
        Ok(tan)
    }

    fn propagate_tangent(&self, i: usize, tan: &[Option<Array>]) -> Result<Option<Array>> {
        let node = &self.nodes[i];
        let t = |v: &Var| tan[v.0].as_ref();
        let out = match &node.op {
            Op::Leaf => unreachable!("leaves are seeded directly"),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if t(a).is_none() && t(b).is_none() {
                    return Ok(None);
                }
                let mut out = vec![0.0; m * n];
                if let Some(ta) = t(a) {
                    kernels::gemm(m, k, n, ta.data(), false, bv.data(), false, &mut out);
                }
                if let Some(tb) = t(b) {
                    let mut extra = vec![0.0; m * n];
                    kernels::gemm(m, k, n, av.data(), false, tb.data(), false, &mut extra);
                    for (o, e) in out.iter_mut().zip(extra) {
                        *o += e;
                    }
                }
                Array::new([m, n], out)?
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                match (t(a), t(b)) {
                    (None, None) => return Ok(None),
                    (Some(ta), None) => ta.clone(),
                    (ta, Some(tb)) => {
                        let base = ta
                            .cloned()
                            .unwrap_or_else(|| Array::zeros(node.value.shape().to_vec()));
                        self.binary_with(&base, tb, |x, y| x + sign * y)?
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut acc: Option<Array> = None;
                if let Some(ta) = t(a) {
                    acc = Some(self.binary_with(ta, bv, |x, y| x * y)?);
                }
                if let Some(tb) = t(b) {
                    let term = self.binary_with(av, tb, |x, y| x * y)?;
                    acc = Some(match acc {
                        Some(s) => s.add(&term)?,
                        None => term,
                    });
                }
                match acc {
                    Some(a) => a,
                    None => return Ok(None),
                }
            }
            Op::Concat(parts) => {
                if parts.iter().all(|p| t(p).is_none()) {
                    return Ok(None);
                }
                let total = node.value.last_dim();
                let rows = node.value.len() / total.max(1);
                let mut out = vec![0.0; node.value.len()];
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    if let Some(tp) = t(p) {
                        for r in 0..rows {
                            out[r * total + offset..r * total + offset + w]
                                .copy_from_slice(&tp.data()[r * w..(r + 1) * w]);
                        }
                    }
                    offset += w;
                }
                Array::new(node.value.shape().to_vec(), out)?
            }
            Op::LayerNorm { x, rstd } => match t(x) {
                None => return Ok(None),
                Some(tx) => Array::new(
                    tx.shape().to_vec(),
                    kernels::layer_norm_linear(node.value.data(), rstd, tx.data()),
                )?,
            },
            Op::Softmax(x) => match t(x) {
                None => return Ok(None),
                Some(tx) => Array::new(
                    tx.shape().to_vec(),
                    kernels::softmax_linear(node.value.data(), tx.data(), tx.last_dim()),
                )?,
            },
            Op::Gelu(x) => match t(x) {
                None => return Ok(None),
                Some(tx) => self.value(*x).zip_map(tx, |xv, d| kernels::gelu_grad(xv) * d)?,
            },
            Op::Silu(x) => match t(x) {
                None => return Ok(None),
                Some(tx) => self.value(*x).zip_map(tx, |xv, d| kernels::silu_grad(xv) * d)?,
            },
            Op::Scale(x, c) => match t(x) {
                None => return Ok(None),
                Some(tx) => tx.scaled(*c),
            },
            Op::Reshape(x) => match t(x) {
                None => return Ok(None),
                Some(tx) => tx.clone().reshape(node.value.shape().to_vec())?,
            },
            Op::Mean(x) => match t(x) {
                None => return Ok(None),
                Some(tx) => Array::scalar(tx.mean()),
            },
            Op::Sum(x) => match t(x) {
                None => return Ok(None),
                Some(tx) => Array::scalar(tx.sum()),
            },
            Op::Slice { x, axis, start, end } => match t(x) {
                None => return Ok(None),
                Some(tx) => {
                    let (outer, extent, inner) = split_axis(tx.shape(), *axis);
                    let mut out = Vec::with_capacity(node.value.len());
                    for o in 0..outer {
                        let base = o * extent * inner;
                        out.extend_from_slice(
                            &tx.data()[base + start * inner..base + end * inner],
                        );
                    }
                    Array::new(node.value.shape().to_vec(), out)?
                }
            },
            Op::Transpose(x) => match t(x) {
                None => return Ok(None),
                Some(tx) => {
                    let (r, c) = (tx.shape()[0], tx.shape()[1]);
                    Array::new([c, r], kernels::transpose(tx.data(), r, c))?
                }
            },
            Op::Gather { x, index } => match t(x) {
                None => return Ok(None),
                Some(tx) => Array::new(
                    node.value.shape().to_vec(),
                    index.iter().map(|&i| tx.data()[i]).collect(),
                )?,
            },
        };
        Ok(Some(out))
    }

    /// Elementwise op between a full-shape array and a right operand that is
    /// either the same shape or one broadcast row.
    fn binary_with(&self, a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        match broadcast_kind("binary", a.shape(), b.shape())? {
            Bcast::Same => a.zip_map(b, f),
            Bcast::Rows => {
                let d = b.len();
                let data = a
                    .data()
                    .chunks(d)
                    .flat_map(|row| row.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
                    .collect::<Vec<_>>();
                Array::new(a.shape().to_vec(), data)
            }
        }
    }

    /// Sum a full-shape adjoint down to the right operand's shape.
    fn reduce_to_rhs(&self, a: Var, b: Var, g: Array) -> Result<Array> {
        let bshape = self.shape(b).to_vec();
        match broadcast_kind("binary", self.shape(a), &bshape)? {
            Bcast::Same => Ok(g),
            Bcast::Rows => {
                let d = bshape.iter().product::<usize>();
                let mut out = vec![0.0; d];
                for row in g.data().chunks(d) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Array::new(bshape, out)
            }
        }
    }
}

fn broadcast_kind(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Bcast> {
    if lhs == rhs {
        return Ok(Bcast::Same);
    }
    let last = lhs.last().copied();
    let rhs_len: usize = rhs.iter().product();
    let rhs_is_row = !rhs.is_empty() && rhs[..rhs.len() - 1].iter().all(|&e| e == 1);
    if rhs_is_row && last == rhs.last().copied() && Some(rhs_len) == last && lhs.len() >= rhs.len()
    {
        return Ok(Bcast::Rows);
    }
    Err(shape_err(op, format!("{lhs:?} vs {rhs:?}")))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn scatter_slice(shape: &[usize], axis: usize, start: usize, end: usize, g: &[f64]) -> Vec<f64> {
    let (outer, extent, inner) = split_axis(shape, axis);
    let w = end - start;
    let mut out = vec![0.0; outer * extent * inner];
    for o in 0..outer {
        let base = o * extent * inner;
        out[base + start * inner..base + end * inner]
            .copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
    }
    out
}

fn accumulate(adj: &mut [Option<Array>], v: Var, contribution: Array) -> Result<()> {
    match &mut adj[v.0] {
        Some(existing) => existing.add_scaled(&contribution, 1.0),
        slot @ None => {
            *slot = Some(contribution);
            Ok(())
        }
    }
}
