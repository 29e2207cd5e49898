//! Recording graph with reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly, stores its output on the graph and
//! remembers its inputs. [`Graph::backward`] walks the nodes in reverse
//! recording order, which is a valid topological order because a node can
//! only refer to nodes created before it.
//!
//! Broadcasting is limited to the leading dimension: in `add`/`mul` the
//! right operand may have the shape of a single row of the left operand.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, transpose_raw, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, bool),
    Mul(Var, Var, bool),
    Scale(Var, f64),
    Reshape(Var),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Gelu(Var),
    LayerNorm { src: Var, eps: f64 },
    Embedding { table: Var, indices: Vec<usize> },
    Conv1dPointwise { x: Var, w: Var, b: Var },
    MaxPool { src: Var, argmax: Vec<usize> },
    Chamfer { a: Var, b: Var, nn_ab: Vec<usize>, nn_ba: Vec<usize> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn shape_err<T>(op: &str, a: &[usize], b: &[usize]) -> Result<T> {
    Err(Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}")))
}

/// `Ok(true)` when `b` broadcasts over the rows of `a`.
fn broadcast_rule(op: &str, a: &[usize], b: &[usize]) -> Result<bool> {
    if a == b {
        return Ok(false);
    }
    if !a.is_empty() && (b == &a[1..] || (b.first() == Some(&1) && b[1..] == a[1..])) {
        return Ok(true);
    }
    shape_err(op, a, b)
}

fn gelu<S: Real>(x: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(0.044715);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(0.044715);
    let half = S::of(0.5);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let du = c * (S::one() + S::of(3.0) * k * x * x);
    half * (S::one() + th) + half * x * (S::one() - th * th) * du
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            let (m, k) = ta.dims2("matmul")?;
            let (k2, n) = tb.dims2("matmul")?;
            if k != k2 {
                return shape_err("matmul", ta.shape(), tb.shape());
            }
            Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?
        };
        Ok(self.push(out, Op::MatMul(a, b), self.rg(&[a, b])))
    }

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(S, S) -> S) -> Result<(Tensor<S>, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = broadcast_rule(name, ta.shape(), tb.shape())?;
        let rl = tb.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[if bc { i % rl } else { i }]))
            .collect();
        Ok((Tensor::new(ta.shape().to_vec(), data)?, bc))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (out, bc) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b, bc), self.rg(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, bc) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b, bc), self.rg(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = {
            let ta = self.value(a);
            let cs = S::of(c);
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * cs).collect())
                .expect("same shape")
        };
        self.push(out, Op::Scale(a, c), self.rg(&[a]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a), self.rg(&[a])))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            let (r, c) = ta.dims2("transpose")?;
            Tensor::new(vec![c, r], transpose_raw(ta.data(), r, c))?
        };
        Ok(self.push(out, Op::Transpose(a), self.rg(&[a])))
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let dims: Vec<(usize, usize)> = vals
                .iter()
                .map(|v| v.dims2("concat"))
                .collect::<Result<_>>()?;
            match axis {
                0 => {
                    let c = dims[0].1;
                    if let Some(i) = dims.iter().position(|d| d.1 != c) {
                        return shape_err("concat", vals[0].shape(), vals[i].shape());
                    }
                    let r = dims.iter().map(|d| d.0).sum();
                    let data = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
                    Tensor::new(vec![r, c], data)?
                }
                1 => {
                    let r = dims[0].0;
                    if let Some(i) = dims.iter().position(|d| d.0 != r) {
                        return shape_err("concat", vals[0].shape(), vals[i].shape());
                    }
                    let c: usize = dims.iter().map(|d| d.1).sum();
                    let mut data = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for (v, d) in vals.iter().zip(&dims) {
                            data.extend_from_slice(&v.data()[i * d.1..(i + 1) * d.1]);
                        }
                    }
                    Tensor::new(vec![r, c], data)?
                }
                _ => return Err(Error::InvalidArgument(format!("concat axis {axis} not in {{0, 1}}"))),
            }
        };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), self.rg(parts)))
    }

    /// `len` rows (axis 0) or columns (axis 1) of a matrix starting at `start`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            let (r, c) = ta.dims2("slice")?;
            let extent = if axis == 0 { r } else { c };
            if axis > 1 || start + len > extent {
                return Err(Error::Shape(format!(
                    "slice [{start}, {}) on axis {axis} of shape {:?}",
                    start + len,
                    ta.shape()
                )));
            }
            if axis == 0 {
                Tensor::new(vec![len, c], ta.data()[start * c..(start + len) * c].to_vec())?
            } else {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&ta.data()[i * c + start..i * c + start + len]);
                }
                Tensor::new(vec![r, len], data)?
            }
        };
        Ok(self.push(out, Op::Slice { src: a, axis, start }, self.rg(&[a])))
    }

    /// Splits a matrix into equal parts along `axis`.
    pub fn split(&self, a: Var, axis: usize, parts: usize) -> Result<Vec<Var>> {
        let shape = self.shape(a);
        let extent = *shape.get(axis).ok_or_else(|| Error::Shape(format!("split axis {axis} of {shape:?}")))?;
        if parts == 0 || extent % parts != 0 {
            return Err(Error::Shape(format!("cannot split {shape:?} into {parts} parts on axis {axis}")));
        }
        let len = extent / parts;
        (0..parts).map(|i| self.slice(a, axis, i * len, len)).collect()
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.rg(&[a]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let s = {
            let ta = self.value(a);
            ta.data().iter().copied().sum::<S>() / S::of(ta.len() as f64)
        };
        self.push(Tensor::scalar(s), Op::Mean(a), self.rg(&[a]))
    }

    /// Softmax along `axis` of a matrix.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => self.softmax_rows(a),
            0 => {
                let t = self.transpose(a)?;
                let s = self.softmax_rows(t)?;
                self.transpose(s)
            }
            _ => Err(Error::InvalidArgument(format!("softmax axis {axis} not in {{0, 1}}"))),
        }
    }

    fn softmax_rows(&self, a: Var) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            let (r, c) = ta.dims2("softmax")?;
            let mut data = ta.data().to_vec();
            for row in data.chunks_mut(c.max(1)).take(r) {
                let m = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
                let mut z = S::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / z;
                }
            }
            Tensor::new(vec![r, c], data)?
        };
        Ok(self.push(out, Op::Softmax(a), self.rg(&[a])))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let out = {
            let ta = self.value(a);
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| gelu(x)).collect())
                .expect("same shape")
        };
        self.push(out, Op::Gelu(a), self.rg(&[a]))
    }

    /// Normalizes every row of a matrix to zero mean and unit variance.
    pub fn layer_norm(&self, a: Var, eps: f64) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            let (r, c) = ta.dims2("layer_norm")?;
            let mut data = ta.data().to_vec();
            let n = S::of(c as f64);
            for row in data.chunks_mut(c.max(1)).take(r) {
                let mu = row.iter().copied().sum::<S>() / n;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / n;
                let inv = S::one() / (var + S::of(eps)).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mu) * inv;
                }
            }
            Tensor::new(vec![r, c], data)?
        };
        Ok(self.push(out, Op::LayerNorm { src: a, eps }, self.rg(&[a])))
    }

    /// Gathers rows of `table` ([vocab, dim]) at `indices`.
    pub fn embedding(&self, table: Var, indices: &[usize]) -> Result<Var> {
        let out = {
            let tt = self.value(table);
            let (v, d) = tt.dims2("embedding")?;
            let mut data = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                if i >= v {
                    return Err(Error::InvalidArgument(format!("embedding index {i} >= vocabulary {v}")));
                }
                data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
            }
            Tensor::new(vec![indices.len(), d], data)?
        };
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            self.rg(&[table]),
        ))
    }

    /// Shared per-row affine map: `x [n, cin] · w [cin, cout] + b [cout]`.
    pub fn conv1d_pointwise(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = {
            let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
            let (n, cin) = tx.dims2("conv1d_pointwise")?;
            let (cin2, cout) = tw.dims2("conv1d_pointwise")?;
            if cin != cin2 {
                return shape_err("conv1d_pointwise", tx.shape(), tw.shape());
            }
            if tb.len() != cout {
                return shape_err("conv1d_pointwise bias", tw.shape(), tb.shape());
            }
            let mut data = matmul_raw(tx.data(), tw.data(), n, cin, cout);
            for row in data.chunks_mut(cout.max(1)) {
                for (o, &bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
            Tensor::new(vec![n, cout], data)?
        };
        Ok(self.push(out, Op::Conv1dPointwise { x, w, b }, self.rg(&[x, w, b])))
    }

    /// Maximum along `axis`, keeping the reduced axis with extent 1.
    /// The first maximal entry receives the gradient.
    pub fn max_pool(&self, a: Var, axis: usize) -> Result<Var> {
        let (out, argmax) = {
            let ta = self.value(a);
            let (r, c) = ta.dims2("max_pool")?;
            let d = ta.data();
            match axis {
                0 => {
                    let mut vals = vec![S::neg_infinity(); c];
                    let mut arg = vec![0; c];
                    for i in 0..r {
                        for j in 0..c {
                            if d[i * c + j] > vals[j] || i == 0 {
                                vals[j] = d[i * c + j];
                                arg[j] = i * c + j;
                            }
                        }
                    }
                    (Tensor::new(vec![1, c], vals)?, arg)
                }
                1 => {
                    let mut vals = Vec::with_capacity(r);
                    let mut arg = Vec::with_capacity(r);
                    for i in 0..r {
                        let mut best = i * c;
                        for j in 1..c {
                            if d[i * c + j] > d[best] {
                                best = i * c + j;
                            }
                        }
                        vals.push(d[best]);
                        arg.push(best);
                    }
                    (Tensor::new(vec![r, 1], vals)?, arg)
                }
                _ => return Err(Error::InvalidArgument(format!("max_pool axis {axis} not in {{0, 1}}"))),
            }
        };
        Ok(self.push(out, Op::MaxPool { src: a, argmax }, self.rg(&[a])))
    }

    /// Symmetric Chamfer-L2 between two `[n, 3]` point matrices:
    /// mean squared nearest distance from `a` to `b` plus from `b` to `a`.
    pub fn chamfer(&self, a: Var, b: Var) -> Result<Var> {
        let (value, nn_ab, nn_ba) = {
            let (ta, tb) = (self.value(a), self.value(b));
            let (n, da) = ta.dims2("chamfer")?;
            let (m, db) = tb.dims2("chamfer")?;
            if da != 3 || db != 3 || n == 0 || m == 0 {
                return shape_err("chamfer", ta.shape(), tb.shape());
            }
            let (pa, pb) = (ta.data(), tb.data());
            let mut nn_ab = vec![0usize; n];
            let mut nn_ba = vec![0usize; m];
            let mut best_ab = vec![S::infinity(); n];
            let mut best_ba = vec![S::infinity(); m];
            for i in 0..n {
                let (x, y, z) = (pa[3 * i], pa[3 * i + 1], pa[3 * i + 2]);
                for j in 0..m {
                    let dx = x - pb[3 * j];
                    let dy = y - pb[3 * j + 1];
                    let dz = z - pb[3 * j + 2];
                    let d = dx * dx + dy * dy + dz * dz;
                    if d < best_ab[i] {
                        best_ab[i] = d;
                        nn_ab[i] = j;
                    }
                    if d < best_ba[j] {
                        best_ba[j] = d;
                        nn_ba[j] = i;
                    }
                }
            }
            let s_ab = best_ab.iter().copied().sum::<S>() / S::of(n as f64);
            let s_ba = best_ba.iter().copied().sum::<S>() / S::of(m as f64);
            (s_ab + s_ba, nn_ab, nn_ba)
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::Chamfer { a, b, nn_ab, nn_ba },
            self.rg(&[a, b]),
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), S::one()));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |v: &Var| nodes[v.0].requires_grad;
            let val = |v: &Var| &nodes[v.0].value;
            let mut acc = |v: Var, t: Tensor<S>| accumulate(&mut grads, v, t);

            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped above"),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let (m, k) = ta.dims2("matmul")?;
                    let n = tb.shape()[1];
                    if needs(a) {
                        let bt = transpose_raw(tb.data(), k, n);
                        acc(*a, Tensor::new(vec![m, k], matmul_raw(g.data(), &bt, m, n, k))?);
                    }
                    if needs(b) {
                        let at = transpose_raw(ta.data(), m, k);
                        acc(*b, Tensor::new(vec![k, n], matmul_raw(&at, g.data(), k, m, n))?);
                    }
                }
                Op::Add(a, b, bc) => {
                    if needs(b) {
                        let gb = if *bc { row_sum(&g, val(b).shape()) } else { g.clone() };
                        acc(*b, gb);
                    }
                    if needs(a) {
                        acc(*a, g);
                    }
                }
                Op::Mul(a, b, bc) => {
                    let (ta, tb) = (val(a), val(b));
                    let rl = tb.len();
                    if needs(a) {
                        let d = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| gv * tb.data()[if *bc { i % rl } else { i }])
                            .collect();
                        acc(*a, Tensor::new(ta.shape().to_vec(), d)?);
                    }
                    if needs(b) {
                        let prod = Tensor::new(
                            ta.shape().to_vec(),
                            g.data().iter().zip(ta.data()).map(|(&gv, &av)| gv * av).collect(),
                        )?;
                        acc(*b, if *bc { row_sum(&prod, tb.shape()) } else { prod });
                    }
                }
                Op::Scale(a, c) => {
                    let cs = S::of(*c);
                    let d = g.data().iter().map(|&v| v * cs).collect();
                    acc(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Reshape(a) => acc(*a, g.reshaped(val(a).shape())?),
                Op::Transpose(a) => {
                    let (r, c) = val(a).dims2("transpose")?;
                    acc(*a, Tensor::new(vec![r, c], transpose_raw(g.data(), c, r))?);
                }
                Op::Concat(parts, axis) => {
                    let (_, total_c) = g.dims2("concat")?;
                    let mut offset = 0;
                    for p in parts {
                        let (pr, pc) = val(p).dims2("concat")?;
                        if needs(p) {
                            let data = if *axis == 0 {
                                g.data()[offset * pc..(offset + pr) * pc].to_vec()
                            } else {
                                let mut d = Vec::with_capacity(pr * pc);
                                for i in 0..pr {
                                    d.extend_from_slice(&g.data()[i * total_c + offset..i * total_c + offset + pc]);
                                }
                                d
                            };
                            acc(*p, Tensor::new(vec![pr, pc], data)?);
                        }
                        offset += if *axis == 0 { pr } else { pc };
                    }
                }
                Op::Slice { src, axis, start } => {
                    let (r, c) = val(src).dims2("slice")?;
                    let (gr, gc) = g.dims2("slice")?;
                    let mut full = vec![S::zero(); r * c];
                    for i in 0..gr {
                        for j in 0..gc {
                            let (si, sj) = if *axis == 0 { (start + i, j) } else { (i, start + j) };
                            full[si * c + sj] = g.data()[i * gc + j];
                        }
                    }
                    acc(*src, Tensor::new(vec![r, c], full)?);
                }
                Op::Sum(a) => acc(*a, Tensor::full(val(a).shape(), g.item())),
                Op::Mean(a) => {
                    let ta = val(a);
                    acc(*a, Tensor::full(ta.shape(), g.item() / S::of(ta.len() as f64)));
                }
                Op::Softmax(_) | Op::LayerNorm { .. } => {
                    let src = match &node.op {
                        Op::Softmax(s) => *s,
                        Op::LayerNorm { src, .. } => *src,
                        _ => unreachable!(),
                    };
                    let y = &node.value;
                    let (r, c) = y.dims2("row op")?;
                    let mut out = vec![S::zero(); r * c];
                    let is_softmax = matches!(node.op, Op::Softmax(_));
                    let eps = if let Op::LayerNorm { eps, .. } = node.op { eps } else { 0.0 };
                    for i in 0..r {
                        let yr = &y.data()[i * c..(i + 1) * c];
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let o = &mut out[i * c..(i + 1) * c];
                        if is_softmax {
                            let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for j in 0..c {
                                o[j] = yr[j] * (gr[j] - dot);
                            }
                        } else {
                            let xr = &val(&src).data()[i * c..(i + 1) * c];
                            let n = S::of(c as f64);
                            let mu = xr.iter().copied().sum::<S>() / n;
                            let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / n;
                            let inv = S::one() / (var + S::of(eps)).sqrt();
                            let mg = gr.iter().copied().sum::<S>() / n;
                            let mgy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>() / n;
                            for j in 0..c {
                                o[j] = inv * (gr[j] - mg - yr[j] * mgy);
                            }
                        }
                    }
                    acc(src, Tensor::new(vec![r, c], out)?);
                }
                Op::Gelu(a) => {
                    let ta = val(a);
                    let d = g.data().iter().zip(ta.data()).map(|(&gv, &x)| gv * gelu_grad(x)).collect();
                    acc(*a, Tensor::new(ta.shape().to_vec(), d)?);
                }
                Op::Embedding { table, indices } => {
                    let tt = val(table);
                    let d = tt.row_len();
                    let mut full = vec![S::zero(); tt.len()];
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            full[i * d + j] += g.data()[k * d + j];
                        }
                    }
                    acc(*table, Tensor::new(tt.shape().to_vec(), full)?);
                }
                Op::Conv1dPointwise { x, w, b } => {
                    let (tx, tw) = (val(x), val(w));
                    let (n, cin) = tx.dims2("conv1d_pointwise")?;
                    let cout = tw.shape()[1];
                    if needs(x) {
                        let wt = transpose_raw(tw.data(), cin, cout);
                        acc(*x, Tensor::new(vec![n, cin], matmul_raw(g.data(), &wt, n, cout, cin))?);
                    }
                    if needs(w) {
                        let xt = transpose_raw(tx.data(), n, cin);
                        acc(*w, Tensor::new(vec![cin, cout], matmul_raw(&xt, g.data(), cin, n, cout))?);
                    }
                    if needs(b) {
                        acc(*b, row_sum(&g, val(b).shape()));
                    }
                }
                Op::MaxPool { src, argmax, .. } => {
                    let ts = val(src);
                    let mut full = vec![S::zero(); ts.len()];
                    for (k, &pos) in argmax.iter().enumerate() {
                        full[pos] += g.data()[k];
                    }
                    acc(*src, Tensor::new(ts.shape().to_vec(), full)?);
                }
                Op::Chamfer { a, b, nn_ab, nn_ba } => {
                    let (ta, tb) = (val(a), val(b));
                    let (pa, pb) = (ta.data(), tb.data());
                    let (n, m) = (nn_ab.len(), nn_ba.len());
                    let ca = g.item() * S::of(2.0 / n as f64);
                    let cb = g.item() * S::of(2.0 / m as f64);
                    let mut ga = vec![S::zero(); pa.len()];
                    let mut gb = vec![S::zero(); pb.len()];
                    for (i, &j) in nn_ab.iter().enumerate() {
                        for k in 0..3 {
                            let d = (pa[3 * i + k] - pb[3 * j + k]) * ca;
                            ga[3 * i + k] += d;
                            gb[3 * j + k] += -d;
                        }
                    }
                    for (j, &i) in nn_ba.iter().enumerate() {
                        for k in 0..3 {
                            let d = (pb[3 * j + k] - pa[3 * i + k]) * cb;
                            gb[3 * j + k] += d;
                            ga[3 * i + k] += -d;
                        }
                    }
                    if needs(a) {
                        acc(*a, Tensor::new(ta.shape().to_vec(), ga)?);
                    }
                    if needs(b) {
                        acc(*b, Tensor::new(tb.shape().to_vec(), gb)?);
                    }
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaves keep their gradient; intermediate entries were consumed.
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<S: Real>(grads: &mut [Option<Tensor<S>>], v: Var, t: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

/// Sums the rows of `g` into a tensor of `shape` (one row).
fn row_sum<S: Real>(g: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    let rl = shape.iter().product::<usize>().max(1);
    let mut out = vec![S::zero(); rl];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % rl] += v;
    }
    Tensor::new(shape.to_vec(), out).expect("row shape")
}

/// Largest relative disagreement between the recorded gradient of `f` at
/// `point` and a fourth-order five-point finite difference with
/// per-coordinate step `h·(1 + |θ|)`, measured as
/// `|a − n| / (|a| + |n| + 1e-12)`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let g = Graph::new();
    let x = g.param(point.clone());
    let loss = f(&g, x)?;
    let analytic = g.backward(loss)?.wrt(x);

    let eval = |i: usize, delta: f64| -> Result<f64> {
        let mut t = point.clone();
        t.data_mut()[i] += delta;
        let g = Graph::new();
        let x = g.constant(t);
        let l = f(&g, x)?;
        let v = g.value(l).item();
        Ok(v)
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let step = h * (1.0 + point.data()[i].abs());
        let near = eval(i, step)? - eval(i, -step)?;
        let far = eval(i, 2.0 * step)? - eval(i, -2.0 * step)?;
        let numeric = (8.0 * near - far) / (12.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    const TOL: f64 = 1e-4;
    const H: f64 = 1e-5;

    #[test]
    fn softmax_uniform_on_equal_row() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 5], 3.0));
        let s = g.softmax(x, 1).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_identity_on_standardized_row() {
        let g = Graph::<f64>::new();
        let row = [1.0, -1.0, 1.0, -1.0];
        let x = g.constant(Tensor::from_f64(&[1, 4], &row).unwrap());
        let y = g.layer_norm(x, 1e-12).unwrap();
        for (a, b) in g.value(y).data().iter().zip(row) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::<f64>::new();
        let a = rand_t(&mut rng, &[3, 4]);
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1.0;
        }
        let (va, vi) = (g.constant(a.clone()), g.constant(eye));
        let p = g.matmul(va, vi).unwrap();
        assert_eq!(*g.value(p), a);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.add(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = rand_t(&mut rng, &[2, 3]);
        let g = Graph::<f64>::new();
        let x = g.param(t.clone());
        let l = g.sum(x);
        assert!(g.backward(l).unwrap().wrt(x).data().iter().all(|&v| v == 1.0));

        let g = Graph::<f64>::new();
        let x = g.param(t.clone());
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        let gr = g.backward(l).unwrap().wrt(x);
        for (a, b) in gr.data().iter().zip(t.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_zero_fills_unused() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        let unused = g.param(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::InvalidArgument(_))));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(unused), Tensor::zeros(&[3]));
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = rand_t(&mut rng, &[3, 4]);
        let grad_of = |coef: (f64, f64)| {
            let g = Graph::<f64>::new();
            let x = g.param(t.clone());
            let s = g.softmax(x, 1).unwrap();
            let l1 = g.sum(g.mul(s, x).unwrap());
            let l2 = g.mean(g.gelu(x));
            let a = g.scale(l1, coef.0);
            let b = g.scale(l2, coef.1);
            let l = g.add(a, b).unwrap();
            g.backward(l).unwrap().wrt(x)
        };
        let (g1, g2, g12) = (grad_of((1.0, 0.0)), grad_of((0.0, 1.0)), grad_of((2.5, -0.7)));
        for i in 0..t.len() {
            let expect = 2.5 * g1.data()[i] - 0.7 * g2.data()[i];
            assert!((g12.data()[i] - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn primitive_grad_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let (m, k, n) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
            let a = rand_t(&mut rng, &[m, k]);
            let b = rand_t(&mut rng, &[k, n]);
            let w = rand_t(&mut rng, &[m, n]);
            let weighted = |g: &Graph<f64>, y: Var, w: &Tensor<f64>| -> Result<Var> {
                let wv = g.constant(w.clone());
                Ok(g.sum(g.mul(y, wv)?))
            };
            let bc = b.clone();
            let wc = w.clone();
            let e = grad_check(|g, x| weighted(g, g.matmul(x, g.constant(bc.clone()))?, &wc), &a, H).unwrap();
            assert!(e < TOL, "matmul lhs {e}");
            let ac = a.clone();
            let e = grad_check(|g, x| weighted(g, g.matmul(g.constant(ac.clone()), x)?, &wc), &b, H).unwrap();
            assert!(e < TOL, "matmul rhs {e}");
        }
    }
}
