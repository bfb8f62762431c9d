//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes are only
//! ever appended after their parents, so the tape order is a topological
//! order and the backward pass walks it in reverse, visiting each node once.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Norms below this are treated as zero vectors by the cosine operations.
pub const COSINE_EPS: f64 = 1e-12;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    StopGradient,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MeanOf(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    // Zero norm entries mark degenerate rows; their gradient is zero.
    RowCosine {
        a: Var,
        b: Var,
        a_norm: Vec<T>,
        b_norm: Vec<T>,
        sim: Vec<T>,
    },
    CosineMatrix {
        a: Var,
        b: Var,
        a_hat: Vec<T>,
        b_hat: Vec<T>,
        a_norm: Vec<T>,
        b_norm: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    degenerate_cosines: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
            degenerate_cosines: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of cosine evaluations that hit a zero-norm operand so far.
    pub fn degenerate_cosines(&self) -> usize {
        self.degenerate_cosines
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Forward-transparent copy that blocks all upstream gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(dim_err(op, s, &[])),
        }
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        let (m, k) = self.dims2(a, op)?;
        let (br, bc) = self.dims2(b, op)?;
        let (kb, n, b_strides) = if trans_b {
            (bc, br, (1, bc as isize))
        } else {
            (br, bc, (bc as isize, 1))
        };
        if k != kb {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            b_strides,
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Adds a scalar constant to every element.
    pub fn offset(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Offset(x), rg)
    }

    /// Adds `bias: [C]` to every row of `x: [.., C]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(dim_err("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRow { x, bias }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| gelu_fwd(v));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Argument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(src[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                let inv = T::one() / sum;
                for j in 0..len {
                    out[base + j * inner] *= inv;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma` and `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err("layernorm", self.shape(x), self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / c.max(1);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        let inv_c = T::one() / T::lit(c as f64);
        let eps = T::lit(eps);
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(dim_err("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![r, len], out),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Argument("concat_cols of nothing".into()))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(dim_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts(vec![r, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::mean_of(&views)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::MeanOf(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.value(x).data().iter().copied().sum::<T>() / T::lit(n as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Per-row cosine distance `1 - cos(a_i, b_i)` of two `N×C` tensors.
    ///
    /// Rows where either norm is below [`COSINE_EPS`] yield exactly 1.0 and
    /// carry no gradient.
    pub fn row_cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c) = self.dims2(a, "row_cosine_distance")?;
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("row_cosine_distance", self.shape(a), self.shape(b)));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut a_norm = vec![T::zero(); n];
        let mut b_norm = vec![T::zero(); n];
        let mut sim = vec![T::zero(); n];
        let mut out = vec![T::one(); n];
        let mut degenerate = 0;
        for i in 0..n {
            let ar = &av[i * c..(i + 1) * c];
            let br = &bv[i * c..(i + 1) * c];
            let na = ar.iter().map(|&v| v * v).sum::<T>().sqrt();
            let nb = br.iter().map(|&v| v * v).sum::<T>().sqrt();
            if na.f64() < COSINE_EPS || nb.f64() < COSINE_EPS {
                degenerate += 1;
                continue;
            }
            let dot = ar.iter().zip(br).map(|(&x, &y)| x * y).sum::<T>();
            let s = dot / (na * nb);
            a_norm[i] = na;
            b_norm[i] = nb;
            sim[i] = s;
            out[i] = T::one() - s;
        }
        self.flag_degenerate(degenerate, "row_cosine_distance");
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![n], out),
            Op::RowCosine {
                a,
                b,
                a_norm,
                b_norm,
                sim,
            },
            rg,
        ))
    }

    /// Scalar cosine distance between two flat tensors of equal length.
    pub fn cosine_distance(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.value(u).numel() != self.value(v).numel() {
            return Err(dim_err("cosine_distance", self.shape(u), self.shape(v)));
        }
        let n = self.value(u).numel();
        let u2 = self.reshape(u, &[1, n])?;
        let v2 = self.reshape(v, &[1, n])?;
        let d = self.row_cosine_distance(u2, v2)?;
        self.reshape(d, &[])
    }

    /// All-pairs cosine distance: `out[i, j] = 1 - cos(a_i, b_j)` for
    /// `a: N×C`, `b: M×C`.
    pub fn cosine_distance_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c) = self.dims2(a, "cosine_distance_matrix")?;
        let (m, cb) = self.dims2(b, "cosine_distance_matrix")?;
        if c != cb {
            return Err(dim_err(
                "cosine_distance_matrix",
                self.shape(a),
                self.shape(b),
            ));
        }
        let (a_hat, a_norm, da) = normalize_rows(self.value(a).data(), n, c);
        let (b_hat, b_norm, db) = normalize_rows(self.value(b).data(), m, c);
        self.flag_degenerate(da + db, "cosine_distance_matrix");
        let mut sim = vec![T::zero(); n * m];
        T::gemm(
            n,
            c,
            m,
            T::one(),
            &a_hat,
            (c as isize, 1),
            &b_hat,
            (1, c as isize),
            T::zero(),
            &mut sim,
            (m as isize, 1),
        );
        let out: Vec<T> = sim.iter().map(|&s| T::one() - s).collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::CosineMatrix {
                a,
                b,
                a_hat,
                b_hat,
                a_norm,
                b_norm,
            },
            rg,
        ))
    }

    fn flag_degenerate(&mut self, count: usize, op: &str) {
        if count > 0 {
            self.degenerate_cosines += count;
            log::warn!("{op}: {count} zero-norm operand(s); distance defined as 1.0");
        }
    }

    /// Runs the backward pass from a one-element `loss`.
    ///
    /// A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(dim_err("backward", self.shape(loss), &[]));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
    }

    fn acc_add(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T], sign: T) {
        if let Some(dst) = self.acc(grads, v) {
            for (d, &x) in dst.iter_mut().zip(g) {
                *d += sign * x;
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            &Op::MatMul { a, b, trans_b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = node.value.shape()[1];
                let (ki, ni) = (k as isize, n as isize);
                if let Some(da) = self.acc(grads, a) {
                    // dA = G·Bᵀ (or G·B when b was transposed)
                    let b_strides = if trans_b { (ki, 1) } else { (1, ni) };
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        (ni, 1),
                        bv,
                        b_strides,
                        T::one(),
                        da,
                        (ki, 1),
                    );
                }
                if let Some(db) = self.acc(grads, b) {
                    if trans_b {
                        // dB[n×k] = Gᵀ·A
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            g,
                            (1, ni),
                            av,
                            (ki, 1),
                            T::one(),
                            db,
                            (ki, 1),
                        );
                    } else {
                        // dB[k×n] = Aᵀ·G
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            av,
                            (1, ki),
                            g,
                            (ni, 1),
                            T::one(),
                            db,
                            (ni, 1),
                        );
                    }
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                if let Some(dx) = self.acc(grads, x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                self.acc_add(grads, a, g, T::one());
                self.acc_add(grads, b, g, T::one());
            }
            &Op::Sub(a, b) => {
                self.acc_add(grads, a, g, T::one());
                self.acc_add(grads, b, g, -T::one());
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(da) = self.acc(grads, a) {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    for ((d, &gi), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            &Op::Scale(x, c) => self.acc_add(grads, x, g, c),
            &Op::Offset(x) | &Op::Reshape(x) => self.acc_add(grads, x, g, T::one()),
            &Op::AddRow { x, bias } => {
                self.acc_add(grads, x, g, T::one());
                let c = self.shape(bias)[0];
                if let Some(db) = self.acc(grads, bias) {
                    for row in g.chunks(c.max(1)) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                if let Some(dx) = self.acc(grads, x) {
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gi * gelu_grad(v);
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), axis);
                if let Some(dx) = self.acc(grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for j in 0..len {
                                dot += g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                dx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.shape(*gamma)[0];
                let gv = self.value(*gamma).data();
                if let Some(dg) = self.acc(grads, *gamma) {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for grow in g.chunks(c) {
                        for j in 0..c {
                            db[j] += grow[j];
                        }
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let inv_c = T::one() / T::lit(c as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh *= inv_c;
                        mean_dh_h *= inv_c;
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            dx[r * c + j] += rs * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let c = self.shape(x)[1];
                let len = node.value.shape()[1];
                if let Some(dx) = self.acc(grads, x) {
                    for (i, grow) in g.chunks(len.max(1)).enumerate() {
                        for (j, &v) in grow.iter().enumerate() {
                            dx[i * c + start + j] += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(dp) = self.acc(grads, p) {
                        for (i, grow) in g.chunks(total.max(1)).enumerate() {
                            for j in 0..w {
                                dp[i * w + j] += grow[offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::MeanOf(parts) => {
                let inv = T::one() / T::lit(parts.len() as f64);
                for &p in parts {
                    self.acc_add(grads, p, g, inv);
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                let n = T::lit(self.value(x).numel().max(1) as f64);
                if let Some(dx) = self.acc(grads, x) {
                    let v = g[0] / n;
                    dx.iter_mut().for_each(|d| *d += v);
                }
            }
            Op::RowCosine {
                a,
                b,
                a_norm,
                b_norm,
                sim,
            } => {
                let c = self.shape(*a)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // d = 1 - s, so dd/da = -(b / (|a||b|) - s a / |a|²)
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..a_norm.len() {
                        if a_norm[i] == T::zero() {
                            continue;
                        }
                        let inv_ab = T::one() / (a_norm[i] * b_norm[i]);
                        let s_aa = sim[i] / (a_norm[i] * a_norm[i]);
                        for j in 0..c {
                            let p = i * c + j;
                            da[p] -= g[i] * (bv[p] * inv_ab - s_aa * av[p]);
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..b_norm.len() {
                        if b_norm[i] == T::zero() {
                            continue;
                        }
                        let inv_ab = T::one() / (a_norm[i] * b_norm[i]);
                        let s_bb = sim[i] / (b_norm[i] * b_norm[i]);
                        for j in 0..c {
                            let p = i * c + j;
                            db[p] -= g[i] * (av[p] * inv_ab - s_bb * bv[p]);
                        }
                    }
                }
            }
            Op::CosineMatrix {
                a,
                b,
                a_hat,
                b_hat,
                a_norm,
                b_norm,
            } => {
                let (n, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                // dL/dS = -G, then back through row normalization.
                if self.nodes[a.0].requires_grad {
                    let mut d_hat = vec![T::zero(); n * c];
                    T::gemm(
                        n,
                        m,
                        c,
                        -T::one(),
                        g,
                        (m as isize, 1),
                        b_hat,
                        (c as isize, 1),
                        T::zero(),
                        &mut d_hat,
                        (c as isize, 1),
                    );
                    let da = self.acc(grads, *a).expect("requires_grad checked");
                    unnormalize_grad(da, &d_hat, a_hat, a_norm, c);
                }
                if self.nodes[b.0].requires_grad {
                    let mut d_hat = vec![T::zero(); m * c];
                    T::gemm(
                        m,
                        n,
                        c,
                        -T::one(),
                        g,
                        (1, m as isize),
                        a_hat,
                        (c as isize, 1),
                        T::zero(),
                        &mut d_hat,
                        (c as isize, 1),
                    );
                    let db = self.acc(grads, *b).expect("requires_grad checked");
                    unnormalize_grad(db, &d_hat, b_hat, b_norm, c);
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let u = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    let du = k * (T::one() + T::lit(3.0) * c * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

/// Unit rows, row norms (zero for degenerate rows) and the degenerate count.
fn normalize_rows<T: Real>(data: &[T], rows: usize, c: usize) -> (Vec<T>, Vec<T>, usize) {
    let mut hat = vec![T::zero(); rows * c];
    let mut norms = vec![T::zero(); rows];
    let mut degenerate = 0;
    for i in 0..rows {
        let row = &data[i * c..(i + 1) * c];
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n.f64() < COSINE_EPS {
            degenerate += 1;
            continue;
        }
        norms[i] = n;
        let inv = T::one() / n;
        for j in 0..c {
            hat[i * c + j] = row[j] * inv;
        }
    }
    (hat, norms, degenerate)
}

/// Pulls a gradient on unit rows back to the raw rows.
fn unnormalize_grad<T: Real>(dst: &mut [T], d_hat: &[T], hat: &[T], norms: &[T], c: usize) {
    for (i, &n) in norms.iter().enumerate() {
        if n == T::zero() {
            continue;
        }
        let dh = &d_hat[i * c..(i + 1) * c];
        let h = &hat[i * c..(i + 1) * c];
        let proj = dh.iter().zip(h).map(|(&x, &y)| x * y).sum::<T>();
        let inv = T::one() / n;
        for j in 0..c {
            dst[i * c + j] += (dh[j] - h[j] * proj) * inv;
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, zero-filled when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub(crate) fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

/// Value-level cosine distance with its degeneracy flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineDistance {
    pub value: f64,
    pub degenerate: bool,
}

/// `1 - u·v / (|u||v|)` in `[0, 2]`; 1.0 (flagged degenerate) when either
/// norm is below [`COSINE_EPS`].
pub fn cosine_distance<T: Real>(u: &[T], v: &[T]) -> Result<CosineDistance> {
    if u.len() != v.len() {
        return Err(dim_err("cosine_distance", &[u.len()], &[v.len()]));
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.f64(), b.f64());
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < COSINE_EPS || nv < COSINE_EPS {
        log::warn!("cosine_distance: zero-norm operand; distance defined as 1.0");
        return Ok(CosineDistance {
            value: 1.0,
            degenerate: true,
        });
    }
    let value = (1.0 - dot / (nu * nv)).clamp(0.0, 2.0);
    Ok(CosineDistance {
        value,
        degenerate: false,
    })
}
