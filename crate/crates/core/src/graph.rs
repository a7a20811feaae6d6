//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse sweep.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{shape_err, Tensor, TensorError};

/// Added to the norm product in [`Graph::cosine_similarity`].
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
    Sum,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Conv1d { x: Var, k: Var, dilation: usize },
    Conv2d { x: Var, k: Var, stride: usize },
    Relu(Var),
    Tanh(Var),
    Square(Var),
    Reduce {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        kind: ReduceKind,
        argmax: Vec<usize>,
    },
    Mul(Var, Var),
    WeightRows(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Cosine { a: Var, b: Var, dot: f64, na: f64, nb: f64 },
    SumAll(Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A computation graph holding every intermediate value of one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Leaf node whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf node treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite(op_name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(shape_err(op, s, &[0, 0])),
        }
    }

    /// `a[P×Q] · b[Q×R]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (p, q) = self.rank2("matmul", a)?;
        let (q2, r) = self.rank2("matmul", b)?;
        if q != q2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            let orow = &mut out[i * r..(i + 1) * r];
            for k in 0..q {
                let s = av[i * q + k];
                if s != 0.0 {
                    axpy(s, &bv[k * r..(k + 1) * r], orow);
                }
            }
        }
        let value = Tensor::from_parts(vec![p, r], out);
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `a[P×Q] · b[R×Q]ᵀ`, the row-by-row dot product grid.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (p, q) = self.rank2("matmul_nt", a)?;
        let (r, q2) = self.rank2("matmul_nt", b)?;
        if q != q2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            let arow = &av[i * q..(i + 1) * q];
            for j in 0..r {
                out[i * r + j] = dot(arow, &bv[j * q..(j + 1) * q]);
            }
        }
        let value = Tensor::from_parts(vec![p, r], out);
        self.push("matmul_nt", value, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("transpose", a)?;
        let av = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let value = Tensor::from_parts(vec![c, r], out);
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let c = *self.shape(x).last().unwrap_or(&1);
        if self.shape(b) != [c] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(&bv).for_each(|(o, b)| *o += b);
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push("add_bias", value, Op::AddBias(x, b), &[x, b])
    }

    /// Dilated cross-correlation along the frame axis with zero "same"
    /// padding: `x[N×C_in]`, `k[width×C_in×C_out]` → `[N×C_out]`.
    pub fn conv1d_same(&mut self, x: Var, k: Var, dilation: usize) -> Result<Var, TensorError> {
        let (n, cin) = self.rank2("conv1d_same", x)?;
        let (width, kcin, cout) = match *self.shape(k) {
            [w, ci, co] => (w, ci, co),
            ref s => return Err(shape_err("conv1d_same", self.shape(x), s)),
        };
        if width % 2 == 0 {
            return Err(TensorError::Config(alloc::format!(
                "conv1d kernel width must be odd, got {width}"
            )));
        }
        if dilation == 0 {
            return Err(TensorError::Config("conv1d dilation must be positive".into()));
        }
        if kcin != cin {
            return Err(shape_err("conv1d_same", self.shape(x), self.shape(k)));
        }
        let half = (width / 2) as isize;
        let (xv, kv) = (self.value(x).data(), self.value(k).data());
        let mut out = vec![0.0; n * cout];
        for t in 0..n {
            let orow = &mut out[t * cout..(t + 1) * cout];
            for w in 0..width {
                let src = t as isize + (w as isize - half) * dilation as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let xrow = &xv[src as usize * cin..(src as usize + 1) * cin];
                let kw = &kv[w * cin * cout..(w + 1) * cin * cout];
                for (c, &xval) in xrow.iter().enumerate() {
                    if xval != 0.0 {
                        axpy(xval, &kw[c * cout..(c + 1) * cout], orow);
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![n, cout], out);
        self.push("conv1d_same", value, Op::Conv1d { x, k, dilation }, &[x, k])
    }

    /// Strided 2-D cross-correlation with zero "same" padding:
    /// `x[H×W×C_in]`, `k[kh×kw×C_in×C_out]` → `[ceil(H/s)×ceil(W/s)×C_out]`.
    pub fn conv2d_same(&mut self, x: Var, k: Var, stride: usize) -> Result<Var, TensorError> {
        let (h, w, cin) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            ref s => return Err(shape_err("conv2d_same", s, self.shape(k))),
        };
        let (kh, kw, kcin, cout) = match *self.shape(k) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(shape_err("conv2d_same", self.shape(x), s)),
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Config(alloc::format!(
                "conv2d kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv2d stride must be positive".into()));
        }
        if kcin != cin {
            return Err(shape_err("conv2d_same", self.shape(x), self.shape(k)));
        }
        let geom = Conv2dGeom::new(h, w, cin, kh, kw, cout, stride);
        let (xv, kv) = (self.value(x).data(), self.value(k).data());
        let mut out = vec![0.0; geom.ho * geom.wo * cout];
        geom.for_each_tap(|opix, a, b, src| {
            let orow = &mut out[opix * cout..(opix + 1) * cout];
            let xrow = &xv[src * cin..(src + 1) * cin];
            let kbase = (a * kw + b) * cin * cout;
            for (c, &xval) in xrow.iter().enumerate() {
                if xval != 0.0 {
                    axpy(xval, &kv[kbase + c * cout..kbase + (c + 1) * cout], orow);
                }
            }
        });
        let value = Tensor::from_parts(vec![geom.ho, geom.wo, cout], out);
        self.push("conv2d_same", value, Op::Conv2d { x, k, stride }, &[x, k])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).data().iter().map(|&v| libm::tanh(v)).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push("tanh", value, Op::Tanh(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).data().iter().map(|&v| v * v).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push("square", value, Op::Square(x), &[x])
    }

    /// Removes `axis` by max, mean or sum. Max ties resolve to the lowest
    /// index, which is also where the gradient is routed.
    pub fn reduce(&mut self, x: Var, axis: usize, kind: ReduceKind) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = xv[o * n * inner + i];
                        let mut best_k = 0;
                        for k in 1..n {
                            let v = xv[(o * n + k) * inner + i];
                            if v > best {
                                best = v;
                                best_k = k;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = best_k;
                    }
                }
            }
            ReduceKind::Mean | ReduceKind::Sum => {
                for o in 0..outer {
                    let orow = &mut out[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        orow.iter_mut()
                            .zip(&xv[base..base + inner])
                            .for_each(|(a, b)| *a += b);
                    }
                }
                if kind == ReduceKind::Mean {
                    let inv = 1.0 / n as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::from_parts(out_shape, out);
        let op = Op::Reduce {
            x,
            outer,
            n,
            inner,
            kind,
            argmax,
        };
        self.push("reduce", value, op, &[x])
    }

    /// Elementwise product of equal shapes, or a length-N weight vector
    /// scaling the rows of an `N×D` matrix.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let out = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect();
            let value = Tensor::from_parts(sa, out);
            return self.push("mul", value, Op::Mul(a, b), &[a, b]);
        }
        match (sa.as_slice(), sb.as_slice()) {
            ([n], [rows, d]) if n == rows => {
                let (wv, xv) = (self.value(a).data(), self.value(b).data());
                let mut out = xv.to_vec();
                for (row, &w) in out.chunks_mut(*d).zip(wv) {
                    row.iter_mut().for_each(|v| *v *= w);
                }
                let value = Tensor::from_parts(sb.clone(), out);
                self.push("mul", value, Op::WeightRows(a, b), &[a, b])
            }
            _ => Err(shape_err("mul", &sa, &sb)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.value(x).data().iter().map(|v| v + c).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    /// `dot(a, b) / (‖a‖·‖b‖ + ε)`. A zero-norm argument yields 0 with zero
    /// gradient.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a).len() != 1 || self.shape(a) != self.shape(b) {
            return Err(shape_err("cosine_similarity", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let d = dot(av, bv);
        let na = libm::sqrt(dot(av, av));
        let nb = libm::sqrt(dot(bv, bv));
        let out = if na == 0.0 || nb == 0.0 {
            log::debug!("cosine_similarity on a zero-norm vector; returning 0");
            0.0
        } else {
            d / (na * nb + COSINE_EPS)
        };
        let op = Op::Cosine { a, b, dot: d, na, nb };
        self.push("cosine_similarity", Tensor::scalar(out), op, &[a, b])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// `(x − target)²` for a scalar `x`.
    pub fn squared_error(&mut self, x: Var, target: f64) -> Result<Var, TensorError> {
        let d = self.add_scalar(x, -target)?;
        self.square(d)
    }

    /// Sum of several scalar nodes, in order.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var, TensorError> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| TensorError::Config("add_all needs at least one term".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Distance of the current forward pass from the nearest non-smooth
    /// point: the smallest `|input|` of any ReLU and the smallest gap between
    /// the winner and runner-up of any max reduction. Finite-difference
    /// checks are only meaningful when this exceeds the probe step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::Reduce {
                    x,
                    outer,
                    n,
                    inner,
                    kind: ReduceKind::Max,
                    argmax,
                } => {
                    let xv = self.nodes[x.0].value.data();
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let win = argmax[o * inner + i];
                            let best = xv[(o * n + win) * inner + i];
                            for k in (0..*n).filter(|&k| k != win) {
                                margin = margin.min(best - xv[(o * n + k) * inner + i]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Accumulates d`root`/d`v` for every node `v` that depends on a
    /// gradient-tracked leaf.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                self.grads[idx] = Some(upstream);
                continue;
            }
            self.propagate(idx, &upstream);
            self.grads[idx] = Some(upstream);
        }
        for (node, slot) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.needs_grad && matches!(node.op, Op::Leaf) && slot.is_none() {
                *slot = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&mut self, idx: usize, gy: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = (self.shape(a)[0], self.shape(a)[1]);
                let r = self.shape(b)[1];
                if self.wants(a) {
                    let bv = self.value(b).data();
                    let mut ga = vec![0.0; p * q];
                    for i in 0..p {
                        let grow = &gy[i * r..(i + 1) * r];
                        for k in 0..q {
                            ga[i * q + k] = dot(grow, &bv[k * r..(k + 1) * r]);
                        }
                    }
                    self.accumulate(a, ga);
                }
                if self.wants(b) {
                    let av = self.value(a).data();
                    let mut gb = vec![0.0; q * r];
                    for i in 0..p {
                        let grow = &gy[i * r..(i + 1) * r];
                        for k in 0..q {
                            axpy(av[i * q + k], grow, &mut gb[k * r..(k + 1) * r]);
                        }
                    }
                    self.accumulate(b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (p, q) = (self.shape(a)[0], self.shape(a)[1]);
                let r = self.shape(b)[0];
                if self.wants(a) {
                    let bv = self.value(b).data();
                    let mut ga = vec![0.0; p * q];
                    for i in 0..p {
                        let garow = &mut ga[i * q..(i + 1) * q];
                        for j in 0..r {
                            let g = gy[i * r + j];
                            if g != 0.0 {
                                axpy(g, &bv[j * q..(j + 1) * q], garow);
                            }
                        }
                    }
                    self.accumulate(a, ga);
                }
                if self.wants(b) {
                    let av = self.value(a).data();
                    let mut gb = vec![0.0; r * q];
                    for i in 0..p {
                        let arow = &av[i * q..(i + 1) * q];
                        for j in 0..r {
                            let g = gy[i * r + j];
                            if g != 0.0 {
                                axpy(g, arow, &mut gb[j * q..(j + 1) * q]);
                            }
                        }
                    }
                    self.accumulate(b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = gy[j * r + i];
                    }
                }
                self.accumulate(a, ga);
            }
            Op::AddBias(x, b) => {
                if self.wants(x) {
                    self.accumulate(x, gy.to_vec());
                }
                if self.wants(b) {
                    let c = self.shape(b)[0];
                    let mut gb = vec![0.0; c];
                    for row in gy.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(b, gb);
                }
            }
            Op::Conv1d { x, k, dilation } => {
                let (n, cin) = (self.shape(x)[0], self.shape(x)[1]);
                let (width, cout) = (self.shape(k)[0], self.shape(k)[2]);
                let half = (width / 2) as isize;
                let want_x = self.wants(x);
                let want_k = self.wants(k);
                let (xv, kv) = (self.value(x).data(), self.value(k).data());
                let mut gx = if want_x { vec![0.0; n * cin] } else { Vec::new() };
                let mut gk = if want_k { vec![0.0; width * cin * cout] } else { Vec::new() };
                for t in 0..n {
                    let grow = &gy[t * cout..(t + 1) * cout];
                    for w in 0..width {
                        let src = t as isize + (w as isize - half) * dilation as isize;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        let src = src as usize;
                        let block = w * cin * cout..(w + 1) * cin * cout;
                        tap_backward(grow, src, cin, &kv[block.clone()], xv, want_x, &mut gx, want_k, &mut gk, block);
                    }
                }
                if want_x {
                    self.accumulate(x, gx);
                }
                if want_k {
                    self.accumulate(k, gk);
                }
            }
            Op::Conv2d { x, k, stride } => {
                let (h, w, cin) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                let (kh, kw, cout) = (self.shape(k)[0], self.shape(k)[1], self.shape(k)[3]);
                let geom = Conv2dGeom::new(h, w, cin, kh, kw, cout, stride);
                let want_x = self.wants(x);
                let want_k = self.wants(k);
                let (xv, kv) = (self.value(x).data(), self.value(k).data());
                let mut gx = if want_x { vec![0.0; h * w * cin] } else { Vec::new() };
                let mut gk = if want_k { vec![0.0; kh * kw * cin * cout] } else { Vec::new() };
                geom.for_each_tap(|opix, a, b, src| {
                    let grow = &gy[opix * cout..(opix + 1) * cout];
                    let block = (a * kw + b) * cin * cout..(a * kw + b + 1) * cin * cout;
                    tap_backward(grow, src, cin, &kv[block.clone()], xv, want_x, &mut gx, want_k, &mut gk, block);
                });
                if want_x {
                    self.accumulate(x, gx);
                }
                if want_k {
                    self.accumulate(k, gk);
                }
            }
            Op::Relu(x) => {
                let g = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(x, g);
            }
            Op::Tanh(x) => {
                let y = self.nodes[idx].value.data();
                let g = y.iter().zip(gy).map(|(&y, &g)| g * (1.0 - y * y)).collect();
                self.accumulate(x, g);
            }
            Op::Square(x) => {
                let g = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| 2.0 * v * g)
                    .collect();
                self.accumulate(x, g);
            }
            Op::Reduce {
                x,
                outer,
                n,
                inner,
                kind,
                argmax,
            } => {
                let mut gx = vec![0.0; outer * n * inner];
                match kind {
                    ReduceKind::Max => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let k = argmax[o * inner + i];
                                gx[(o * n + k) * inner + i] = gy[o * inner + i];
                            }
                        }
                    }
                    ReduceKind::Mean | ReduceKind::Sum => {
                        let s = if kind == ReduceKind::Mean {
                            1.0 / n as f64
                        } else {
                            1.0
                        };
                        for o in 0..outer {
                            for k in 0..n {
                                let base = (o * n + k) * inner;
                                for i in 0..inner {
                                    gx[base + i] = s * gy[o * inner + i];
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, gx);
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let g = self.value(b).data().iter().zip(gy).map(|(v, g)| v * g).collect();
                    self.accumulate(a, g);
                }
                if self.wants(b) {
                    let g = self.value(a).data().iter().zip(gy).map(|(v, g)| v * g).collect();
                    self.accumulate(b, g);
                }
            }
            Op::WeightRows(wv, x) => {
                let d = self.shape(x)[1];
                if self.wants(wv) {
                    let g = self
                        .value(x)
                        .data()
                        .chunks(d)
                        .zip(gy.chunks(d))
                        .map(|(xr, gr)| dot(xr, gr))
                        .collect();
                    self.accumulate(wv, g);
                }
                if self.wants(x) {
                    let mut g = gy.to_vec();
                    for (row, &w) in g.chunks_mut(d).zip(self.value(wv).data()) {
                        row.iter_mut().for_each(|v| *v *= w);
                    }
                    self.accumulate(x, g);
                }
            }
            Op::Add(a, b) => {
                if self.wants(a) {
                    self.accumulate(a, gy.to_vec());
                }
                if self.wants(b) {
                    self.accumulate(b, gy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    self.accumulate(a, gy.to_vec());
                }
                if self.wants(b) {
                    self.accumulate(b, gy.iter().map(|g| -g).collect());
                }
            }
            Op::Scale(x, c) => self.accumulate(x, gy.iter().map(|g| g * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(x, gy.to_vec()),
            Op::SumAll(x) => {
                let n = self.value(x).len();
                self.accumulate(x, vec![gy[0]; n]);
            }
            Op::Cosine { a, b, dot: d, na, nb } => {
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let den = na * nb + COSINE_EPS;
                let g = gy[0];
                let grad_for = |own: &[f64], other: &[f64], n_own: f64, n_other: f64| -> Vec<f64> {
                    let c = d * n_other / (n_own * den * den);
                    own.iter()
                        .zip(other)
                        .map(|(&o, &t)| g * (t / den - c * o))
                        .collect()
                };
                if self.wants(a) {
                    let ga = grad_for(self.value(a).data(), self.value(b).data(), na, nb);
                    self.accumulate(a, ga);
                }
                if self.wants(b) {
                    let gb = grad_for(self.value(b).data(), self.value(a).data(), nb, na);
                    self.accumulate(b, gb);
                }
            }
        }
    }
}

/// Index geometry of a strided same-padded 2-D convolution.
struct Conv2dGeom {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl Conv2dGeom {
    fn new(h: usize, w: usize, _cin: usize, kh: usize, kw: usize, _cout: usize, stride: usize) -> Self {
        Self {
            h,
            w,
            kh,
            kw,
            stride,
            ho: h.div_ceil(stride),
            wo: w.div_ceil(stride),
        }
    }

    /// Calls `f(output_pixel, tap_row, tap_col, source_pixel)` for every
    /// in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        for oi in 0..self.ho {
            for oj in 0..self.wo {
                let opix = oi * self.wo + oj;
                for a in 0..self.kh {
                    let si = (oi * self.stride) as isize + a as isize - ph;
                    if si < 0 || si >= self.h as isize {
                        continue;
                    }
                    for b in 0..self.kw {
                        let sj = (oj * self.stride) as isize + b as isize - pw;
                        if sj < 0 || sj >= self.w as isize {
                            continue;
                        }
                        f(opix, a, b, si as usize * self.w + sj as usize);
                    }
                }
            }
        }
    }
}

#[inline]
/// Four interleaved partial sums, so the loop vectorises.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        let x: &[f64; 4] = x.try_into().expect("chunk of 4");
        let y: &[f64; 4] = y.try_into().expect("chunk of 4");
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += s * x);
}

/// Backward of one convolution tap: `grow` against the `[cin, cout]` kernel block.
#[allow(clippy::too_many_arguments)]
#[inline]
fn tap_backward(
    grow: &[f64],
    src: usize,
    cin: usize,
    kblock: &[f64],
    xv: &[f64],
    want_x: bool,
    gx: &mut [f64],
    want_k: bool,
    gk: &mut [f64],
    block: core::ops::Range<usize>,
) {
    let cout = grow.len();
    if want_x {
        let gxrow = &mut gx[src * cin..(src + 1) * cin];
        for (g, krow) in gxrow.iter_mut().zip(kblock.chunks_exact(cout)) {
            *g += dot(grow, krow);
        }
    }
    if want_k {
        let xrow = &xv[src * cin..(src + 1) * cin];
        for (&xval, gkrow) in xrow.iter().zip(gk[block].chunks_exact_mut(cout)) {
            if xval != 0.0 {
                axpy(xval, grow, gkrow);
            }
        }
    }
}
