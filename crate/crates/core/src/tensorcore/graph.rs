//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its value
//! and the recipe for its vector-Jacobian product. Nodes are appended in
//! topological order by construction, so `backward` is a single reverse
//! sweep.

use super::params::{ParamGrads, ParamStore};
use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Binary(BinKind, Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Ln(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// Inverse standard deviation per row; 0 marks a degenerate row.
    LayerNorm(Var, Vec<f64>),
    /// Divisor used per row.
    RowNormalize(Var, Vec<f64>),
    ClampMin(Var, f64),
    SumAll(Var),
    SumRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    Im2Col(Im2ColSpec, Var),
}

/// Geometry of a square-kernel convolution unfolding. The input is laid out
/// as `(height * width) x channels`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Im2ColSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Im2ColSpec {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// For each output row and column, the flat input index it reads (or
    /// `None` for zero padding).
    fn for_each(&self, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let ncol = k * k * self.channels;
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = oy * ow + ox;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < self.height && (ix as usize) < self.width;
                        for c in 0..self.channels {
                            let col = (ky * k + kx) * self.channels + c;
                            let src = inside.then(|| ((iy as usize) * self.width + ix as usize) * self.channels + c);
                            f(orow * ncol + col, col, src);
                        }
                    }
                }
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let pick = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((pick(a.0, b.0)?, pick(a.1, b.1)?))
}

/// Sums a gradient of shape `full` down to `target` along broadcast axes.
fn reduce_to(g: &[f64], full: (usize, usize), target: (usize, usize)) -> Tensor {
    if full == target {
        return Tensor::matrix(target.0, target.1, g.to_vec()).unwrap();
    }
    let mut out = vec![0.0; target.0 * target.1];
    for i in 0..full.0 {
        let ti = if target.0 == 1 { 0 } else { i };
        for j in 0..full.1 {
            let tj = if target.1 == 1 { 0 } else { j };
            out[ti * target.1 + tj] += g[i * full.1 + j];
        }
    }
    Tensor::matrix(target.0, target.1, out).unwrap()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Rows whose variance falls below this normalize to exactly zero.
pub const LAYER_NORM_DEGENERATE_VAR: f64 = 1e-12;
/// Added to the variance before the square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Lower bound on vector norms in [`Graph::row_normalize`].
pub const NORM_EPS: f64 = 1e-12;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFiniteInput(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; receives no gradient outside of `Gradients::wrt`.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "constant")
    }

    /// A leaf bound to a named parameter of `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store.index_of(name).ok_or_else(|| Error::ShapeMismatch(format!("unknown parameter {name}")))?;
        self.push(store.value_at(idx).clone(), Op::Param(idx), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims(self.value(a));
        let (k2, m) = dims(self.value(b));
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("matmul {n}x{k} * {k2}x{m}")));
        }
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Tensor::matrix(n, m, data)?, Op::MatMul(a, b), "matmul")
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims(self.value(a));
        let (m, k2) = dims(self.value(b));
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("matmul_nt {n}x{k} * ({m}x{k2})^T")));
        }
        let data = matmul_nt(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Tensor::matrix(n, m, data)?, Op::MatMulNT(a, b), "matmul_nt")
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let da = dims(self.value(a));
        let db = dims(self.value(b));
        let (r, c) =
            broadcast_dims(da, db).ok_or_else(|| Error::ShapeMismatch(format!("{kind:?} {da:?} with {db:?}")))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let ia = if da.0 == 1 { 0 } else { i };
            let ib = if db.0 == 1 { 0 } else { i };
            for j in 0..c {
                let x = av[ia * da.1 + if da.1 == 1 { 0 } else { j }];
                let y = bv[ib * db.1 + if db.1 == 1 { 0 } else { j }];
                out.push(match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                });
            }
        }
        self.push(Tensor::matrix(r, c, out)?, Op::Binary(kind, a, b), "binary")
    }

    /// Elementwise sum with row/column/scalar broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), "scale")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), "exp")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a), "ln")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(gelu_scalar);
        self.push(v, Op::Gelu(a), "gelu")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = dims(x);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = x.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / s));
        }
        self.push(Tensor::matrix(r, c, out)?, Op::SoftmaxRows(a), "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = dims(x);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = x.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        self.push(Tensor::matrix(r, c, out)?, Op::LogSoftmaxRows(a), "log_softmax_rows")
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = dims(x);
        let mut out = Vec::with_capacity(r * c);
        let mut inv = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            if var < LAYER_NORM_DEGENERATE_VAR {
                inv.push(0.0);
                out.extend(std::iter::repeat_n(0.0, c));
            } else {
                let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv.push(s);
                out.extend(row.iter().map(|v| (v - mean) * s));
            }
        }
        self.push(Tensor::matrix(r, c, out)?, Op::LayerNorm(a, inv), "layer_norm")
    }

    /// Scales each row to unit Euclidean norm (norms floored at [`NORM_EPS`]).
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = dims(x);
        let mut out = Vec::with_capacity(r * c);
        let mut div = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            div.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        self.push(Tensor::matrix(r, c, out)?, Op::RowNormalize(a, div), "row_normalize")
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(lo));
        self.push(v, Op::ClampMin(a, lo), "clamp_min")
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Column sums as a `1 x c` row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = dims(x);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        self.push(Tensor::matrix(1, c, out)?, Op::SumRows(a), "sum_rows")
    }

    /// Column means as a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rows() as f64;
        let s = self.sum_rows(a)?;
        self.scale(s, 1.0 / r)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), "transpose")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::ShapeMismatch("concat_cols row counts differ".into()));
        }
        let c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Tensor::matrix(r, c, out)?, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            return Err(Error::ShapeMismatch("concat_rows column counts differ".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let r = out.len() / c.max(1);
        self.push(Tensor::matrix(r, c, out)?, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::ShapeMismatch(format!("row {bad} of {}", x.rows())));
        }
        let v = x.gather_rows(idx);
        self.push(v, Op::GatherRows(a, idx.to_vec()), "gather_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = dims(x);
        if start + len > c {
            return Err(Error::ShapeMismatch(format!("columns {start}..{} of {c}", start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(Tensor::matrix(r, len, out)?, Op::SliceCols(a, start), "slice_cols")
    }

    /// Unfolds convolution patches: the result has one row per output
    /// position and `kernel^2 * channels` columns.
    pub fn im2col(&mut self, a: Var, spec: Im2ColSpec) -> Result<Var> {
        let x = self.value(a);
        if dims(x) != (spec.height * spec.width, spec.channels) {
            return Err(Error::ShapeMismatch(format!(
                "im2col expects {}x{}, got {:?}",
                spec.height * spec.width,
                spec.channels,
                x.shape()
            )));
        }
        let ncol = spec.kernel * spec.kernel * spec.channels;
        let nrow = spec.out_height() * spec.out_width();
        let mut out = vec![0.0; nrow * ncol];
        let src = x.data();
        spec.for_each(|dst, _, s| {
            if let Some(s) = s {
                out[dst] = src[s];
            }
        });
        self.push(Tensor::matrix(nrow, ncol, out)?, Op::Im2Col(spec, a), "im2col")
    }

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalarLoss(shape));
        }
        self.backward_with(&[(loss, Tensor::filled(&shape, 1.0))])
    }

    /// Reverse sweep seeded with explicit output cotangents.
    pub fn backward_with(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(Error::ShapeMismatch("seed gradient shape".into()));
            }
            accumulate(&mut grads, *v, g.clone());
        }
        let last = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k) = dims(av);
                let m = bv.cols();
                let ga = matmul_nt(gd, bv.data(), n, m, k);
                let gb = matmul_tn(av.data(), gd, n, k, m);
                accumulate(grads, *a, Tensor::matrix(n, k, ga).unwrap());
                accumulate(grads, *b, Tensor::matrix(k, m, gb).unwrap());
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k) = dims(av);
                let m = bv.rows();
                let ga = matmul_nn(gd, bv.data(), n, m, k);
                let gb = matmul_tn(gd, av.data(), n, m, k);
                accumulate(grads, *a, Tensor::matrix(n, k, ga).unwrap());
                accumulate(grads, *b, Tensor::matrix(m, k, gb).unwrap());
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (da, db) = (dims(av), dims(bv));
                let full = dims(y);
                let mut ga = Vec::with_capacity(gd.len());
                let mut gb = Vec::with_capacity(gd.len());
                for r in 0..full.0 {
                    let ia = if da.0 == 1 { 0 } else { r };
                    let ib = if db.0 == 1 { 0 } else { r };
                    for c in 0..full.1 {
                        let x = av.data()[ia * da.1 + if da.1 == 1 { 0 } else { c }];
                        let z = bv.data()[ib * db.1 + if db.1 == 1 { 0 } else { c }];
                        let gv = gd[r * full.1 + c];
                        let (dx, dz) = match kind {
                            BinKind::Add => (gv, gv),
                            BinKind::Sub => (gv, -gv),
                            BinKind::Mul => (gv * z, gv * x),
                            BinKind::Div => (gv / z, -gv * x / (z * z)),
                        };
                        ga.push(dx);
                        gb.push(dz);
                    }
                }
                accumulate(grads, *a, reduce_to(&ga, full, da));
                accumulate(grads, *b, reduce_to(&gb, full, db));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|v| v * s)),
            Op::Exp(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, y)| g * y).collect();
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                let d = gd.iter().zip(x.data()).map(|(g, x)| g / x).collect();
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = gd.iter().zip(x.data()).map(|(g, &x)| g * gelu_grad(x)).collect();
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = dims(y);
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                accumulate(grads, *a, Tensor::matrix(r, c, d).unwrap());
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = dims(y);
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let gr = &gd[i * c..(i + 1) * c];
                    let gs: f64 = gr.iter().sum();
                    d.extend(y.row(i).iter().zip(gr).map(|(ly, g)| g - ly.exp() * gs));
                }
                accumulate(grads, *a, Tensor::matrix(r, c, d).unwrap());
            }
            Op::LayerNorm(a, inv) => {
                let (r, c) = dims(y);
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let s = inv[i];
                    if s == 0.0 {
                        d.extend(std::iter::repeat_n(0.0, c));
                        continue;
                    }
                    let yr = y.row(i);
                    let gr = &gd[i * c..(i + 1) * c];
                    let gm = gr.iter().sum::<f64>() / c as f64;
                    let gym = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                    d.extend(gr.iter().zip(yr).map(|(g, y)| s * (g - gm - y * gym)));
                }
                accumulate(grads, *a, Tensor::matrix(r, c, d).unwrap());
            }
            Op::RowNormalize(a, div) => {
                let (r, c) = dims(y);
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = &gd[i * c..(i + 1) * c];
                    let n = div[i];
                    if n <= NORM_EPS {
                        d.extend(gr.iter().map(|g| g / n));
                    } else {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        d.extend(gr.iter().zip(yr).map(|(g, y)| (g - y * dot) / n));
                    }
                }
                accumulate(grads, *a, Tensor::matrix(r, c, d).unwrap());
            }
            Op::ClampMin(a, lo) => {
                let x = self.value(*a);
                let d = gd.iter().zip(x.data()).map(|(g, &x)| if x > *lo { *g } else { 0.0 }).collect();
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, Tensor::filled(x.shape(), gd[0]));
            }
            Op::SumRows(a) => {
                let (r, c) = dims(self.value(*a));
                let mut d = Vec::with_capacity(r * c);
                for _ in 0..r {
                    d.extend_from_slice(gd);
                }
                accumulate(grads, *a, Tensor::matrix(r, c, d).unwrap());
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::ConcatCols(parts) => {
                let r = y.rows();
                let c = y.cols();
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let mut d = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        d.extend_from_slice(&gd[i * c + off..i * c + off + pc]);
                    }
                    off += pc;
                    accumulate(grads, p, Tensor::matrix(r, pc, d).unwrap());
                }
            }
            Op::ConcatRows(parts) => {
                let c = y.cols();
                let mut off = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    let d = gd[off * c..(off + pr) * c].to_vec();
                    off += pr;
                    accumulate(grads, p, Tensor::matrix(pr, c, d).unwrap());
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = dims(self.value(*a));
                let mut d = vec![0.0; r * c];
                for (k, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[src * c + j] += gd[k * c + j];
                    }
                }
                accumulate(grads, *a, Tensor::matrix(r, c, d).unwrap());
            }
            Op::SliceCols(a, start) => {
                let (r, c) = dims(self.value(*a));
                let len = y.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                accumulate(grads, *a, Tensor::matrix(r, c, d).unwrap());
            }
            Op::Im2Col(spec, a) => {
                let (r, c) = dims(self.value(*a));
                let mut d = vec![0.0; r * c];
                spec.for_each(|dst, _, s| {
                    if let Some(s) = s {
                        d[s] += gd[dst];
                    }
                });
                accumulate(grads, *a, Tensor::matrix(r, c, d).unwrap());
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to any node, `None` when the node does not
    /// influence the seeded outputs.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter of `store`; parameters not reached by
    /// the sweep get zeros. A parameter used several times accumulates.
    pub fn params(&self, graph: &Graph, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for (i, node) in graph.nodes.iter().enumerate() {
            if let (Op::Param(p), Some(g)) = (&node.op, &self.grads[i]) {
                out.add_to(*p, g);
            }
        }
        out
    }
}
