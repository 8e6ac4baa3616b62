//! Eager reverse-mode differentiation over a closed set of vector operations.
//!
//! Each op computes its value immediately when pushed; `backward` replays the
//! recorded ops in reverse and accumulates vector-Jacobian products. The op set
//! is fixed (affine maps, pointwise nonlinearities, segment/column shuffles,
//! chunked softmax/cumsum, log-sum-exp) plus opaque batch ops with a
//! hand-supplied VJP for forward operators.
//!
//! Buffers are flat `Vec<f64>`; 2-D shapes live in the ops that need them.
//! Gradients only flow out of leaves pushed with [`Tape::param`].

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Handle to a tape node. Valid only for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Opaque batched operation with a custom vector-Jacobian product.
///
/// `input` is a flat `n x d` batch; `forward` returns one value per row and
/// `vjp` accumulates `out_grad[i] * d forward_i / d input` into `in_grad`.
pub trait CustomVjp: Send + Sync {
    fn name(&self) -> &str;
    fn rows_out(&self, n: usize) -> usize;
    fn forward(&self, input: &[f64], n: usize, d: usize) -> Vec<f64>;
    fn vjp(&self, input: &[f64], n: usize, d: usize, out_grad: &[f64], in_grad: &mut [f64]);
}

#[derive(Clone)]
enum Op {
    ConstLeaf,
    ParamLeaf,
    Slice { a: Var, start: usize },
    MatMulNT { a: Var, b: Var, n: usize, k: usize, m: usize },
    AddRowVec { a: Var, b: Var, m: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Neg { a: Var },
    Scale { a: Var, c: f64 },
    AddConst { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Softplus { a: Var },
    Exp { a: Var },
    Ln { a: Var },
    Sqrt { a: Var },
    Square { a: Var },
    Abs { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    RowSum { a: Var, m: usize },
    SoftmaxChunks { a: Var, chunk: usize },
    CumsumChunks { a: Var, chunk: usize },
    GatherCols { a: Var, m: usize, idx: Arc<Vec<usize>> },
    ScatterCols { a: Var, width: usize, idx: Arc<Vec<usize>> },
    Gather { a: Var, idx: Arc<Vec<usize>> },
    Select { a: Var, b: Var, mask: Arc<Vec<f64>> },
    Clamp { a: Var, lo: f64, hi: f64 },
    LogSumExp { parts: Vec<Var> },
    Custom { a: Var, n: usize, d: usize, f: Arc<dyn CustomVjp> },
}

struct Node {
    op: Op,
    val: Vec<f64>,
    needs_grad: bool,
}

/// Recording tape. Values are computed eagerly; call [`Tape::backward`] once
/// the scalar loss node exists.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or zeros if the loss never used it.
    pub fn get(&self, v: Var, len: usize) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

// Below this element count, matmul runs single-threaded.
const PAR_FLOP_THRESHOLD: usize = 1 << 15;

fn matmul_nt_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    let body = |i: usize, row_out: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row_out.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in ar.iter().zip(br) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if n * k * m >= PAR_FLOP_THRESHOLD && n > 1 {
        out.par_chunks_mut(m).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(m).enumerate() {
            body(i, row);
        }
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

    /// Value of a node.
    pub fn val(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].val
    }

    fn push(&mut self, op: Op, val: Vec<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, val, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf: gradients do not flow into it.
    pub fn constant(&mut self, values: Vec<f64>) -> Var {
        self.push(Op::ConstLeaf, values, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, values: Vec<f64>) -> Var {
        self.push(Op::ParamLeaf, values, true)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = &self.nodes[a.0].val;
        assert!(start + len <= src.len(), "slice {}..{} out of range {}", start, start + len, src.len());
        let val = src[start..start + len].to_vec();
        let ng = self.ng(a);
        self.push(Op::Slice { a, start }, val, ng)
    }

    /// `A (n x k) * B^T` with `B` stored row-major `m x k`; output `n x m`.
    pub fn matmul_nt(&mut self, a: Var, b: Var, n: usize, k: usize, m: usize) -> Var {
        assert_eq!(self.nodes[a.0].val.len(), n * k, "matmul lhs size");
        assert_eq!(self.nodes[b.0].val.len(), m * k, "matmul rhs size");
        let mut out = vec![0.0; n * m];
        matmul_nt_into(&self.nodes[a.0].val, &self.nodes[b.0].val, n, k, m, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMulNT { a, b, n, k, m }, out, ng)
    }

    /// Adds a length-`m` vector to every row of an `n x m` buffer.
    pub fn add_row_vec(&mut self, a: Var, b: Var, m: usize) -> Var {
        let bv = &self.nodes[b.0].val;
        assert_eq!(bv.len(), m, "row vector length");
        assert_eq!(self.nodes[a.0].val.len() % m, 0, "matrix width");
        let val: Vec<f64> = self.nodes[a.0]
            .val
            .chunks(m)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::AddRowVec { a, b, m }, val, ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let av = &self.nodes[a.0].val;
        let bv = &self.nodes[b.0].val;
        assert_eq!(av.len(), bv.len(), "elementwise op length mismatch");
        let val: Vec<f64> = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(op, val, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div { a, b })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let val: Vec<f64> = self.nodes[a.0].val.iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(op, val, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg { a })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale { a, c })
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddConst { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt { a })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square { a })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs { a })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].val.iter().sum();
        let ng = self.ng(a);
        self.push(Op::SumAll { a }, vec![s], ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].val;
        let s: f64 = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(Op::MeanAll { a }, vec![s], ng)
    }

    /// Row sums of an `n x m` buffer; output has length `n`.
    pub fn row_sum(&mut self, a: Var, m: usize) -> Var {
        let v = &self.nodes[a.0].val;
        assert_eq!(v.len() % m, 0, "row_sum width");
        let val: Vec<f64> = v.chunks(m).map(|r| r.iter().sum()).collect();
        let ng = self.ng(a);
        self.push(Op::RowSum { a, m }, val, ng)
    }

    /// Softmax over consecutive chunks of length `chunk`.
    pub fn softmax_chunks(&mut self, a: Var, chunk: usize) -> Var {
        let v = &self.nodes[a.0].val;
        assert!(chunk >= 1 && v.len() % chunk == 0, "softmax chunk size");
        let mut val = vec![0.0; v.len()];
        for (src, dst) in v.chunks(chunk).zip(val.chunks_mut(chunk)) {
            let mx = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (s, d) in src.iter().zip(dst.iter_mut()) {
                *d = (s - mx).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let ng = self.ng(a);
        self.push(Op::SoftmaxChunks { a, chunk }, val, ng)
    }

    /// Inclusive prefix sums over consecutive chunks of length `chunk`.
    pub fn cumsum_chunks(&mut self, a: Var, chunk: usize) -> Var {
        let v = &self.nodes[a.0].val;
        assert!(chunk >= 1 && v.len() % chunk == 0, "cumsum chunk size");
        let mut val = vec![0.0; v.len()];
        for (src, dst) in v.chunks(chunk).zip(val.chunks_mut(chunk)) {
            let mut acc = 0.0;
            for (s, d) in src.iter().zip(dst.iter_mut()) {
                acc += s;
                *d = acc;
            }
        }
        let ng = self.ng(a);
        self.push(Op::CumsumChunks { a, chunk }, val, ng)
    }

    /// Column subset of an `n x m` buffer; output is `n x idx.len()`.
    pub fn gather_cols(&mut self, a: Var, m: usize, idx: Arc<Vec<usize>>) -> Var {
        let v = &self.nodes[a.0].val;
        assert_eq!(v.len() % m, 0, "gather_cols width");
        assert!(idx.iter().all(|&j| j < m), "gather_cols index in range");
        let k = idx.len();
        let n = v.len() / m;
        let mut val = vec![0.0; n * k];
        for i in 0..n {
            for (jj, &j) in idx.iter().enumerate() {
                val[i * k + jj] = v[i * m + j];
            }
        }
        let ng = self.ng(a);
        self.push(Op::GatherCols { a, m, idx }, val, ng)
    }

    /// Places the columns of an `n x k` buffer at positions `idx` of an
    /// `n x width` zero buffer.
    pub fn scatter_cols(&mut self, a: Var, width: usize, idx: Arc<Vec<usize>>) -> Var {
        let v = &self.nodes[a.0].val;
        let k = idx.len();
        assert_eq!(v.len() % k, 0, "scatter_cols width");
        assert!(idx.iter().all(|&j| j < width), "scatter_cols index in range");
        let n = v.len() / k;
        let mut val = vec![0.0; n * width];
        for i in 0..n {
            for (jj, &j) in idx.iter().enumerate() {
                val[i * width + j] = v[i * k + jj];
            }
        }
        let ng = self.ng(a);
        self.push(Op::ScatterCols { a, width, idx }, val, ng)
    }

    /// Flat element gather, duplicates allowed; VJP scatter-adds.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let v = &self.nodes[a.0].val;
        assert!(idx.iter().all(|&j| j < v.len()), "gather index in range");
        let val: Vec<f64> = idx.iter().map(|&j| v[j]).collect();
        let ng = self.ng(a);
        self.push(Op::Gather { a, idx }, val, ng)
    }

    /// `mask * a + (1 - mask) * b` with a constant 0/1 mask.
    pub fn select(&mut self, mask: Arc<Vec<f64>>, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].val;
        let bv = &self.nodes[b.0].val;
        assert_eq!(av.len(), bv.len(), "select operand length");
        assert_eq!(av.len(), mask.len(), "select mask length");
        let val: Vec<f64> = mask
            .iter()
            .zip(av.iter().zip(bv))
            .map(|(&m, (&x, &y))| m * x + (1.0 - m) * y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Select { a, b, mask }, val, ng)
    }

    /// Clamp; gradient is zero where the value was clipped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    /// Elementwise `log(sum_p exp(parts[p]))` over equal-length buffers.
    pub fn log_sum_exp(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "log_sum_exp needs at least one part");
        let len = self.nodes[parts[0].0].val.len();
        for p in parts {
            assert_eq!(self.nodes[p.0].val.len(), len, "log_sum_exp part length");
        }
        let mut val = vec![0.0; len];
        for i in 0..len {
            let mx = parts
                .iter()
                .map(|p| self.nodes[p.0].val[i])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                val[i] = f64::NEG_INFINITY;
                continue;
            }
            let s: f64 = parts.iter().map(|p| (self.nodes[p.0].val[i] - mx).exp()).sum();
            val[i] = mx + s.ln();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::LogSumExp { parts: parts.to_vec() }, val, ng)
    }

    /// Opaque batched op over an `n x d` input with a custom VJP.
    pub fn custom(&mut self, a: Var, n: usize, d: usize, f: Arc<dyn CustomVjp>) -> Var {
        let v = &self.nodes[a.0].val;
        assert_eq!(v.len(), n * d, "custom op input size");
        let val = f.forward(v, n, d);
        assert_eq!(val.len(), f.rows_out(n), "custom op '{}' output size", f.name());
        let ng = self.ng(a);
        self.push(Op::Custom { a, n, d, f }, val, ng)
    }

    /// Errors if any element of `v` is non-finite.
    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        if let Some(bad) = self.nodes[v.0].val.iter().find(|x| !x.is_finite()) {
            return Err(Error::numeric(format!("non-finite value {bad} in {context}")));
        }
        Ok(())
    }

    /// Reverse pass from a scalar node. Fails if the loss is not a finite scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].val;
        if lv.len() != 1 {
            return Err(Error::dimension(format!(
                "backward: loss must be a scalar, got length {}",
                lv.len()
            )));
        }
        if !lv[0].is_finite() {
            return Err(Error::numeric(format!("backward: loss is {}", lv[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_into(grads: &mut Vec<Option<Vec<f64>>>, v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, node: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let val = &self.nodes[node].val;
        match &self.nodes[node].op {
            Op::ConstLeaf | Op::ParamLeaf => {}
            Op::Slice { a, start } => {
                if self.ng(*a) {
                    let alen = self.nodes[a.0].val.len();
                    let start = *start;
                    Self::add_into(grads, *a, alen, |dst| {
                        for (d, s) in dst[start..start + g.len()].iter_mut().zip(g) {
                            *d += s;
                        }
                    });
                }
            }
            Op::MatMulNT { a, b, n, k, m } => {
                let (n, k, m) = (*n, *k, *m);
                if self.ng(*a) {
                    let bv = &self.nodes[b.0].val;
                    Self::add_into(grads, *a, n * k, |da| {
                        let body = |i: usize, row: &mut [f64]| {
                            let gr = &g[i * m..(i + 1) * m];
                            for (j, &gj) in gr.iter().enumerate() {
                                if gj != 0.0 {
                                    let br = &bv[j * k..(j + 1) * k];
                                    for (d, &bb) in row.iter_mut().zip(br) {
                                        *d += gj * bb;
                                    }
                                }
                            }
                        };
                        if n * k * m >= PAR_FLOP_THRESHOLD && n > 1 {
                            da.par_chunks_mut(k).enumerate().for_each(|(i, row)| body(i, row));
                        } else {
                            for (i, row) in da.chunks_mut(k).enumerate() {
                                body(i, row);
                            }
                        }
                    });
                }
                if self.ng(*b) {
                    let av = &self.nodes[a.0].val;
                    Self::add_into(grads, *b, m * k, |db| {
                        let body = |j: usize, row: &mut [f64]| {
                            for i in 0..n {
                                let gj = g[i * m + j];
                                if gj != 0.0 {
                                    let ar = &av[i * k..(i + 1) * k];
                                    for (d, &aa) in row.iter_mut().zip(ar) {
                                        *d += gj * aa;
                                    }
                                }
                            }
                        };
                        if n * k * m >= PAR_FLOP_THRESHOLD && m > 1 {
                            db.par_chunks_mut(k).enumerate().for_each(|(j, row)| body(j, row));
                        } else {
                            for (j, row) in db.chunks_mut(k).enumerate() {
                                body(j, row);
                            }
                        }
                    });
                }
            }
            Op::AddRowVec { a, b, m } => {
                let m = *m;
                if self.ng(*a) {
                    Self::add_into(grads, *a, g.len(), |da| {
                        for (d, s) in da.iter_mut().zip(g) {
                            *d += s;
                        }
                    });
                }
                if self.ng(*b) {
                    Self::add_into(grads, *b, m, |db| {
                        for row in g.chunks(m) {
                            for (d, s) in db.iter_mut().zip(row) {
                                *d += s;
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.ng(*v) {
                        Self::add_into(grads, *v, g.len(), |dv| {
                            for (d, s) in dv.iter_mut().zip(g) {
                                *d += s;
                            }
                        });
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.ng(*a) {
                    Self::add_into(grads, *a, g.len(), |dv| {
                        for (d, s) in dv.iter_mut().zip(g) {
                            *d += s;
                        }
                    });
                }
                if self.ng(*b) {
                    Self::add_into(grads, *b, g.len(), |dv| {
                        for (d, s) in dv.iter_mut().zip(g) {
                            *d -= s;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                if self.ng(*a) {
                    let bv = &self.nodes[b.0].val;
                    Self::add_into(grads, *a, g.len(), |dv| {
                        for ((d, s), &y) in dv.iter_mut().zip(g).zip(bv) {
                            *d += s * y;
                        }
                    });
                }
                if self.ng(*b) {
                    let av = &self.nodes[a.0].val;
                    Self::add_into(grads, *b, g.len(), |dv| {
                        for ((d, s), &x) in dv.iter_mut().zip(g).zip(av) {
                            *d += s * x;
                        }
                    });
                }
            }
            Op::Div { a, b } => {
                let bv = &self.nodes[b.0].val;
                if self.ng(*a) {
                    Self::add_into(grads, *a, g.len(), |dv| {
                        for ((d, s), &y) in dv.iter_mut().zip(g).zip(bv) {
                            *d += s / y;
                        }
                    });
                }
                if self.ng(*b) {
                    let av = &self.nodes[a.0].val;
                    Self::add_into(grads, *b, g.len(), |dv| {
                        for (i, (d, s)) in dv.iter_mut().zip(g).enumerate() {
                            *d -= s * av[i] / (bv[i] * bv[i]);
                        }
                    });
                }
            }
            Op::Neg { a } => {
                if self.ng(*a) {
                    Self::add_into(grads, *a, g.len(), |dv| {
                        for (d, s) in dv.iter_mut().zip(g) {
                            *d -= s;
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                if self.ng(*a) {
                    let c = *c;
                    Self::add_into(grads, *a, g.len(), |dv| {
                        for (d, s) in dv.iter_mut().zip(g) {
                            *d += c * s;
                        }
                    });
                }
            }
            Op::AddConst { a } => {
                if self.ng(*a) {
                    Self::add_into(grads, *a, g.len(), |dv| {
                        for (d, s) in dv.iter_mut().zip(g) {
                            *d += s;
                        }
                    });
                }
            }
            Op::Tanh { a } => {
                if self.ng(*a) {
                    Self::add_into(grads, *a, g.len(), |dv| {
                        for ((d, s), &y) in dv.iter_mut().zip(g).zip(val) {
                            *d += s * (1.0 - y * y);
                        }
                    });
                }
            }
            Op::Relu { a } => {
                if self.ng(*a) {
                    let av = &self.nodes[a.0].val;
                    Self::add_into(grads, *a, g.len(), |dv| {
                        for ((d, s), &x) in dv.iter_mut().zip(g).zip(av) {
                            if x > 0.0 {
                                *d += s;
                            }
                        }
                    });
                }
            }
            Op::Softplus { a } => {
                if self.ng(*a) {
                    let av = &self.nodes[a.0].val;
                    Self::add_into(grads, *a, g.len(), |dv| {
                        for ((d, s), &x) in dv.iter_mut().zip(g).zip(av) {
                            *d += s * sigmoid(x);
                        }
                    });
                }
            }
            Op::Exp { a } => {
                if self.ng(*a) {
                    Self::add_into(grads, *a, g.len(), |dv| {
                        for ((d, s), &y) in dv.iter_mut().zip(g).zip(val) {
                            *d += s * y;
                        }
                    });
                }
            }
            Op::Ln { a } => {
                if self.ng(*a) {
                    let av = &self.nodes[a.0].val;
                    Self::add_into(grads, *a, g.len(), |dv| {
                        for ((d, s), &x) in dv.iter_mut().zip(g).zip(av) {
                            *d += s / x;
                        }
                    });
                }
            }
            Op::Sqrt { a } => {
                if self.ng(*a) {
                    Self::add_into(grads, *a, g.len(), |dv| {
                        for ((d, s), &y) in dv.iter_mut().zip(g).zip(val) {
                            *d += s * 0.5 / y;
                        }
                    });
                }
            }
            Op::Square { a } => {
                if self.ng(*a) {
                    let av = &self.nodes[a.0].val;
                    Self::add_into(grads, *a, g.len(), |dv| {
                        for ((d, s), &x) in dv.iter_mut().zip(g).zip(av) {
                            *d += s * 2.0 * x;
                        }
                    });
                }
            }
            Op::Abs { a } => {
                if self.ng(*a) {
                    let av = &self.nodes[a.0].val;
                    Self::add_into(grads, *a, g.len(), |dv| {
                        for ((d, s), &x) in dv.iter_mut().zip(g).zip(av) {
                            *d += s * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                        }
                    });
                }
            }
            Op::SumAll { a } => {
                if self.ng(*a) {
                    let alen = self.nodes[a.0].val.len();
                    Self::add_into(grads, *a, alen, |dv| {
                        for d in dv.iter_mut() {
                            *d += g[0];
                        }
                    });
                }
            }
            Op::MeanAll { a } => {
                if self.ng(*a) {
                    let alen = self.nodes[a.0].val.len();
                    let s = g[0] / alen as f64;
                    Self::add_into(grads, *a, alen, |dv| {
                        for d in dv.iter_mut() {
                            *d += s;
                        }
                    });
                }
            }
            Op::RowSum { a, m } => {
                if self.ng(*a) {
                    let m = *m;
                    let alen = self.nodes[a.0].val.len();
                    Self::add_into(grads, *a, alen, |dv| {
                        for (row, &s) in dv.chunks_mut(m).zip(g) {
                            for d in row {
                                *d += s;
                            }
                        }
                    });
                }
            }
            Op::SoftmaxChunks { a, chunk } => {
                if self.ng(*a) {
                    let chunk = *chunk;
                    Self::add_into(grads, *a, val.len(), |dv| {
                        for ((drow, grow), yrow) in
                            dv.chunks_mut(chunk).zip(g.chunks(chunk)).zip(val.chunks(chunk))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(&gg, &yy)| gg * yy).sum();
                            for ((d, &gg), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += yy * (gg - dot);
                            }
                        }
                    });
                }
            }
            Op::CumsumChunks { a, chunk } => {
                if self.ng(*a) {
                    let chunk = *chunk;
                    Self::add_into(grads, *a, val.len(), |dv| {
                        for (drow, grow) in dv.chunks_mut(chunk).zip(g.chunks(chunk)) {
                            let mut acc = 0.0;
                            for (d, &gg) in drow.iter_mut().zip(grow).rev() {
                                acc += gg;
                                *d += acc;
                            }
                        }
                    });
                }
            }
            Op::GatherCols { a, m, idx } => {
                if self.ng(*a) {
                    let m = *m;
                    let k = idx.len();
                    let alen = self.nodes[a.0].val.len();
                    let n = alen / m;
                    Self::add_into(grads, *a, alen, |dv| {
                        for i in 0..n {
                            for (jj, &j) in idx.iter().enumerate() {
                                dv[i * m + j] += g[i * k + jj];
                            }
                        }
                    });
                }
            }
            Op::ScatterCols { a, width, idx } => {
                if self.ng(*a) {
                    let width = *width;
                    let k = idx.len();
                    let alen = self.nodes[a.0].val.len();
                    let n = alen / k;
                    Self::add_into(grads, *a, alen, |dv| {
                        for i in 0..n {
                            for (jj, &j) in idx.iter().enumerate() {
                                dv[i * k + jj] += g[i * width + j];
                            }
                        }
                    });
                }
            }
            Op::Gather { a, idx } => {
                if self.ng(*a) {
                    let alen = self.nodes[a.0].val.len();
                    Self::add_into(grads, *a, alen, |dv| {
                        for (&j, &s) in idx.iter().zip(g) {
                            dv[j] += s;
                        }
                    });
                }
            }
            Op::Select { a, b, mask } => {
                if self.ng(*a) {
                    Self::add_into(grads, *a, g.len(), |dv| {
                        for ((d, s), &m) in dv.iter_mut().zip(g).zip(mask.iter()) {
                            *d += s * m;
                        }
                    });
                }
                if self.ng(*b) {
                    Self::add_into(grads, *b, g.len(), |dv| {
                        for ((d, s), &m) in dv.iter_mut().zip(g).zip(mask.iter()) {
                            *d += s * (1.0 - m);
                        }
                    });
                }
            }
            Op::Clamp { a, lo, hi } => {
                if self.ng(*a) {
                    let (lo, hi) = (*lo, *hi);
                    let av = &self.nodes[a.0].val;
                    Self::add_into(grads, *a, g.len(), |dv| {
                        for ((d, s), &x) in dv.iter_mut().zip(g).zip(av) {
                            if x > lo && x < hi {
                                *d += s;
                            }
                        }
                    });
                }
            }
            Op::LogSumExp { parts } => {
                for p in parts {
                    if self.ng(*p) {
                        let pv = &self.nodes[p.0].val;
                        Self::add_into(grads, *p, g.len(), |dv| {
                            for (i, (d, s)) in dv.iter_mut().zip(g).enumerate() {
                                *d += s * (pv[i] - val[i]).exp();
                            }
                        });
                    }
                }
            }
            Op::Custom { a, n, d, f } => {
                if self.ng(*a) {
                    let av = &self.nodes[a.0].val;
                    let (n, d) = (*n, *d);
                    let f = Arc::clone(f);
                    Self::add_into(grads, *a, n * d, |dv| {
                        f.vjp(av, n, d, g, dv);
                    });
                }
            }
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + step;
            let fp = f(&xp);
            xp[i] = orig - step;
            let fm = f(&xp);
            xp[i] = orig;
            g[i] = (fp - fm) / (2.0 * step);
        }
        g
    }

    fn check_against_fd(build: impl Fn(&mut Tape, Var) -> Var, x0: &[f64], tol: f64) {
        let mut tape = Tape::new();
        let x = tape.param(x0.to_vec());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(x, x0.len());
        let numeric = fd_grad(
            |xv| {
                let mut t = Tape::new();
                let v = t.param(xv.to_vec());
                let l = build(&mut t, v);
                t.val(l)[0]
            },
            x0,
            1e-6,
        );
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!(
                (a - n).abs() / denom < tol,
                "coord {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn pointwise_ops_match_finite_differences() {
        let x0 = [0.3, -0.7, 1.2, -0.1];
        check_against_fd(
            |t, x| {
                let a = t.tanh(x);
                let b = t.softplus(a);
                let c = t.square(b);
                let d = t.exp(c);
                let e = t.scale(d, 0.25);
                t.sum_all(e)
            },
            &x0,
            1e-6,
        );
        check_against_fd(
            |t, x| {
                let a = t.add_const(x, 2.0);
                let b = t.ln(a);
                let c = t.sqrt(a);
                let d = t.mul(b, c);
                t.mean_all(d)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn matmul_and_bias_match_finite_differences() {
        // 2x3 input, weight 2x3 (treated as 2 rows of length 3), bias add.
        let x0 = [0.1, 0.2, -0.3, 0.5, -0.4, 0.8];
        check_against_fd(
            |t, x| {
                let w = t.constant(vec![0.3, -0.2, 0.7, 0.5, 0.1, -0.6]);
                let h = t.matmul_nt(x, w, 2, 3, 2);
                let b = t.constant(vec![0.05, -0.02]);
                let hb = t.add_row_vec(h, b, 2);
                let s = t.square(hb);
                t.sum_all(s)
            },
            &x0,
            1e-6,
        );
        // Same but differentiating the weight.
        let w0 = [0.3, -0.2, 0.7, 0.5, 0.1, -0.6];
        check_against_fd(
            |t, w| {
                let x = t.constant(vec![0.1, 0.2, -0.3, 0.5, -0.4, 0.8]);
                let h = t.matmul_nt(x, w, 2, 3, 2);
                let s = t.square(h);
                t.sum_all(s)
            },
            &w0,
            1e-6,
        );
    }

    #[test]
    fn chunked_softmax_cumsum_match_finite_differences() {
        let x0 = [0.5, -1.0, 0.2, 1.4, 0.0, -0.3, 0.9, 0.1];
        check_against_fd(
            |t, x| {
                let s = t.softmax_chunks(x, 4);
                let c = t.cumsum_chunks(s, 4);
                let q = t.square(c);
                t.sum_all(q)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn gather_scatter_select_match_finite_differences() {
        let x0 = [0.5, -1.0, 0.2, 1.4, 0.0, -0.3];
        check_against_fd(
            |t, x| {
                let even = t.gather_cols(x, 3, Arc::new(vec![0, 2]));
                let back = t.scatter_cols(even, 3, Arc::new(vec![2, 0]));
                let picked = t.gather(back, Arc::new(vec![0, 0, 4, 5]));
                let sq = t.square(picked);
                t.sum_all(sq)
            },
            &x0,
            1e-6,
        );
        check_against_fd(
            |t, x| {
                let y = t.square(x);
                let m = Arc::new(vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
                let s = t.select(m, y, x);
                t.sum_all(s)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn log_sum_exp_matches_finite_differences() {
        let x0 = [0.5, -1.0, 0.2, 1.4];
        check_against_fd(
            |t, x| {
                let a = t.scale(x, 1.5);
                let b = t.add_const(x, -0.3);
                let l = t.log_sum_exp(&[a, b, x]);
                t.sum_all(l)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn constant_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(vec![1.0, 2.0]);
        let p = tape.param(vec![3.0, 4.0]);
        let m = tape.mul(c, p);
        let loss = tape.sum_all(m);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get_ref(c).is_none());
        assert_eq!(grads.get(p, 2), vec![1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_non_finite() {
        let mut tape = Tape::new();
        let p = tape.param(vec![1.0, 2.0]);
        assert!(tape.backward(p).is_err());
        let mut tape = Tape::new();
        let p = tape.param(vec![-1.0]);
        let l = tape.ln(p);
        assert!(matches!(tape.backward(l), Err(Error::Numeric(_))));
    }
}
