//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough context to propagate gradients. One graph is built per sample
//! forward pass and dropped afterwards. Node values are immutable once
//! recorded, so [`Graph::backward`] can be called any number of times.

use std::cell::{Ref, RefCell};

use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ShrinkRenorm {
        p: Var,
        lambda: f64,
        eps: f64,
        sums: Vec<f64>,
        fallback: Vec<bool>,
    },
    EntropyRows(Var),
    RowNorm(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    GlobalAvgPool(Var),
    SumAll(Var),
    MeanAll(Var),
}

/// Geometry of a square-kernel 2-D convolution, as seen from the dense side:
/// `lo` is the low-resolution grid, `hi` the high-resolution one.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    k: usize,
    stride: usize,
    pad: usize,
    hi: (usize, usize),
    lo: (usize, usize),
}

#[derive(Default)]
struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

#[derive(Default)]
pub struct Graph {
    tape: RefCell<Tape>,
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut tape = self.tape.borrow_mut();
        tape.values.push(value);
        tape.ops.push(op);
        Var(tape.values.len() - 1)
    }

    /// Records a leaf (an input or a parameter).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.tape.borrow(), |t| &t.values[v.0])
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = {
            let t = self.value(a);
            let data = t.data().iter().map(|&x| f(x)).collect();
            Tensor::from_vec(t.shape(), data).expect("same shape")
        };
        self.push(out, op)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_vec(ta.shape(), data).expect("same shape")
        };
        self.push(out, op)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = crate::tensor::matmul(&self.value(a), &self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).transpose2();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[m,n] + b[n]`, broadcasting the bias over rows.
    pub fn add_bias(&self, a: Var, b: Var) -> Var {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            let n = ta.cols();
            assert_eq!(tb.len(), n, "bias length mismatch");
            let mut out = ta.clone();
            for row in out.data_mut().chunks_mut(n.max(1)) {
                for (o, bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
            out
        };
        self.push(out, Op::AddBias(a, b))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let out = {
            let t = self.value(a);
            let mut out = t.clone();
            let n = t.cols();
            if n > 0 {
                for row in out.data_mut().chunks_mut(n) {
                    softmax_in_place(row);
                }
            }
            out
        };
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` of length `cols`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (out, xhat, rstd) = {
            let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
            let n = tx.cols();
            let mut out = tx.clone();
            let mut xhat = vec![0.0; tx.len()];
            let mut rstd = Vec::with_capacity(tx.rows());
            for (r, row) in tx.data().chunks(n.max(1)).enumerate().take(tx.rows()) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd.push(rs);
                for j in 0..n {
                    let xh = (row[j] - mean) * rs;
                    xhat[r * n + j] = xh;
                    out.data_mut()[r * n + j] = tg.data()[j] * xh + tb.data()[j];
                }
            }
            (out, xhat, rstd)
        };
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Element-wise hard shrinkage of addressing weights followed by L1
    /// renormalization of every row. Rows whose entries all fall at or below
    /// `lambda` keep their input weights unchanged; the returned flags mark
    /// those rows.
    pub fn shrink_renorm(&self, p: Var, lambda: f64, eps: f64) -> (Var, Vec<bool>) {
        let (out, sums, fallback) = {
            let t = self.value(p);
            let n = t.cols();
            let mut out = t.clone();
            let mut sums = Vec::with_capacity(t.rows());
            let mut fallback = Vec::with_capacity(t.rows());
            if n > 0 {
                for row in out.data_mut().chunks_mut(n) {
                    let shrunk: Vec<f64> = row.iter().map(|&a| hard_shrink(a, lambda, eps)).collect();
                    let s: f64 = shrunk.iter().sum();
                    if s > 0.0 {
                        for (o, v) in row.iter_mut().zip(&shrunk) {
                            *o = v / s;
                        }
                        fallback.push(false);
                    } else {
                        fallback.push(true);
                    }
                    sums.push(s);
                }
            }
            (out, sums, fallback)
        };
        let flags = fallback.clone();
        let v = self.push(
            out,
            Op::ShrinkRenorm {
                p,
                lambda,
                eps,
                sums,
                fallback,
            },
        );
        (v, flags)
    }

    /// Mean over rows of the row entropy `-Σ p log p`, with `0 log 0 = 0`.
    pub fn entropy_rows(&self, p: Var) -> Var {
        let out = {
            let t = self.value(p);
            let rows = t.rows().max(1) as f64;
            let total: f64 = t.data().iter().map(|&a| neg_plogp(a)).sum();
            Tensor::scalar(total / rows)
        };
        self.push(out, Op::EntropyRows(p))
    }

    /// Euclidean norm of every row, `sqrt(Σ x² + eps)`, as an `[m, 1]` tensor.
    pub fn row_norm(&self, a: Var, eps: f64) -> Var {
        let out = {
            let t = self.value(a);
            let data: Vec<f64> = (0..t.rows())
                .map(|r| (t.row(r).iter().map(|v| v * v).sum::<f64>() + eps).sqrt())
                .collect();
            Tensor::from_vec(&[t.rows(), 1], data).expect("row count")
        };
        self.push(out, Op::RowNorm(a))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let out = {
            let t = self.value(a);
            let (m, n) = (t.rows(), t.cols());
            assert!(start <= end && end <= n);
            let mut data = Vec::with_capacity(m * (end - start));
            for r in 0..m {
                data.extend_from_slice(&t.row(r)[start..end]);
            }
            Tensor::from_vec(&[m, end - start], data).expect("slice")
        };
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
            let m = vals[0].rows();
            let n: usize = vals.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(m * n);
            for r in 0..m {
                for t in &vals {
                    assert_eq!(t.rows(), m, "concat_cols row mismatch");
                    data.extend_from_slice(t.row(r));
                }
            }
            Tensor::from_vec(&[m, n], data).expect("concat")
        };
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let out = {
            let t = self.value(a);
            let n = t.cols();
            assert!(start <= end && end <= t.rows());
            Tensor::from_vec(&[end - start, n], t.data()[start * n..end * n].to_vec())
                .expect("slice")
        };
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
            let n = vals[0].cols();
            let mut data = Vec::new();
            let mut m = 0;
            for t in &vals {
                assert_eq!(t.cols(), n, "concat_rows column mismatch");
                data.extend_from_slice(t.data());
                m += t.rows();
            }
            Tensor::from_vec(&[m, n], data).expect("concat")
        };
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshaped(shape)
            .expect("reshape preserves element count");
        self.push(out, Op::Reshape(a))
    }

    /// Strided convolution of an `[C, H, W]` map with `[O, C, k, k]` weights.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (out, geom) = {
            let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
            let (c, h, wd) = dims3(&tx);
            let (o, ci, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
            assert_eq!(c, ci, "conv2d channel mismatch");
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (wd + 2 * pad - k) / stride + 1;
            let geom = ConvGeom {
                k,
                stride,
                pad,
                hi: (h, wd),
                lo: (ho, wo),
            };
            let cols = im2col(tx.data(), c, geom);
            let mut out = vec![0.0; o * ho * wo];
            gemm(
                o,
                c * k * k,
                ho * wo,
                tw.data(),
                ((c * k * k) as isize, 1),
                &cols,
                ((ho * wo) as isize, 1),
                &mut out,
                false,
            );
            add_channel_bias(&mut out, tb.data(), ho * wo);
            (Tensor::from_vec(&[o, ho, wo], out).expect("conv out"), geom)
        };
        self.push(out, Op::Conv2d { x, w, b, geom })
    }

    /// Transposed convolution of an `[Ci, H, W]` map with `[Ci, Co, k, k]`
    /// weights; the adjoint of [`Graph::conv2d`] with the same geometry.
    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (out, geom) = {
            let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
            let (ci, h, wd) = dims3(&tx);
            let (wi, co, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
            assert_eq!(ci, wi, "conv_transpose2d channel mismatch");
            let ho = (h - 1) * stride + k - 2 * pad;
            let wo = (wd - 1) * stride + k - 2 * pad;
            let geom = ConvGeom {
                k,
                stride,
                pad,
                hi: (ho, wo),
                lo: (h, wd),
            };
            // cols[co*k*k, h*w] = Wᵀ · x
            let ckk = co * k * k;
            let mut cols = vec![0.0; ckk * h * wd];
            gemm(
                ckk,
                ci,
                h * wd,
                tw.data(),
                (1, ckk as isize),
                tx.data(),
                ((h * wd) as isize, 1),
                &mut cols,
                false,
            );
            let mut out = col2im(&cols, co, geom);
            add_channel_bias(&mut out, tb.data(), ho * wo);
            (Tensor::from_vec(&[co, ho, wo], out).expect("convT out"), geom)
        };
        self.push(out, Op::ConvTranspose2d { x, w, b, geom })
    }

    /// Spatial mean of an `[C, H, W]` map, returned as `[1, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let out = {
            let t = self.value(x);
            let (c, h, w) = dims3(&t);
            let hw = (h * w) as f64;
            let data = t
                .data()
                .chunks(h * w)
                .take(c)
                .map(|ch| ch.iter().sum::<f64>() / hw)
                .collect();
            Tensor::from_vec(&[1, c], data).expect("pool")
        };
        self.push(out, Op::GlobalAvgPool(x))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let s = {
            let t = self.value(a);
            if t.is_empty() {
                0.0
            } else {
                t.data().iter().sum::<f64>() / t.len() as f64
            }
        };
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, out: Var) -> Gradients {
        let tape = self.tape.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(tape.values[out.0].shape(), 1.0));
        let vals = &tape.values;

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(tape.ops[i], Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let y = &vals[i];
            match &tape.ops[i] {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&vals[a.0], &vals[b.0]);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n as isize, 1), tb.data(), (1, n as isize), &mut da, false);
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), (1, k as isize), g.data(), (n as isize, 1), &mut db, false);
                    accumulate(&mut grads, *a, ta.shape(), da);
                    accumulate(&mut grads, *b, tb.shape(), db);
                }
                Op::Transpose(a) => {
                    accumulate_t(&mut grads, *a, g.transpose2());
                }
                Op::Add(a, b) => {
                    accumulate_t(&mut grads, *a, g.clone());
                    accumulate_t(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.scale_assign(-1.0);
                    accumulate_t(&mut grads, *a, g);
                    accumulate_t(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&vals[a.0], &vals[b.0]);
                    let da = zip_with(&g, tb, |gi, bi| gi * bi);
                    let db = zip_with(&g, ta, |gi, ai| gi * ai);
                    accumulate_t(&mut grads, *a, da);
                    accumulate_t(&mut grads, *b, db);
                }
                Op::AddBias(a, b) => {
                    let tb = &vals[b.0];
                    let n = tb.len();
                    let mut db = vec![0.0; n];
                    if n > 0 {
                        for row in g.data().chunks(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                    accumulate(&mut grads, *b, tb.shape(), db);
                    accumulate_t(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let mut d = g;
                    d.scale_assign(*s);
                    accumulate_t(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = zip_with(&g, &vals[a.0], |gi, x| if x > 0.0 { gi } else { 0.0 });
                    accumulate_t(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = zip_with(&g, y, |gi, s| gi * s * (1.0 - s));
                    accumulate_t(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = zip_with(&g, y, |gi, t| gi * (1.0 - t * t));
                    accumulate_t(&mut grads, *a, d);
                }
                Op::Abs(a) => {
                    let d = zip_with(&g, &vals[a.0], |gi, x| {
                        if x > 0.0 {
                            gi
                        } else if x < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    });
                    accumulate_t(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let n = y.cols();
                    let mut d = vec![0.0; y.len()];
                    if n > 0 {
                        for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                dr[j] = yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, y.shape(), d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let tg = &vals[gamma.0];
                    let n = y.cols();
                    let mut dx = vec![0.0; y.len()];
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            dgamma[j] += gr[j] * xh[j];
                            dbeta[j] += gr[j];
                            let dxh = gr[j] * tg.data()[j];
                            mean_d += dxh;
                            mean_dx += dxh * xh[j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let dxh = gr[j] * tg.data()[j];
                            dx[r * n + j] = rs * (dxh - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *x, y.shape(), dx);
                    accumulate(&mut grads, *gamma, tg.shape(), dgamma);
                    accumulate(&mut grads, *beta, vals[beta.0].shape(), dbeta);
                }
                Op::ShrinkRenorm {
                    p,
                    lambda,
                    eps,
                    sums,
                    fallback,
                } => {
                    let tp = &vals[p.0];
                    let n = tp.cols();
                    let mut d = vec![0.0; tp.len()];
                    for (r, (&s, &fb)) in sums.iter().zip(fallback).enumerate() {
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let dr = &mut d[r * n..(r + 1) * n];
                        if fb {
                            dr.copy_from_slice(gr);
                            continue;
                        }
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        let pr = &tp.data()[r * n..(r + 1) * n];
                        for j in 0..n {
                            let ds = (gr[j] - dot) / s;
                            dr[j] = ds * hard_shrink_grad(pr[j], *lambda, *eps);
                        }
                    }
                    accumulate(&mut grads, *p, tp.shape(), d);
                }
                Op::EntropyRows(p) => {
                    let tp = &vals[p.0];
                    let scale = g.item() / tp.rows().max(1) as f64;
                    let d = tp
                        .data()
                        .iter()
                        .map(|&a| if a > 0.0 { -scale * (a.ln() + 1.0) } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *p, tp.shape(), d);
                }
                Op::RowNorm(a) => {
                    let ta = &vals[a.0];
                    let n = ta.cols();
                    let mut d = vec![0.0; ta.len()];
                    for r in 0..ta.rows() {
                        // subgradient 0 at the origin
                        let coef = if y.data()[r] > 0.0 { g.data()[r] / y.data()[r] } else { 0.0 };
                        for j in 0..n {
                            d[r * n + j] = coef * ta.at(r, j);
                        }
                    }
                    accumulate(&mut grads, *a, ta.shape(), d);
                }
                Op::SliceCols(a, start) => {
                    let ta = &vals[a.0];
                    let (m, n, w) = (ta.rows(), ta.cols(), y.cols());
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        d[r * n + start..r * n + start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ta.shape(), d);
                }
                Op::ConcatCols(parts) => {
                    let m = y.rows();
                    let mut offset = 0;
                    for p in parts {
                        let tp = &vals[p.0];
                        let w = tp.cols();
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, *p, tp.shape(), d);
                    }
                }
                Op::SliceRows(a, start) => {
                    let ta = &vals[a.0];
                    let n = ta.cols();
                    let mut d = vec![0.0; ta.len()];
                    d[start * n..start * n + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ta.shape(), d);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let tp = &vals[p.0];
                        let len = tp.len();
                        accumulate(&mut grads, *p, tp.shape(), g.data()[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::Reshape(a) => {
                    let shape = vals[a.0].shape().to_vec();
                    accumulate(&mut grads, *a, &shape, g.into_data());
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (tx, tw) = (&vals[x.0], &vals[w.0]);
                    let (c, o, k) = (tx.shape()[0], tw.shape()[0], geom.k);
                    let ckk = c * k * k;
                    let howo = geom.lo.0 * geom.lo.1;
                    let cols = im2col(tx.data(), c, *geom);
                    // dW = G · colsᵀ
                    let mut dw = vec![0.0; o * ckk];
                    gemm(o, howo, ckk, g.data(), (howo as isize, 1), &cols, (1, howo as isize), &mut dw, false);
                    // dcols = Wᵀ · G
                    let mut dcols = vec![0.0; ckk * howo];
                    gemm(ckk, o, howo, tw.data(), (1, ckk as isize), g.data(), (howo as isize, 1), &mut dcols, false);
                    let dx = col2im(&dcols, c, *geom);
                    let db = channel_sums(g.data(), o, howo);
                    accumulate(&mut grads, *x, tx.shape(), dx);
                    accumulate(&mut grads, *w, tw.shape(), dw);
                    accumulate(&mut grads, *b, vals[b.0].shape(), db);
                }
                Op::ConvTranspose2d { x, w, b, geom } => {
                    let (tx, tw) = (&vals[x.0], &vals[w.0]);
                    let (ci, co, k) = (tx.shape()[0], tw.shape()[1], geom.k);
                    let ckk = co * k * k;
                    let hw = geom.lo.0 * geom.lo.1;
                    let gcols = im2col(g.data(), co, *geom);
                    // dx = W · gcols
                    let mut dx = vec![0.0; ci * hw];
                    gemm(ci, ckk, hw, tw.data(), (ckk as isize, 1), &gcols, (hw as isize, 1), &mut dx, false);
                    // dW = x · gcolsᵀ
                    let mut dw = vec![0.0; ci * ckk];
                    gemm(ci, hw, ckk, tx.data(), (hw as isize, 1), &gcols, (1, hw as isize), &mut dw, false);
                    let db = channel_sums(g.data(), co, geom.hi.0 * geom.hi.1);
                    accumulate(&mut grads, *x, tx.shape(), dx);
                    accumulate(&mut grads, *w, tw.shape(), dw);
                    accumulate(&mut grads, *b, vals[b.0].shape(), db);
                }
                Op::GlobalAvgPool(x) => {
                    let tx = &vals[x.0];
                    let (c, h, w) = dims3(tx);
                    let hw = h * w;
                    let mut d = vec![0.0; c * hw];
                    for ch in 0..c {
                        let v = g.data()[ch] / hw as f64;
                        d[ch * hw..(ch + 1) * hw].iter_mut().for_each(|e| *e = v);
                    }
                    accumulate(&mut grads, *x, tx.shape(), d);
                }
                Op::SumAll(a) => {
                    let ta = &vals[a.0];
                    accumulate(&mut grads, *a, ta.shape(), vec![g.item(); ta.len()]);
                }
                Op::MeanAll(a) => {
                    let ta = &vals[a.0];
                    let v = g.item() / ta.len().max(1) as f64;
                    accumulate(&mut grads, *a, ta.shape(), vec![v; ta.len()]);
                }
            }
        }
        // Only leaves keep their gradient; intermediates were consumed.
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    let t = Tensor::from_vec(shape, data).expect("gradient shape");
    accumulate_t(grads, v, t);
}

fn accumulate_t(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected a [C, H, W] map, got {s:?}");
    (s[0], s[1], s[2])
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (ch, b) in out.chunks_mut(plane).zip(bias) {
        ch.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    g.chunks(plane).take(channels).map(|ch| ch.iter().sum()).collect()
}

/// Unfolds the dense (`hi`) grid into `[C·k·k, lo_h·lo_w]` patches.
fn im2col(x: &[f64], c: usize, geom: ConvGeom) -> Vec<f64> {
    let ConvGeom {
        k,
        stride,
        pad,
        hi: (h, w),
        lo: (ho, wo),
    } = geom;
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = x[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patches back onto the dense grid.
fn col2im(cols: &[f64], c: usize, geom: ConvGeom) -> Vec<f64> {
    let ConvGeom {
        k,
        stride,
        pad,
        hi: (h, w),
        lo: (ho, wo),
    } = geom;
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ch * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `ReLU(a − λ)·a / (|a − λ| + ε)`: zero at or below the threshold, close to
/// the identity above it.
pub fn hard_shrink(a: f64, lambda: f64, eps: f64) -> f64 {
    let u = a - lambda;
    if u <= 0.0 {
        0.0
    } else {
        u * a / (u.abs() + eps)
    }
}

fn hard_shrink_grad(a: f64, lambda: f64, eps: f64) -> f64 {
    let u = a - lambda;
    if u <= 0.0 {
        0.0
    } else {
        (a * eps + u * u + u * eps) / ((u + eps) * (u + eps))
    }
}

fn neg_plogp(a: f64) -> f64 {
    if a > 0.0 {
        -a * a.ln()
    } else {
        0.0
    }
}
