//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Every op records its inputs by index; `backward` walks the tape in reverse
//! and accumulates vector-Jacobian products. Parameters enter through
//! [`Tape::param`], which remembers their offset in the flat parameter
//! buffer so gradients can be scattered back with [`Gradients::param_grads`].

use std::rc::Rc;

use super::mat::{gemm, Mat, View};
use crate::grid::{self, GridDims, AFFINE_PARAMS};
use crate::image::Image;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Row grouping for block-diagonal attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnGroups {
    /// Query rows per group.
    pub q_block: usize,
    /// Key/value rows per group.
    pub kv_block: usize,
    /// When true every query group attends to the single key/value block.
    pub kv_shared: bool,
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    AddConst(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: AttnGroups,
        probs: Vec<f64>,
    },
    RowSlice(Var, usize),
    ConcatRows(Vec<Var>),
    ColSlice(Var, usize),
    Reshape(Var),
    SliceAffine {
        grid: Var,
        dims: GridDims,
        image: Rc<Image>,
    },
    SliceConfidence {
        log_conf: Var,
        dims: GridDims,
        image: Rc<Image>,
    },
    ConfidenceLoss {
        corrected: Var,
        conf: Var,
        target: Rc<Image>,
        alpha: f64,
    },
    Tv {
        x: Var,
        dims: GridDims,
        channels: usize,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar w.r.t. every tape node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A parameter tensor copied from `values[offset..offset + rows·cols]`.
    pub fn param(&mut self, values: &[f64], offset: usize, rows: usize, cols: usize) -> Var {
        let data = values[offset..offset + rows * cols].to_vec();
        self.push(Mat::from_vec(rows, cols, data), Op::Param(offset))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols, bm.rows, "matmul shape mismatch");
        let value = super::mat::matmul(am, bm);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        let bm = self.value(b);
        assert_eq!((value.rows, value.cols), (bm.rows, bm.cols), "add shape mismatch");
        value.add_assign(bm);
        self.push(value, Op::Add(a, b))
    }

    /// `x + bias` with a `1 × cols` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let mut value = self.value(x).clone();
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, value.cols), "bias shape mismatch");
        for r in 0..value.rows {
            for (v, bv) in value.row_mut(r).iter_mut().zip(&b.data) {
                *v += bv;
            }
        }
        self.push(value, Op::AddRow(x, bias))
    }

    /// `x + tile(t)` where `t` repeats down the rows of `x`.
    pub fn add_tiled(&mut self, x: Var, t: Var) -> Var {
        let mut value = self.value(x).clone();
        let tm = self.value(t);
        assert!(tm.cols == value.cols && value.rows.is_multiple_of(tm.rows), "tile shape mismatch");
        for (chunk, _) in value.data.chunks_mut(tm.len()).zip(0..) {
            for (v, tv) in chunk.iter_mut().zip(&tm.data) {
                *v += tv;
            }
        }
        self.push(value, Op::AddTiled(x, t))
    }

    /// `x + c` for a constant `c`.
    pub fn add_const(&mut self, x: Var, c: &Mat) -> Var {
        let mut value = self.value(x).clone();
        assert_eq!((value.rows, value.cols), (c.rows, c.cols), "const shape mismatch");
        value.add_assign(c);
        self.push(value, Op::AddConst(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let value = Mat::from_vec(xm.rows, xm.cols, xm.data.iter().map(|&v| gelu(v)).collect());
        self.push(value, Op::Gelu(x))
    }

    /// Row-wise layer normalization with learned scale and offset (`1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (rows, cols) = (xm.rows, xm.cols);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g.data[c] + b.data[c];
            }
        }
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

    /// Multi-head scaled dot-product attention (no projections), block
    /// diagonal over `groups`. Head `h` uses columns `h·dh..(h+1)·dh`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: AttnGroups) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let c = qm.cols;
        assert!(heads > 0 && c % heads == 0, "channels {c} not divisible by {heads} heads");
        assert_eq!(km.cols, c);
        assert_eq!(vm.cols, c);
        assert_eq!(km.rows, vm.rows);
        let AttnGroups {
            q_block,
            kv_block,
            kv_shared,
        } = groups;
        assert!(q_block > 0 && qm.rows % q_block == 0);
        let n_groups = qm.rows / q_block;
        if kv_shared {
            assert_eq!(km.rows, kv_block);
        } else {
            assert_eq!(km.rows, n_groups * kv_block);
        }
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(qm.rows, c);
        let mut probs = vec![0.0; n_groups * heads * q_block * kv_block];
        for g in 0..n_groups {
            let kg = if kv_shared { 0 } else { g };
            for h in 0..heads {
                let base = (g * heads + h) * q_block * kv_block;
                let p = &mut probs[base..base + q_block * kv_block];
                gemm(
                    q_block,
                    dh,
                    kv_block,
                    View::block(qm, g * q_block, h * dh),
                    View::block(km, kg * kv_block, h * dh).t(),
                    0.0,
                    p,
                    0,
                    kv_block,
                );
                for row in p.chunks_mut(kv_block) {
                    let mut mx = f64::NEG_INFINITY;
                    for s in row.iter_mut() {
                        *s *= scale;
                        mx = mx.max(*s);
                    }
                    let mut sum = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - mx).exp();
                        sum += *s;
                    }
                    let inv = 1.0 / sum;
                    row.iter_mut().for_each(|s| *s *= inv);
                }
                let pv = View {
                    data: &probs[base..base + q_block * kv_block],
                    offset: 0,
                    row_stride: kv_block as isize,
                    col_stride: 1,
                };
                gemm(
                    q_block,
                    kv_block,
                    dh,
                    pv,
                    View::block(vm, kg * kv_block, h * dh),
                    0.0,
                    &mut out.data,
                    g * q_block * c + h * dh,
                    c,
                );
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
        )
    }

    pub fn row_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xm = self.value(x);
        assert!(start + len <= xm.rows);
        let value = Mat::from_vec(len, xm.cols, xm.data[start * xm.cols..(start + len) * xm.cols].to_vec());
        self.push(value, Op::RowSlice(x, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols);
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xm = self.value(x);
        assert!(start + len <= xm.cols);
        let mut data = Vec::with_capacity(xm.rows * len);
        for r in 0..xm.rows {
            data.extend_from_slice(&xm.row(r)[start..start + len]);
        }
        self.push(Mat::from_vec(xm.rows, len, data), Op::ColSlice(x, start))
    }

    /// Reinterpret the row-major buffer with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.len(), rows * cols);
        let value = Mat::from_vec(rows, cols, xm.data.clone());
        self.push(value, Op::Reshape(x))
    }

    /// Slice an affine grid stored as a `(vertices × 12)` matrix against a
    /// fixed image; returns `(H·W) × 3`.
    pub fn slice_affine(&mut self, grid: Var, dims: GridDims, image: Rc<Image>) -> Var {
        let gm = self.value(grid);
        assert_eq!((gm.rows, gm.cols), (dims.vertex_count(), AFFINE_PARAMS));
        let data = grid::slice_affine_raw(dims, &gm.data, &image);
        let value = Mat::from_vec(image.pixel_count(), 3, data);
        self.push(value, Op::SliceAffine { grid, dims, image })
    }

    /// Slice a `(vertices × 1)` log-confidence grid and exponentiate;
    /// returns `(H·W) × 1`.
    pub fn slice_confidence(&mut self, log_conf: Var, dims: GridDims, image: Rc<Image>) -> Var {
        let lm = self.value(log_conf);
        assert_eq!((lm.rows, lm.cols), (dims.vertex_count(), 1));
        let data = grid::slice_confidence_raw(dims, &lm.data, &image);
        let value = Mat::from_vec(image.pixel_count(), 1, data);
        self.push(value, Op::SliceConfidence { log_conf, dims, image })
    }

    /// Mean over pixels of `conf · Σ_c |target − corrected| − alpha · ln conf`.
    pub fn confidence_loss(&mut self, corrected: Var, conf: Var, target: Rc<Image>, alpha: f64) -> Var {
        let (cm, fm) = (self.value(corrected), self.value(conf));
        assert_eq!(cm.len(), target.data().len());
        assert_eq!(fm.len(), target.pixel_count());
        let n = target.pixel_count() as f64;
        let mut acc = 0.0;
        for (i, &c) in fm.data.iter().enumerate() {
            let r: f64 = (0..3)
                .map(|ch| (target.data()[i * 3 + ch] - cm.data[i * 3 + ch]).abs())
                .sum();
            acc += c * r - alpha * c.ln();
        }
        self.push(
            Mat::scalar(acc / n),
            Op::ConfidenceLoss {
                corrected,
                conf,
                target,
                alpha,
            },
        )
    }

    /// Total-variation penalty on a `(vertices × channels)` grid matrix.
    pub fn tv(&mut self, x: Var, dims: GridDims) -> Var {
        let xm = self.value(x);
        let channels = xm.cols;
        let value = grid::tv_loss_raw(dims, channels, &xm.data);
        self.push(Mat::scalar(value), Op::Tv { x, dims, channels })
    }

    /// `Σ wᵢ·xᵢ` over `1 × 1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let value = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        self.push(Mat::scalar(value), Op::WeightedSum(terms.to_vec()))
    }

    /// Gradients of the scalar `root` w.r.t. every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let (m, k, n) = (am.rows, am.cols, bm.cols);
                let ga = acc(grads, *a, m, k);
                gemm(m, n, k, View::block(g, 0, 0), View::block(bm, 0, 0).t(), 1.0, &mut ga.data, 0, k);
                let gb = acc(grads, *b, k, n);
                gemm(k, m, n, View::block(am, 0, 0).t(), View::block(g, 0, 0), 1.0, &mut gb.data, 0, n);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.rows, g.cols).add_assign(g);
                acc(grads, *b, g.rows, g.cols).add_assign(g);
            }
            Op::AddRow(x, bias) => {
                acc(grads, *x, g.rows, g.cols).add_assign(g);
                let gb = acc(grads, *bias, 1, g.cols);
                for r in 0..g.rows {
                    for (d, s) in gb.data.iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            }
            Op::AddTiled(x, t) => {
                acc(grads, *x, g.rows, g.cols).add_assign(g);
                let tm = self.value(*t);
                let gt = acc(grads, *t, tm.rows, tm.cols);
                for chunk in g.data.chunks(tm.len()) {
                    for (d, s) in gt.data.iter_mut().zip(chunk) {
                        *d += s;
                    }
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                let xm = self.value(*x);
                let gx = acc(grads, *x, xm.rows, xm.cols);
                for (d, s) in gx.data.iter_mut().zip(&g.data) {
                    *d += s;
                }
            }
            Op::Gelu(x) => {
                let xm = self.value(*x);
                let gx = acc(grads, *x, xm.rows, xm.cols);
                for ((d, s), &xv) in gx.data.iter_mut().zip(&g.data).zip(&xm.data) {
                    *d += s * gelu_grad(xv);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = (g.rows, g.cols);
                let gm = self.value(*gamma).data.clone();
                {
                    let gg = acc(grads, *gamma, 1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data[c] += g.data[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                {
                    let gb = acc(grads, *beta, 1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb.data[c] += g.data[r * cols + c];
                        }
                    }
                }
                let gx = acc(grads, *x, rows, cols);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        let d = g.data[r * cols + c] * gm[c];
                        dxhat[c] = d;
                        mean_d += d;
                        mean_dx += d * xhat[r * cols + c];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for c in 0..cols {
                        gx.data[r * cols + c] +=
                            rstd[r] * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dx);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, *groups, probs, g, grads),
            Op::RowSlice(x, start) => {
                let xm = self.value(*x);
                let gx = acc(grads, *x, xm.rows, xm.cols);
                let off = start * xm.cols;
                for (d, s) in gx.data[off..off + g.len()].iter_mut().zip(&g.data) {
                    *d += s;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let pm = self.value(*p);
                    let n = pm.len();
                    let gp = acc(grads, *p, pm.rows, pm.cols);
                    for (d, s) in gp.data.iter_mut().zip(&g.data[off..off + n]) {
                        *d += s;
                    }
                    off += n;
                }
            }
            Op::ColSlice(x, start) => {
                let xm = self.value(*x);
                let gx = acc(grads, *x, xm.rows, xm.cols);
                for r in 0..g.rows {
                    let dst = &mut gx.data[r * xm.cols + start..r * xm.cols + start + g.cols];
                    for (d, s) in dst.iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            }
            Op::SliceAffine { grid, dims, image } => {
                let gg = acc(grads, *grid, dims.vertex_count(), AFFINE_PARAMS);
                grid::slice_affine_backward(*dims, image, &g.data, &mut gg.data);
            }
            Op::SliceConfidence {
                log_conf,
                dims,
                image,
            } => {
                let gl = acc(grads, *log_conf, dims.vertex_count(), 1);
                grid::slice_confidence_backward(*dims, image, &node.value.data, &g.data, &mut gl.data);
            }
            Op::ConfidenceLoss {
                corrected,
                conf,
                target,
                alpha,
            } => {
                let up = g.data[0];
                let n = target.pixel_count();
                let scale = up / n as f64;
                let cm = self.value(*corrected);
                let fm = self.value(*conf);
                let mut residual = vec![0.0; n];
                {
                    let gc = acc(grads, *corrected, cm.rows, cm.cols);
                    for i in 0..n {
                        let c = fm.data[i];
                        for ch in 0..3 {
                            let d = cm.data[i * 3 + ch] - target.data()[i * 3 + ch];
                            residual[i] += d.abs();
                            gc.data[i * 3 + ch] += scale * c * sign(d);
                        }
                    }
                }
                let gf = acc(grads, *conf, fm.rows, fm.cols);
                for i in 0..n {
                    gf.data[i] += scale * (residual[i] - alpha / fm.data[i]);
                }
            }
            Op::Tv { x, dims, channels } => {
                let xm = self.value(*x);
                let gx = acc(grads, *x, xm.rows, xm.cols);
                grid::tv_grad_raw(*dims, *channels, &xm.data, g.data[0], &mut gx.data);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(grads, v, 1, 1).data[0] += w * g.data[0];
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: AttnGroups,
        probs: &[f64],
        g: &Mat,
        grads: &mut [Option<Mat>],
    ) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let c = qm.cols;
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let AttnGroups {
            q_block,
            kv_block,
            kv_shared,
        } = groups;
        let n_groups = qm.rows / q_block;
        let mut gq = Mat::zeros(qm.rows, c);
        let mut gk = Mat::zeros(km.rows, c);
        let mut gv = Mat::zeros(vm.rows, c);
        let mut dp = vec![0.0; q_block * kv_block];
        for gi in 0..n_groups {
            let kg = if kv_shared { 0 } else { gi };
            for h in 0..heads {
                let base = (gi * heads + h) * q_block * kv_block;
                let p = &probs[base..base + q_block * kv_block];
                let pv = View {
                    data: p,
                    offset: 0,
                    row_stride: kv_block as isize,
                    col_stride: 1,
                };
                let go = View::block(g, gi * q_block, h * dh);
                // dV += Pᵀ dO
                gemm(kv_block, q_block, dh, pv.t(), go, 1.0, &mut gv.data, kg * kv_block * c + h * dh, c);
                // dP = dO Vᵀ
                gemm(q_block, dh, kv_block, go, View::block(vm, kg * kv_block, h * dh).t(), 0.0, &mut dp, 0, kv_block);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale.
                for r in 0..q_block {
                    let prow = &p[r * kv_block..(r + 1) * kv_block];
                    let drow = &mut dp[r * kv_block..(r + 1) * kv_block];
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (d, &pp) in drow.iter_mut().zip(prow) {
                        *d = pp * (*d - dot) * scale;
                    }
                }
                let ds = View {
                    data: &dp,
                    offset: 0,
                    row_stride: kv_block as isize,
                    col_stride: 1,
                };
                // dQ = dS K ; dK += dSᵀ Q
                gemm(q_block, kv_block, dh, ds, View::block(km, kg * kv_block, h * dh), 1.0, &mut gq.data, gi * q_block * c + h * dh, c);
                gemm(kv_block, q_block, dh, ds.t(), View::block(qm, gi * q_block, h * dh), 1.0, &mut gk.data, kg * kv_block * c + h * dh, c);
            }
        }
        for (var, m) in [(q, gq), (k, gk), (v, gv)] {
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        }
    }

    /// Flat gradient over a parameter buffer of `len` values.
    pub fn param_grads(&self, grads: &Gradients, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(offset), Some(g)) = (&node.op, g) {
                for (d, s) in out[*offset..*offset + g.len()].iter_mut().zip(&g.data) {
                    *d += s;
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, rows: usize, cols: usize) -> &mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(rows, cols))
}

#[inline]
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}
