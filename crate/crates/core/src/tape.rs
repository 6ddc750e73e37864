//! Reverse-mode gradient tape.
//!
//! Ops are methods on [`Tape`]. A result is recorded only when at least one
//! input is tracked, so inference over plain tensors pays nothing beyond a
//! branch per op. Backward walks the node list in reverse, visiting each
//! recorded op exactly once, and leaves its per-leaf adjoints readable via
//! [`Tape::grad`].
//!
//! One tape belongs to one thread of execution; tensors themselves move
//! freely between threads.

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{NodeRef, Tensor};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

type BackwardFn = Box<dyn Fn(&[f64], &mut [Vec<f64>])>;

struct Node {
    backward: Option<BackwardFn>,
}

pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Vec<f64>>>,
    ran: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn acc(grads: &mut [Vec<f64>], idx: usize, contrib: Vec<f64>) {
    if grads[idx].is_empty() {
        grads[idx] = contrib;
    } else {
        for (g, c) in grads[idx].iter_mut().zip(contrib) {
            *g += c;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            ran: Cell::new(false),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Register a tensor as a differentiable leaf.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node { backward: None });
        t.with_node(NodeRef {
            tape: self.id,
            index,
        })
    }

    fn index_of(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node() {
            None => Ok(None),
            Some(nr) if nr.tape == self.id => Ok(Some(nr.index)),
            Some(_) => Err(Error::TapeMismatch),
        }
    }

    fn push(&self, backward: BackwardFn) -> NodeRef {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            backward: Some(backward),
        });
        NodeRef {
            tape: self.id,
            index,
        }
    }

    /// Propagate adjoints from a scalar loss back to every tracked leaf.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let loss_idx = self.index_of(loss)?.ok_or(Error::DetachedLoss)?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); nodes.len()];
        grads[loss_idx] = vec![1.0];
        for i in (0..=loss_idx).rev() {
            if grads[i].is_empty() {
                continue;
            }
            if let Some(bwd) = &nodes[i].backward {
                let g = std::mem::take(&mut grads[i]);
                bwd(&g, &mut grads);
            }
        }
        drop(nodes);
        *self.grads.borrow_mut() = grads;
        self.ran.set(true);
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `t`.
    /// Zero for leaves the loss never touched; `None` before any backward
    /// or for untracked tensors.
    pub fn grad(&self, t: &Tensor) -> Option<Tensor> {
        if !self.ran.get() {
            return None;
        }
        let idx = self.index_of(t).ok()??;
        let grads = self.grads.borrow();
        let g = &grads[idx];
        if g.is_empty() {
            Some(Tensor::zeros(t.shape().to_vec()))
        } else {
            Some(Tensor::internal(t.shape().to_vec(), g.clone(), None))
        }
    }

    // ---- differentiable ops -------------------------------------------------

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let out = ops::matmul(a.data(), m, k, b.data(), n);
        ops::check_finite("matmul", &out)?;
        let (ai, bi) = (self.index_of(a)?, self.index_of(b)?);
        let node = (ai.is_some() || bi.is_some()).then(|| {
            let a_d = a.data_arc();
            let b_d = b.data_arc();
            self.push(Box::new(move |g, grads| {
                if let Some(ai) = ai {
                    acc(grads, ai, ops::matmul_nt(g, m, n, &b_d, k));
                }
                if let Some(bi) = bi {
                    acc(grads, bi, ops::matmul_tn(&a_d, m, k, g, n));
                }
            }))
        });
        Ok(Tensor::internal(vec![m, n], out, node))
    }

    /// `a * b^T` for row-major `a[m x k]`, `b[n x k]`.
    pub fn matmul_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dims2("matmul_nt")?;
        let (n, k2) = b.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let out = ops::matmul_nt(a.data(), m, k, b.data(), n);
        ops::check_finite("matmul_nt", &out)?;
        let (ai, bi) = (self.index_of(a)?, self.index_of(b)?);
        let node = (ai.is_some() || bi.is_some()).then(|| {
            let a_d = a.data_arc();
            let b_d = b.data_arc();
            self.push(Box::new(move |g, grads| {
                if let Some(ai) = ai {
                    acc(grads, ai, ops::matmul(g, m, n, &b_d, k));
                }
                if let Some(bi) = bi {
                    acc(grads, bi, ops::matmul_tn(g, m, n, &a_d, k));
                }
            }))
        });
        Ok(Tensor::internal(vec![m, n], out, node))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_op("add", a, b, |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_op("sub", a, b, |x, y| x - y, |_, _| (1.0, -1.0))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_op("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    fn zip_op(
        &self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: fn(f64, f64) -> f64,
        df: fn(f64, f64) -> (f64, f64),
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let out: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        ops::check_finite(op, &out)?;
        let (ai, bi) = (self.index_of(a)?, self.index_of(b)?);
        let node = (ai.is_some() || bi.is_some()).then(|| {
            let a_d = a.data_arc();
            let b_d = b.data_arc();
            self.push(Box::new(move |g, grads| {
                if let Some(ai) = ai {
                    let da = g
                        .iter()
                        .zip(a_d.iter().zip(b_d.iter()))
                        .map(|(g, (x, y))| g * df(*x, *y).0)
                        .collect();
                    acc(grads, ai, da);
                }
                if let Some(bi) = bi {
                    let db = g
                        .iter()
                        .zip(a_d.iter().zip(b_d.iter()))
                        .map(|(g, (x, y))| g * df(*x, *y).1)
                        .collect();
                    acc(grads, bi, db);
                }
            }))
        });
        Ok(Tensor::internal(a.shape().to_vec(), out, node))
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let out = ops::scale(a.data(), c);
        ops::check_finite("scale", &out)?;
        let ai = self.index_of(a)?;
        let node = ai.map(|ai| {
            self.push(Box::new(move |g, grads| {
                acc(grads, ai, ops::scale(g, c));
            }))
        });
        Ok(Tensor::internal(a.shape().to_vec(), out, node))
    }

    /// Broadcast-add a length-`d` vector to every row of `a[rows x d]`.
    pub fn add_row_vector(&self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (rows, d) = a.dims2("add_row_vector")?;
        if v.len() != d {
            return Err(Error::ShapeMismatch {
                op: "add_row_vector",
                left: a.shape().to_vec(),
                right: v.shape().to_vec(),
            });
        }
        let vd = v.data();
        let out: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vd[i % d])
            .collect();
        ops::check_finite("add_row_vector", &out)?;
        let (ai, vi) = (self.index_of(a)?, self.index_of(v)?);
        let node = (ai.is_some() || vi.is_some()).then(|| {
            self.push(Box::new(move |g, grads| {
                if let Some(ai) = ai {
                    acc(grads, ai, g.to_vec());
                }
                if let Some(vi) = vi {
                    let mut dv = vec![0.0; d];
                    for r in 0..rows {
                        for (dvj, gj) in dv.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *dvj += gj;
                        }
                    }
                    acc(grads, vi, dv);
                }
            }))
        });
        Ok(Tensor::internal(vec![rows, d], out, node))
    }

    /// Row-wise softmax. `mask`, when present, is an additive `{0, -inf}`
    /// layout of the same `rows x cols` shape applied before normalizing.
    pub fn softmax_rows(&self, a: &Tensor, mask: Option<&[f64]>) -> Result<Tensor> {
        let (rows, cols) = a.dims2("softmax_rows")?;
        let out = ops::softmax_rows(a.data(), rows, cols, mask)?;
        let ai = self.index_of(a)?;
        let node = ai.map(|ai| {
            let y = Arc::new(out.clone());
            self.push(Box::new(move |g, grads| {
                let mut da = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for (d, (y, g)) in da[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(yr.iter().zip(gr))
                    {
                        *d = y * (g - dot);
                    }
                }
                acc(grads, ai, da);
            }))
        });
        Ok(Tensor::internal(vec![rows, cols], out, node))
    }

    /// Normalize the last axis to mean 0, variance 1 (no learned affine).
    pub fn layer_norm(&self, a: &Tensor, eps: f64) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::InvalidValue {
                what: "eps",
                value: eps,
                detail: "layer_norm eps must be positive",
            });
        }
        let d = *a.shape().last().ok_or(Error::InvalidShape {
            op: "layer_norm",
            shape: a.shape().to_vec(),
            detail: "rank must be >= 1".into(),
        })?;
        let (out, inv_stds) = ops::layer_norm(a.data(), d, eps);
        ops::check_finite("layer_norm", &out)?;
        let ai = self.index_of(a)?;
        let node = ai.map(|ai| {
            let y = Arc::new(out.clone());
            let inv = Arc::new(inv_stds);
            self.push(Box::new(move |g, grads| {
                let rows = y.len() / d;
                let mut da = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean_g: f64 = gr.iter().sum::<f64>() / d as f64;
                    let mean_gy: f64 =
                        gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / d as f64;
                    for (o, (g, y)) in da[r * d..(r + 1) * d].iter_mut().zip(gr.iter().zip(yr)) {
                        *o = inv[r] * (g - mean_g - y * mean_gy);
                    }
                }
                acc(grads, ai, da);
            }))
        });
        Ok(Tensor::internal(a.shape().to_vec(), out, node))
    }

    pub fn gelu(&self, a: &Tensor) -> Result<Tensor> {
        let out = ops::gelu(a.data());
        ops::check_finite("gelu", &out)?;
        let ai = self.index_of(a)?;
        let node = ai.map(|ai| {
            let x = a.data_arc();
            self.push(Box::new(move |g, grads| {
                let dg = ops::gelu_grad(&x);
                acc(grads, ai, ops::ewise_mul(g, &dg));
            }))
        });
        Ok(Tensor::internal(a.shape().to_vec(), out, node))
    }

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let total = a.data().iter().sum::<f64>();
        if !total.is_finite() {
            return Err(Error::NonFinite {
                op: "sum",
                index: 0,
            });
        }
        let ai = self.index_of(a)?;
        let len = a.len();
        let node = ai.map(|ai| {
            self.push(Box::new(move |g, grads| {
                acc(grads, ai, vec![g[0]; len]);
            }))
        });
        Ok(Tensor::internal(vec![1], vec![total], node))
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        let n = a.len() as f64;
        let s = self.sum(a)?;
        self.scale(&s, 1.0 / n)
    }

    /// Mean squared difference, `mean((a - b)^2)`.
    pub fn mse(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let d = self.sub(a, b)?;
        let sq = self.mul(&d, &d)?;
        self.mean(&sq)
    }

    /// Rows `r0..r1` of a rank-2 tensor.
    pub fn slice_rows(&self, a: &Tensor, r0: usize, r1: usize) -> Result<Tensor> {
        let (rows, d) = a.dims2("slice_rows")?;
        if r0 > r1 || r1 > rows {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                shape: a.shape().to_vec(),
                detail: format!("row range {r0}..{r1} out of bounds"),
            });
        }
        let out = a.data()[r0 * d..r1 * d].to_vec();
        let ai = self.index_of(a)?;
        let total = rows * d;
        let node = ai.map(|ai| {
            self.push(Box::new(move |g, grads| {
                let mut da = vec![0.0; total];
                da[r0 * d..r1 * d].copy_from_slice(g);
                acc(grads, ai, da);
            }))
        });
        Ok(Tensor::internal(vec![r1 - r0, d], out, node))
    }

    /// Stack rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&self, parts: &[&Tensor]) -> Result<Tensor> {
        let nonempty: Vec<&&Tensor> = parts.iter().filter(|p| !p.is_empty()).collect();
        let d = match nonempty.first() {
            Some(p) => p.dims2("concat_rows")?.1,
            None => {
                return Ok(Tensor::internal(vec![0, 0], Vec::new(), None));
            }
        };
        let mut data = Vec::new();
        let mut spans = Vec::new(); // (tracked index, start, len) per part
        for p in parts {
            if p.is_empty() {
                continue;
            }
            let (r, c) = p.dims2("concat_rows")?;
            if c != d {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![r, c],
                    right: vec![0, d],
                });
            }
            spans.push((self.index_of(p)?, data.len(), r * c));
            data.extend_from_slice(p.data());
        }
        let rows = data.len() / d;
        let any_tracked = spans.iter().any(|(i, _, _)| i.is_some());
        let node = any_tracked.then(|| {
            self.push(Box::new(move |g, grads| {
                for (idx, start, len) in &spans {
                    if let Some(idx) = idx {
                        acc(grads, *idx, g[*start..*start + *len].to_vec());
                    }
                }
            }))
        });
        Ok(Tensor::internal(vec![rows, d], data, node))
    }

    /// Columns `c0..c1` of a rank-2 tensor.
    pub fn slice_cols(&self, a: &Tensor, c0: usize, c1: usize) -> Result<Tensor> {
        let (rows, d) = a.dims2("slice_cols")?;
        if c0 > c1 || c1 > d {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                shape: a.shape().to_vec(),
                detail: format!("column range {c0}..{c1} out of bounds"),
            });
        }
        let w = c1 - c0;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&a.data()[r * d + c0..r * d + c1]);
        }
        let ai = self.index_of(a)?;
        let node = ai.map(|ai| {
            self.push(Box::new(move |g, grads| {
                let mut da = vec![0.0; rows * d];
                for r in 0..rows {
                    da[r * d + c0..r * d + c1].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(grads, ai, da);
            }))
        });
        Ok(Tensor::internal(vec![rows, w], out, node))
    }

    /// Stack rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Ok(Tensor::internal(vec![0, 0], Vec::new(), None));
        }
        let rows = parts[0].dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let (r, c) = p.dims2("concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![rows, 0],
                    right: vec![r, c],
                });
            }
            widths.push(c);
            total += c;
        }
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        let mut spans = Vec::new();
        for (p, &w) in parts.iter().zip(&widths) {
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
            spans.push((self.index_of(p)?, offset, w));
            offset += w;
        }
        let any_tracked = spans.iter().any(|(i, _, _)| i.is_some());
        let node = any_tracked.then(|| {
            self.push(Box::new(move |g, grads| {
                for (idx, off, w) in &spans {
                    if let Some(idx) = idx {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        acc(grads, *idx, dp);
                    }
                }
            }))
        });
        Ok(Tensor::internal(vec![rows, total], data, node))
    }

    /// `out[i] = a[index[i]]`; the permutation/gather primitive behind
    /// patch reassembly.
    pub fn gather(&self, a: &Tensor, index: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != index.len() {
            return Err(Error::InvalidShape {
                op: "gather",
                shape,
                detail: "index length does not match output shape".into(),
            });
        }
        let src = a.data();
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            out.push(src[i]);
        }
        let ai = self.index_of(a)?;
        let src_len = src.len();
        let node = ai.map(|ai| {
            let index = Arc::clone(&index);
            self.push(Box::new(move |g, grads| {
                let mut da = vec![0.0; src_len];
                for (gi, &i) in g.iter().zip(index.iter()) {
                    da[i] += gi;
                }
                acc(grads, ai, da);
            }))
        });
        Ok(Tensor::internal(shape, out, node))
    }

    /// Rotate consecutive column pairs of each row by `position * theta_j`.
    pub fn rope(
        &self,
        a: &Tensor,
        positions: Arc<Vec<usize>>,
        thetas: Arc<Vec<f64>>,
    ) -> Result<Tensor> {
        let (rows, d) = a.dims2("rope")?;
        if d % 2 != 0 {
            return Err(Error::Config(format!(
                "rope requires an even dimension, got {d}"
            )));
        }
        if positions.len() != rows || thetas.len() != d / 2 {
            return Err(Error::InvalidShape {
                op: "rope",
                shape: a.shape().to_vec(),
                detail: format!(
                    "{} positions / {} thetas for {rows} rows of width {d}",
                    positions.len(),
                    thetas.len()
                ),
            });
        }
        let out = ops::rope(a.data(), d, &positions, &thetas, true);
        let ai = self.index_of(a)?;
        let node = ai.map(|ai| {
            self.push(Box::new(move |g, grads| {
                acc(grads, ai, ops::rope(g, d, &positions, &thetas, false));
            }))
        });
        Ok(Tensor::internal(vec![rows, d], out, node))
    }

    /// Same data viewed under a new shape.
    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        a.reshaped(shape)
    }
}

/// Central finite differences: `(f(x + h e_i) - f(x - h e_i)) / 2h` per
/// coordinate. The independent oracle for everything the tape computes.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if h <= 0.0 {
        return Err(Error::InvalidValue {
            what: "h",
            value: h,
            detail: "finite-difference step must be positive",
        });
    }
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let xi = x.data()[i];
        let fp = f(&x.with_element(i, xi + h))?;
        let fm = f(&x.with_element(i, xi - h))?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
                index: i,
            });
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(Tensor::internal(x.shape().to_vec(), grad, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let tape = Tape::new();
        let i2 = Tensor::eye(2);
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = tape.matmul(&i2, &a).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_hand_example() {
        let tape = Tape::new();
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let tape = Tape::new();
        let z = Tensor::zeros(vec![3, 4]);
        let b = t2(4, 2, &[1.0; 8]);
        let out = tape.matmul(&z, &b).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let tape = Tape::new();
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 2, &[0.0; 4]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_row() {
        let tape = Tape::new();
        let a = t2(1, 3, &[0.0, 0.0, 0.0]);
        let out = tape.softmax_rows(&a, None).unwrap();
        for v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_masked_entry_is_killed() {
        let tape = Tape::new();
        let a = t2(1, 2, &[0.0, 0.0]);
        let mask = [f64::NEG_INFINITY, 0.0];
        let out = tape.softmax_rows(&a, Some(&mask)).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_reference_values() {
        let tape = Tape::new();
        let a = t2(1, 3, &[1.0, 2.0, 3.0]);
        let out = tape.softmax_rows(&a, None).unwrap();
        let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_9, 0.665_240_955_774_821_6];
        for (v, e) in out.data().iter().zip(&expect) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
    }

    #[test]
    fn softmax_fully_masked_row_errors_with_index() {
        let tape = Tape::new();
        let a = t2(2, 2, &[0.0; 4]);
        let mask = [
            0.0,
            0.0,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ];
        let err = tape.softmax_rows(&a, Some(&mask)).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn layer_norm_constant_row_is_zeroed() {
        let tape = Tape::new();
        let a = t2(1, 3, &[1.0, 1.0, 1.0]);
        let out = tape.layer_norm(&a, 1e-5).unwrap();
        for v in out.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_symmetric_pair() {
        let tape = Tape::new();
        let a = t2(1, 2, &[-100.0, 100.0]);
        let out = tape.layer_norm(&a, 1e-5).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-9);
        assert!((out.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_reference_values() {
        let tape = Tape::new();
        let a = t2(1, 3, &[1.0, 2.0, 3.0]);
        let out = tape.layer_norm(&a, 1e-5).unwrap();
        let expect = [-1.22474, 0.0, 1.22474];
        for (v, e) in out.data().iter().zip(&expect) {
            assert!((v - e).abs() < 1e-4, "{v} vs {e}");
        }
    }

    #[test]
    fn backward_linear_sum() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![3], vec![5.0, -1.0, 2.0]).unwrap());
        let loss = tape.sum(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let err = tape.backward(&x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn backward_rejects_detached_loss() {
        let tape = Tape::new();
        let loss = Tensor::scalar(1.0).unwrap();
        let err = tape.backward(&loss).unwrap_err();
        assert!(matches!(err, Error::DetachedLoss));
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let t1 = Tape::new();
        let t2_ = Tape::new();
        let x = t1.leaf(&Tensor::from_vec(vec![1], vec![1.0]).unwrap());
        let err = t2_.sum(&x).unwrap_err();
        assert!(matches!(err, Error::TapeMismatch));
    }

    #[test]
    fn finite_diff_on_sum_is_ones() {
        let x = Tensor::from_vec(vec![3], vec![0.3, -0.7, 1.9]).unwrap();
        let g = finite_diff_grad(|x| Ok(x.sum_value()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_on_square() {
        let x = Tensor::from_vec(vec![1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|x| Ok(x.data()[0] * x.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn grad_of_untouched_leaf_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let y = tape.leaf(&Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap());
        let loss = tape.sum(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // mean(gelu(x W) * x) style mix of ops against the oracle
        let w = Tensor::from_vec(vec![2, 2], vec![0.4, -0.3, 0.8, 0.1]).unwrap();
        let x0 = Tensor::from_vec(vec![2, 2], vec![0.5, -1.0, 0.25, 2.0]).unwrap();
        let eval = |x: &Tensor| -> crate::error::Result<f64> {
            let tape = Tape::new();
            let xt = tape.leaf(x);
            let h = tape.matmul(&xt, &w)?;
            let h = tape.gelu(&h)?;
            let h = tape.mul(&h, &xt)?;
            let h = tape.layer_norm(&h, 1e-5)?;
            let s = tape.softmax_rows(&h, None)?;
            let l = tape.mean(&s)?;
            Ok(l.scalar_value()?)
        };
        let tape = Tape::new();
        let xt = tape.leaf(&x0);
        let h = tape.matmul(&xt, &w).unwrap();
        let h = tape.gelu(&h).unwrap();
        let h = tape.mul(&h, &xt).unwrap();
        let h = tape.layer_norm(&h, 1e-5).unwrap();
        let s = tape.softmax_rows(&h, None).unwrap();
        let l = tape.mean(&s).unwrap();
        tape.backward(&l).unwrap();
        let got = tape.grad(&xt).unwrap();
        let fd = finite_diff_grad(eval, &x0, 1e-5).unwrap();
        for (g, f) in got.data().iter().zip(fd.data()) {
            let denom = g.abs().max(f.abs()).max(1e-6);
            assert!((g - f).abs() / denom < 1e-4, "{g} vs {f}");
        }
    }

    #[test]
    fn slicing_and_concat_round_trip_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(&t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let top = tape.slice_rows(&x, 0, 1).unwrap();
        let rest = tape.slice_rows(&x, 1, 3).unwrap();
        let back = tape.concat_rows(&[&top, &rest]).unwrap();
        assert_eq!(back.data(), x.data());
        let loss = tape.sum(&back).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn untracked_ops_do_not_record() {
        let tape = Tape::new();
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let out = tape.matmul(&a, &b).unwrap();
        assert!(!out.tracked());
        assert_eq!(tape.num_nodes(), 0);
    }
}
