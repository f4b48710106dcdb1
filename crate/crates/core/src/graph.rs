//! Reverse-mode differentiation on a linear tape.
//!
//! Only the operations needed by the toy denoisers are differentiable:
//! matmul, add, sub, mul, scale, row broadcasts, softmax, layer norm, GELU,
//! mean, and the concat/slice plumbing for attention heads. Values are
//! rank-2 matrices; scalars are 1x1. The tape is rebuilt per training step
//! and backward visits each node exactly once in reverse creation order.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Global count of constructed graphs. The editing pipeline asserts this
/// stays flat while it runs: score-distillation must never differentiate.
static GRAPH_BUILDS: AtomicU64 = AtomicU64::new(0);

pub fn graph_build_count() -> u64 {
    GRAPH_BUILDS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param { param_id: usize },
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    /// x (r x c) + row (1 x c) broadcast over rows.
    AddRow { x: NodeId, row: NodeId },
    /// x (r x c) * row (1 x c) broadcast over rows.
    MulRow { x: NodeId, row: NodeId },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, eps: f64 },
    Gelu { x: NodeId },
    MeanAll { x: NodeId },
    Transpose { x: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize, end: usize },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Wengert tape. Parameters are named leaves registered with [`Graph::param`].
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        GRAPH_BUILDS.fetch_add(1, Ordering::Relaxed);
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { op, rows, cols, value });
        NodeId(self.nodes.len() - 1)
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("graph values stay finite")
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        let (r, c) = as_matrix(t);
        self.push(Op::Input, r, c, t.data().to_vec())
    }

    /// Trainable leaf identified by `param_id`.
    pub fn param(&mut self, param_id: usize, t: &Tensor) -> NodeId {
        let (r, c) = as_matrix(t);
        self.push(Op::Param { param_id }, r, c, t.data().to_vec())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Dimension { context: "graph matmul", left: vec![m, k], right: vec![k2, n] });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        Ok(self.push(Op::Matmul { a, b }, m, n, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "graph add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "graph sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "graph mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn zip(
        &mut self,
        a: NodeId,
        b: NodeId,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::Dimension { context, left: vec![ra, ca], right: vec![rb, cb] });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(op, ra, ca, out))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let (r, c) = self.dims(x);
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v * factor).collect();
        self.push(Op::Scale { x, factor }, r, c, out)
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != c {
            return Err(Error::Dimension { context: "graph add_row", left: vec![r, c], right: vec![rr, rc] });
        }
        let mut out = self.nodes[x.0].value.clone();
        let rowv = &self.nodes[row.0].value;
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += rowv[j];
            }
        }
        Ok(self.push(Op::AddRow { x, row }, r, c, out))
    }

    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != c {
            return Err(Error::Dimension { context: "graph mul_row", left: vec![r, c], right: vec![rr, rc] });
        }
        let mut out = self.nodes[x.0].value.clone();
        let rowv = &self.nodes[row.0].value;
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] *= rowv[j];
            }
        }
        Ok(self.push(Op::MulRow { x, row }, r, c, out))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].value[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        self.push(Op::Softmax { x }, r, c, out)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let (r, c) = self.dims(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].value[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv;
            }
        }
        self.push(Op::LayerNorm { x, eps }, r, c, out)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| gelu(v)).collect();
        self.push(Op::Gelu { x }, r, c, out)
    }

    /// Mean over all elements; returns a 1x1 scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.len();
        let mean = self.nodes[x.0].value.iter().sum::<f64>() / n as f64;
        self.push(Op::MeanAll { x }, 1, 1, vec![mean])
    }

    /// Squared error mean: mean((a - b)^2). Convenience composition.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        let src = &self.nodes[x.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Op::Transpose { x }, c, r, out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let (r, _) = self.dims(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::Contract { context: "concat_cols row mismatch" });
            }
            total += pc;
        }
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for &p in parts {
            let (_, pc) = self.dims(p);
            for i in 0..r {
                let src = &self.nodes[p.0].value[i * pc..(i + 1) * pc];
                out[i * total + offset..i * total + offset + pc].copy_from_slice(src);
            }
            offset += pc;
        }
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, r, total, out))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let (_, c) = self.dims(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(Error::Contract { context: "concat_rows col mismatch" });
            }
            total += pr;
        }
        let mut out = Vec::with_capacity(total * c);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, total, c, out))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if start >= end || end > r {
            return Err(Error::Contract { context: "slice_rows range" });
        }
        let out = self.nodes[x.0].value[start * c..end * c].to_vec();
        Ok(self.push(Op::SliceRows { x, start, end }, end - start, c, out))
    }

    /// Back-propagate from a scalar loss; returns gradients per param id.
    pub fn backward(&mut self, loss: NodeId) -> Result<BTreeMap<usize, Tensor>> {
        let ln = &self.nodes[loss.0];
        if ln.rows * ln.cols != 1 {
            return Err(Error::Contract { context: "backward needs a scalar loss" });
        }
        if !ln.value[0].is_finite() {
            return Err(Error::NonFinite { context: "loss" });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let (rows, cols) = (self.nodes[idx].rows, self.nodes[idx].cols);
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Input | Op::Param { .. } => {
                    grads[idx] = Some(gout);
                }
                Op::Matmul { a, b } => {
                    let (m, k) = self.dims(a);
                    let (_, n) = self.dims(b);
                    {
                        let ga = ensure(&mut grads, a.0, m * k);
                        // dA += dC * B^T, computed without materializing B^T.
                        let mut tmp = vec![0.0; m * k];
                        matmul_nt(&gout, &self.nodes[b.0].value, &mut tmp, m, n, k);
                        accumulate(ga, &tmp);
                    }
                    {
                        let gb = ensure(&mut grads, b.0, k * n);
                        let mut tmp = vec![0.0; k * n];
                        matmul_tn(&self.nodes[a.0].value, &gout, &mut tmp, k, m, n);
                        accumulate(gb, &tmp);
                    }
                    grads[idx] = Some(gout);
                }
                Op::Add { a, b } => {
                    accumulate(ensure(&mut grads, a.0, gout.len()), &gout);
                    accumulate(ensure(&mut grads, b.0, gout.len()), &gout);
                    grads[idx] = Some(gout);
                }
                Op::Sub { a, b } => {
                    accumulate(ensure(&mut grads, a.0, gout.len()), &gout);
                    let gb = ensure(&mut grads, b.0, gout.len());
                    for (g, &v) in gb.iter_mut().zip(&gout) {
                        *g -= v;
                    }
                    grads[idx] = Some(gout);
                }
                Op::Mul { a, b } => {
                    {
                        let bv = self.nodes[b.0].value.clone();
                        let ga = ensure(&mut grads, a.0, gout.len());
                        for i in 0..gout.len() {
                            ga[i] += gout[i] * bv[i];
                        }
                    }
                    {
                        let av = self.nodes[a.0].value.clone();
                        let gb = ensure(&mut grads, b.0, gout.len());
                        for i in 0..gout.len() {
                            gb[i] += gout[i] * av[i];
                        }
                    }
                    grads[idx] = Some(gout);
                }
                Op::Scale { x, factor } => {
                    let gx = ensure(&mut grads, x.0, gout.len());
                    for (g, &v) in gx.iter_mut().zip(&gout) {
                        *g += v * factor;
                    }
                    grads[idx] = Some(gout);
                }
                Op::AddRow { x, row } => {
                    accumulate(ensure(&mut grads, x.0, gout.len()), &gout);
                    let grow = ensure(&mut grads, row.0, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            grow[j] += gout[i * cols + j];
                        }
                    }
                    grads[idx] = Some(gout);
                }
                Op::MulRow { x, row } => {
                    {
                        let rowv = self.nodes[row.0].value.clone();
                        let gx = ensure(&mut grads, x.0, gout.len());
                        for i in 0..rows {
                            for j in 0..cols {
                                gx[i * cols + j] += gout[i * cols + j] * rowv[j];
                            }
                        }
                    }
                    {
                        let xv = self.nodes[x.0].value.clone();
                        let grow = ensure(&mut grads, row.0, cols);
                        for i in 0..rows {
                            for j in 0..cols {
                                grow[j] += gout[i * cols + j] * xv[i * cols + j];
                            }
                        }
                    }
                    grads[idx] = Some(gout);
                }
                Op::Softmax { x } => {
                    let y = self.nodes[idx].value.clone();
                    let gx = ensure(&mut grads, x.0, gout.len());
                    for i in 0..rows {
                        let yr = &y[i * cols..(i + 1) * cols];
                        let gr = &gout[i * cols..(i + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            gx[i * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                    grads[idx] = Some(gout);
                }
                Op::LayerNorm { x, eps } => {
                    let y = self.nodes[idx].value.clone();
                    let xv = self.nodes[x.0].value.clone();
                    let gx = ensure(&mut grads, x.0, gout.len());
                    let n = cols as f64;
                    for i in 0..rows {
                        let row = &xv[i * cols..(i + 1) * cols];
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let yr = &y[i * cols..(i + 1) * cols];
                        let gr = &gout[i * cols..(i + 1) * cols];
                        let gmean = gr.iter().sum::<f64>() / n;
                        let gydot = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<f64>() / n;
                        for j in 0..cols {
                            gx[i * cols + j] += inv * (gr[j] - gmean - yr[j] * gydot);
                        }
                    }
                    grads[idx] = Some(gout);
                }
                Op::Gelu { x } => {
                    let xv = self.nodes[x.0].value.clone();
                    let gx = ensure(&mut grads, x.0, gout.len());
                    for i in 0..gout.len() {
                        gx[i] += gout[i] * gelu_grad(xv[i]);
                    }
                    grads[idx] = Some(gout);
                }
                Op::MeanAll { x } => {
                    let n = self.nodes[x.0].value.len();
                    let share = gout[0] / n as f64;
                    let gx = ensure(&mut grads, x.0, n);
                    for g in gx.iter_mut() {
                        *g += share;
                    }
                    grads[idx] = Some(gout);
                }
                Op::Transpose { x } => {
                    let (xr, xc) = self.dims(x);
                    let gx = ensure(&mut grads, x.0, xr * xc);
                    for i in 0..rows {
                        for j in 0..cols {
                            // out[i, j] = x[j, i]
                            gx[j * xc + i] += gout[i * cols + j];
                        }
                    }
                    grads[idx] = Some(gout);
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in &parts {
                        let (pr, pc) = self.dims(p);
                        let gp = ensure(&mut grads, p.0, pr * pc);
                        for i in 0..pr {
                            for j in 0..pc {
                                gp[i * pc + j] += gout[i * cols + offset + j];
                            }
                        }
                        offset += pc;
                    }
                    grads[idx] = Some(gout);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in &parts {
                        let (pr, pc) = self.dims(p);
                        let gp = ensure(&mut grads, p.0, pr * pc);
                        accumulate(gp, &gout[offset * pc..(offset + pr) * pc]);
                        offset += pr;
                    }
                    grads[idx] = Some(gout);
                }
                Op::SliceRows { x, start, end } => {
                    let (_, xc) = self.dims(x);
                    let xlen = self.nodes[x.0].value.len();
                    let gx = ensure(&mut grads, x.0, xlen);
                    accumulate(&mut gx[start * xc..end * xc], &gout);
                    grads[idx] = Some(gout);
                }
            }
        }

        let mut by_param = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param { param_id } = node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.rows * node.cols]);
                by_param.insert(
                    param_id,
                    Tensor::new(vec![node.rows, node.cols], g)
                        .map_err(|_| Error::NonFinite { context: "gradient" })?,
                );
            }
        }
        Ok(by_param)
    }
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        _ => panic!("graph nodes are rank-1 or rank-2, got {:?}", t.shape()),
    }
}

fn ensure(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(acc: &mut [f64], inc: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(inc) {
        *a += b;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
