//! Minimal differentiable-computation facility: dense 2-D tensors, the
//! primitive operations the model needs, reverse-mode gradients, a
//! finite-difference gradient checker, and the checkpoint format.
//!
//! Values are stored and accumulated in binary64; payload-facing data
//! (checkpoints, the Xn latent) is quantized to binary32 at the boundary.
//! Shape errors panic with both shapes in the message, like the dense-array
//! crates this mirrors.

mod checkpoint;
mod gradcheck;

pub use checkpoint::{load_checkpoint, save_checkpoint, ParamBlocks, CHECKPOINT_VERSION};
pub use gradcheck::{check_gradients, GradCheckReport};

use std::cell::RefCell;

/// Handle to a node on a [`Tape`]; cheap to copy, tied to its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    /// a[r,c] + broadcast of b[1,c] over rows.
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    // The constant is kept for debuggability even though backward ignores it.
    AddScalar(usize, #[allow(dead_code)] f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Ln(usize),
    Clamp(usize, f64, f64),
    /// Row-wise softmax over the last axis; masked columns get probability 0.
    SoftmaxMasked(usize, Vec<bool>),
    /// Last-axis layer norm with learned gain/bias, eps 1e-5.
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
    },
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize, usize),
    SliceRows(usize, usize, usize),
    GatherRows(usize, Vec<usize>),
    /// scores[h,e] = q_h . k_{e,h} / sqrt(head_dim)
    MultiHeadScores {
        q: usize,
        k: usize,
        heads: usize,
    },
    /// out[1, h*d] with out_h = sum_e w[h,e] v[e, h-block]
    AttnCombine {
        w: usize,
        v: usize,
    },
    SumAll(usize),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LOGVAR_CLAMP: f64 = 30.0;

/// Records primitive applications in execution order; backward traverses in
/// exact reverse order with additive gradient accumulation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn shape_eq(what: &str, a: (usize, usize), b: (usize, usize)) {
    assert!(
        a == b,
        "{what}: shape mismatch {:?} vs {:?}",
        a,
        b
    );
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Tensor {
        debug_assert_eq!(value.len(), rows * cols);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            rows,
            cols,
            value,
            grad: Vec::new(),
        });
        Tensor { id, rows, cols }
    }

    /// Creates a leaf node (parameter or input constant).
    pub fn leaf(&self, rows: usize, cols: usize, data: &[f64]) -> Tensor {
        assert!(
            data.len() == rows * cols,
            "leaf: shape mismatch ({rows}, {cols}) vs data length {}",
            data.len()
        );
        self.push(Op::Leaf, rows, cols, data.to_vec())
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.push(Op::Leaf, 1, 1, vec![v])
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Tensor {
        self.push(Op::Leaf, rows, cols, vec![0.0; rows * cols])
    }

    pub fn value(&self, t: Tensor) -> Vec<f64> {
        self.nodes.borrow()[t.id].value.clone()
    }

    pub fn scalar_value(&self, t: Tensor) -> f64 {
        assert!(t.rows == 1 && t.cols == 1, "expected scalar, got ({}, {})", t.rows, t.cols);
        self.nodes.borrow()[t.id].value[0]
    }

    /// Gradient of the last `backward` call with respect to `t`.
    pub fn grad(&self, t: Tensor) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let g = &nodes[t.id].grad;
        if g.is_empty() {
            vec![0.0; t.len()]
        } else {
            g.clone()
        }
    }

    // ---- primitives ----

    pub fn matmul(&self, a: Tensor, b: Tensor) -> Tensor {
        assert!(
            a.cols == b.rows,
            "matmul: shape mismatch ({}, {}) x ({}, {})",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        );
        let nodes = self.nodes.borrow();
        let mut out = vec![0.0; a.rows * b.cols];
        matmul_nn(
            &nodes[a.id].value,
            &nodes[b.id].value,
            &mut out,
            a.rows,
            a.cols,
            b.cols,
        );
        drop(nodes);
        self.push(Op::MatMul(a.id, b.id), a.rows, b.cols, out)
    }

    pub fn add(&self, a: Tensor, b: Tensor) -> Tensor {
        shape_eq("add", (a.rows, a.cols), (b.rows, b.cols));
        let nodes = self.nodes.borrow();
        let out = zip_map(&nodes[a.id].value, &nodes[b.id].value, |x, y| x + y);
        drop(nodes);
        self.push(Op::Add(a.id, b.id), a.rows, a.cols, out)
    }

    /// a[r,c] + b[1,c] broadcast over rows (bias add).
    pub fn add_row(&self, a: Tensor, b: Tensor) -> Tensor {
        assert!(
            b.rows == 1 && b.cols == a.cols,
            "add_row: shape mismatch ({}, {}) + ({}, {})",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        );
        let nodes = self.nodes.borrow();
        let bv = &nodes[b.id].value;
        let mut out = nodes[a.id].value.clone();
        for r in 0..a.rows {
            for c in 0..a.cols {
                out[r * a.cols + c] += bv[c];
            }
        }
        drop(nodes);
        self.push(Op::AddRow(a.id, b.id), a.rows, a.cols, out)
    }

    pub fn sub(&self, a: Tensor, b: Tensor) -> Tensor {
        shape_eq("sub", (a.rows, a.cols), (b.rows, b.cols));
        let nodes = self.nodes.borrow();
        let out = zip_map(&nodes[a.id].value, &nodes[b.id].value, |x, y| x - y);
        drop(nodes);
        self.push(Op::Sub(a.id, b.id), a.rows, a.cols, out)
    }

    /// Elementwise product.
    pub fn mul(&self, a: Tensor, b: Tensor) -> Tensor {
        shape_eq("mul", (a.rows, a.cols), (b.rows, b.cols));
        let nodes = self.nodes.borrow();
        let out = zip_map(&nodes[a.id].value, &nodes[b.id].value, |x, y| x * y);
        drop(nodes);
        self.push(Op::Mul(a.id, b.id), a.rows, a.cols, out)
    }

    pub fn scale(&self, a: Tensor, k: f64) -> Tensor {
        let out = self.nodes.borrow()[a.id].value.iter().map(|v| v * k).collect();
        self.push(Op::Scale(a.id, k), a.rows, a.cols, out)
    }

    pub fn add_scalar(&self, a: Tensor, k: f64) -> Tensor {
        let out = self.nodes.borrow()[a.id].value.iter().map(|v| v + k).collect();
        self.push(Op::AddScalar(a.id, k), a.rows, a.cols, out)
    }

    pub fn sigmoid(&self, a: Tensor) -> Tensor {
        let out = self.nodes.borrow()[a.id]
            .value
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(Op::Sigmoid(a.id), a.rows, a.cols, out)
    }

    pub fn tanh(&self, a: Tensor) -> Tensor {
        let out = self.nodes.borrow()[a.id].value.iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(a.id), a.rows, a.cols, out)
    }

    pub fn relu(&self, a: Tensor) -> Tensor {
        let out = self.nodes.borrow()[a.id].value.iter().map(|v| v.max(0.0)).collect();
        self.push(Op::Relu(a.id), a.rows, a.cols, out)
    }

    pub fn gelu(&self, a: Tensor) -> Tensor {
        let out = self.nodes.borrow()[a.id].value.iter().map(|&v| gelu(v)).collect();
        self.push(Op::Gelu(a.id), a.rows, a.cols, out)
    }

    pub fn exp(&self, a: Tensor) -> Tensor {
        let out = self.nodes.borrow()[a.id].value.iter().map(|v| v.exp()).collect();
        self.push(Op::Exp(a.id), a.rows, a.cols, out)
    }

    pub fn ln(&self, a: Tensor) -> Tensor {
        let out = self.nodes.borrow()[a.id].value.iter().map(|v| v.ln()).collect();
        self.push(Op::Ln(a.id), a.rows, a.cols, out)
    }

    pub fn clamp(&self, a: Tensor, lo: f64, hi: f64) -> Tensor {
        let out = self.nodes.borrow()[a.id]
            .value
            .iter()
            .map(|v| v.clamp(lo, hi))
            .collect();
        self.push(Op::Clamp(a.id, lo, hi), a.rows, a.cols, out)
    }

    /// Row-wise softmax; masked columns get probability exactly 0. The mask
    /// applies to every row. Panics if a row has no unmasked column.
    pub fn softmax_masked(&self, a: Tensor, mask: &[bool]) -> Tensor {
        assert!(
            mask.len() == a.cols,
            "softmax_masked: mask length {} vs {} columns",
            mask.len(),
            a.cols
        );
        assert!(mask.iter().any(|&m| m), "softmax_masked: all columns masked");
        let nodes = self.nodes.borrow();
        let x = &nodes[a.id].value;
        let mut out = vec![0.0; x.len()];
        for r in 0..a.rows {
            let row = &x[r * a.cols..(r + 1) * a.cols];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..a.cols {
                if mask[c] {
                    let e = (row[c] - max).exp();
                    out[r * a.cols + c] = e;
                    sum += e;
                }
            }
            for c in 0..a.cols {
                out[r * a.cols + c] /= sum;
            }
        }
        drop(nodes);
        self.push(Op::SoftmaxMasked(a.id, mask.to_vec()), a.rows, a.cols, out)
    }

    /// Softmax over the full row (no masking).
    pub fn softmax(&self, a: Tensor) -> Tensor {
        self.softmax_masked(a, &vec![true; a.cols])
    }

    pub fn layer_norm(&self, x: Tensor, gain: Tensor, bias: Tensor) -> Tensor {
        assert!(
            gain.rows == 1 && gain.cols == x.cols && bias.rows == 1 && bias.cols == x.cols,
            "layer_norm: shape mismatch x ({}, {}), gain ({}, {}), bias ({}, {})",
            x.rows,
            x.cols,
            gain.rows,
            gain.cols,
            bias.rows,
            bias.cols
        );
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.id].value;
        let gv = &nodes[gain.id].value;
        let bv = &nodes[bias.id].value;
        let mut out = vec![0.0; xv.len()];
        let n = x.cols as f64;
        for r in 0..x.rows {
            let row = &xv[r * x.cols..(r + 1) * x.cols];
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..x.cols {
                out[r * x.cols + c] = (row[c] - mean) * inv * gv[c] + bv[c];
            }
        }
        drop(nodes);
        self.push(
            Op::LayerNorm {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
            },
            x.rows,
            x.cols,
            out,
        )
    }

    /// Inverted dropout: kept entries scale by 1/keep, so inference applies
    /// no rescaling. `train` = false is the identity.
    pub fn dropout<R: rand::Rng>(&self, a: Tensor, rate: f64, train: bool, rng: &mut R) -> Tensor {
        if !train || rate == 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..a.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.leaf(a.rows, a.cols, &mask);
        self.mul(a, m)
    }

    /// Reparameterized Gaussian sample: mu + exp(0.5 * clamp(logvar)) * eps.
    /// `eps` is supplied by the caller so sampling can be frozen.
    pub fn gaussian_sample(&self, mu: Tensor, logvar: Tensor, eps: Tensor) -> Tensor {
        shape_eq("gaussian_sample", (mu.rows, mu.cols), (logvar.rows, logvar.cols));
        shape_eq("gaussian_sample", (mu.rows, mu.cols), (eps.rows, eps.cols));
        let clamped = self.clamp(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        let std = self.exp(self.scale(clamped, 0.5));
        self.add(mu, self.mul(std, eps))
    }

    pub fn concat_cols(&self, a: Tensor, b: Tensor) -> Tensor {
        assert!(
            a.rows == b.rows,
            "concat_cols: row mismatch ({}, {}) vs ({}, {})",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        );
        let nodes = self.nodes.borrow();
        let av = &nodes[a.id].value;
        let bv = &nodes[b.id].value;
        let cols = a.cols + b.cols;
        let mut out = Vec::with_capacity(a.rows * cols);
        for r in 0..a.rows {
            out.extend_from_slice(&av[r * a.cols..(r + 1) * a.cols]);
            out.extend_from_slice(&bv[r * b.cols..(r + 1) * b.cols]);
        }
        drop(nodes);
        self.push(Op::ConcatCols(a.id, b.id), a.rows, cols, out)
    }

    pub fn concat_rows(&self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let cols = parts[0].cols;
        for p in parts {
            assert!(
                p.cols == cols,
                "concat_rows: column mismatch ({}, {}) vs ({}, {})",
                parts[0].rows,
                cols,
                p.rows,
                p.cols
            );
        }
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(&nodes[p.id].value);
        }
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        drop(nodes);
        self.push(Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rows, cols, out)
    }

    pub fn slice_cols(&self, a: Tensor, start: usize, end: usize) -> Tensor {
        assert!(
            start < end && end <= a.cols,
            "slice_cols: range {start}..{end} out of ({}, {})",
            a.rows,
            a.cols
        );
        let nodes = self.nodes.borrow();
        let av = &nodes[a.id].value;
        let mut out = Vec::with_capacity(a.rows * (end - start));
        for r in 0..a.rows {
            out.extend_from_slice(&av[r * a.cols + start..r * a.cols + end]);
        }
        drop(nodes);
        self.push(Op::SliceCols(a.id, start, end), a.rows, end - start, out)
    }

    pub fn slice_rows(&self, a: Tensor, start: usize, end: usize) -> Tensor {
        assert!(
            start < end && end <= a.rows,
            "slice_rows: range {start}..{end} out of ({}, {})",
            a.rows,
            a.cols
        );
        let nodes = self.nodes.borrow();
        let out = nodes[a.id].value[start * a.cols..end * a.cols].to_vec();
        drop(nodes);
        self.push(Op::SliceRows(a.id, start, end), end - start, a.cols, out)
    }

    pub fn gather_rows(&self, a: Tensor, indices: &[usize]) -> Tensor {
        for &i in indices {
            assert!(i < a.rows, "gather_rows: index {i} out of {} rows", a.rows);
        }
        let nodes = self.nodes.borrow();
        let av = &nodes[a.id].value;
        let mut out = Vec::with_capacity(indices.len() * a.cols);
        for &i in indices {
            out.extend_from_slice(&av[i * a.cols..(i + 1) * a.cols]);
        }
        drop(nodes);
        self.push(
            Op::GatherRows(a.id, indices.to_vec()),
            indices.len(),
            a.cols,
            out,
        )
    }

    /// Per-head dot-product attention scores, scaled by 1/sqrt(head_dim).
    pub fn multi_head_scores(&self, q: Tensor, k: Tensor, heads: usize) -> Tensor {
        assert!(
            q.rows == 1 && q.cols == k.cols && q.cols % heads == 0,
            "multi_head_scores: q ({}, {}), k ({}, {}), heads {heads}",
            q.rows,
            q.cols,
            k.rows,
            k.cols
        );
        let hd = q.cols / heads;
        let inv = 1.0 / (hd as f64).sqrt();
        let nodes = self.nodes.borrow();
        let qv = &nodes[q.id].value;
        let kv = &nodes[k.id].value;
        let mut out = vec![0.0; heads * k.rows];
        for h in 0..heads {
            for e in 0..k.rows {
                let mut s = 0.0;
                for d in 0..hd {
                    s += qv[h * hd + d] * kv[e * k.cols + h * hd + d];
                }
                out[h * k.rows + e] = s * inv;
            }
        }
        drop(nodes);
        self.push(
            Op::MultiHeadScores {
                q: q.id,
                k: k.id,
                heads,
            },
            heads,
            k.rows,
            out,
        )
    }

    /// Per-head weighted sum of value rows: out[1, h*d] from w[h, e], v[e, h*d].
    pub fn attn_combine(&self, w: Tensor, v: Tensor) -> Tensor {
        assert!(
            w.cols == v.rows && v.cols % w.rows == 0,
            "attn_combine: w ({}, {}), v ({}, {})",
            w.rows,
            w.cols,
            v.rows,
            v.cols
        );
        let heads = w.rows;
        let hd = v.cols / heads;
        let nodes = self.nodes.borrow();
        let wv = &nodes[w.id].value;
        let vv = &nodes[v.id].value;
        let mut out = vec![0.0; v.cols];
        for h in 0..heads {
            for e in 0..v.rows {
                let weight = wv[h * w.cols + e];
                for d in 0..hd {
                    out[h * hd + d] += weight * vv[e * v.cols + h * hd + d];
                }
            }
        }
        drop(nodes);
        self.push(Op::AttnCombine { w: w.id, v: v.id }, 1, v.cols, out)
    }

    pub fn sum_all(&self, a: Tensor) -> Tensor {
        let s = self.nodes.borrow()[a.id].value.iter().sum();
        self.push(Op::SumAll(a.id), 1, 1, vec![s])
    }

    pub fn mean_all(&self, a: Tensor) -> Tensor {
        self.scale(self.sum_all(a), 1.0 / a.len() as f64)
    }

    /// Reverse pass from a scalar loss; gradients accumulate additively into
    /// every node reachable from `loss`. Unreachable nodes keep zero.
    pub fn backward(&self, loss: Tensor) {
        assert!(
            loss.rows == 1 && loss.cols == 1,
            "backward: loss must be scalar, got ({}, {})",
            loss.rows,
            loss.cols
        );
        let mut nodes = self.nodes.borrow_mut();
        for n in nodes.iter_mut() {
            n.grad = vec![0.0; n.rows * n.cols];
        }
        nodes[loss.id].grad[0] = 1.0;

        for i in (0..nodes.len()).rev() {
            if nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = nodes[i].op.clone();
            let grad = std::mem::take(&mut nodes[i].grad);
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ar, ac) = (nodes[a].rows, nodes[a].cols);
                    let bc = nodes[b].cols;
                    let mut da = vec![0.0; ar * ac];
                    let mut db = vec![0.0; ac * bc];
                    matmul_nt(&grad, &nodes[b].value, &mut da, ar, bc, ac);
                    matmul_tn(&nodes[a].value, &grad, &mut db, ar, ac, bc);
                    add_into(&mut nodes[a].grad, &da);
                    add_into(&mut nodes[b].grad, &db);
                }
                Op::Add(a, b) => {
                    add_into(&mut nodes[a].grad, &grad);
                    add_into(&mut nodes[b].grad, &grad);
                }
                Op::AddRow(a, b) => {
                    add_into(&mut nodes[a].grad, &grad);
                    let cols = nodes[b].cols;
                    let rows = nodes[a].rows;
                    for r in 0..rows {
                        for c in 0..cols {
                            nodes[b].grad[c] += grad[r * cols + c];
                        }
                    }
                }
                Op::Sub(a, b) => {
                    add_into(&mut nodes[a].grad, &grad);
                    for (g, d) in nodes[b].grad.iter_mut().zip(&grad) {
                        *g -= d;
                    }
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = grad.iter().zip(&nodes[b].value).map(|(g, v)| g * v).collect();
                    let db: Vec<f64> = grad.iter().zip(&nodes[a].value).map(|(g, v)| g * v).collect();
                    add_into(&mut nodes[a].grad, &da);
                    add_into(&mut nodes[b].grad, &db);
                }
                Op::Scale(a, k) => {
                    for (g, d) in nodes[a].grad.iter_mut().zip(&grad) {
                        *g += d * k;
                    }
                }
                Op::AddScalar(a, _) => add_into(&mut nodes[a].grad, &grad),
                Op::Sigmoid(a) => {
                    let y = nodes[i].value.clone();
                    for ((g, d), s) in nodes[a].grad.iter_mut().zip(&grad).zip(&y) {
                        *g += d * s * (1.0 - s);
                    }
                }
                Op::Tanh(a) => {
                    let y = nodes[i].value.clone();
                    for ((g, d), t) in nodes[a].grad.iter_mut().zip(&grad).zip(&y) {
                        *g += d * (1.0 - t * t);
                    }
                }
                Op::Relu(a) => {
                    let x = nodes[a].value.clone();
                    for ((g, d), v) in nodes[a].grad.iter_mut().zip(&grad).zip(&x) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                }
                Op::Gelu(a) => {
                    let x = nodes[a].value.clone();
                    for ((g, d), v) in nodes[a].grad.iter_mut().zip(&grad).zip(&x) {
                        *g += d * gelu_grad(*v);
                    }
                }
                Op::Exp(a) => {
                    let y = nodes[i].value.clone();
                    for ((g, d), e) in nodes[a].grad.iter_mut().zip(&grad).zip(&y) {
                        *g += d * e;
                    }
                }
                Op::Ln(a) => {
                    let x = nodes[a].value.clone();
                    for ((g, d), v) in nodes[a].grad.iter_mut().zip(&grad).zip(&x) {
                        *g += d / v;
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let x = nodes[a].value.clone();
                    for ((g, d), v) in nodes[a].grad.iter_mut().zip(&grad).zip(&x) {
                        if *v >= lo && *v <= hi {
                            *g += d;
                        }
                    }
                }
                Op::SoftmaxMasked(a, mask) => {
                    let p = nodes[i].value.clone();
                    let cols = nodes[i].cols;
                    for r in 0..nodes[i].rows {
                        let prow = &p[r * cols..(r + 1) * cols];
                        let drow = &grad[r * cols..(r + 1) * cols];
                        let dot: f64 = prow.iter().zip(drow).map(|(p, d)| p * d).sum();
                        for c in 0..cols {
                            if mask[c] {
                                nodes[a].grad[r * cols + c] += prow[c] * (drow[c] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let cols = nodes[i].cols;
                    let rows = nodes[i].rows;
                    let n = cols as f64;
                    let xv = nodes[x].value.clone();
                    let gv = nodes[gain].value.clone();
                    for r in 0..rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let drow = &grad[r * cols..(r + 1) * cols];
                        let dxhat: Vec<f64> = drow.iter().zip(&gv).map(|(d, g)| d * g).collect();
                        let m1 = dxhat.iter().sum::<f64>() / n;
                        let m2 = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n;
                        for c in 0..cols {
                            nodes[x].grad[r * cols + c] += inv * (dxhat[c] - m1 - xhat[c] * m2);
                            nodes[gain].grad[c] += drow[c] * xhat[c];
                            nodes[bias].grad[c] += drow[c];
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (ac, bc) = (nodes[a].cols, nodes[b].cols);
                    let cols = ac + bc;
                    for r in 0..nodes[i].rows {
                        for c in 0..ac {
                            nodes[a].grad[r * ac + c] += grad[r * cols + c];
                        }
                        for c in 0..bc {
                            nodes[b].grad[r * bc + c] += grad[r * cols + ac + c];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p].rows * nodes[p].cols;
                        let slice = grad[offset..offset + len].to_vec();
                        add_into(&mut nodes[p].grad, &slice);
                        offset += len;
                    }
                }
                Op::SliceCols(a, start, _end) => {
                    let ac = nodes[a].cols;
                    let cols = nodes[i].cols;
                    for r in 0..nodes[i].rows {
                        for c in 0..cols {
                            nodes[a].grad[r * ac + start + c] += grad[r * cols + c];
                        }
                    }
                }
                Op::SliceRows(a, start, _end) => {
                    let cols = nodes[i].cols;
                    for r in 0..nodes[i].rows {
                        for c in 0..cols {
                            nodes[a].grad[(start + r) * cols + c] += grad[r * cols + c];
                        }
                    }
                }
                Op::GatherRows(a, indices) => {
                    let cols = nodes[i].cols;
                    for (r, &src) in indices.iter().enumerate() {
                        for c in 0..cols {
                            nodes[a].grad[src * cols + c] += grad[r * cols + c];
                        }
                    }
                }
                Op::MultiHeadScores { q, k, heads } => {
                    let hd = nodes[q].cols / heads;
                    let inv = 1.0 / (hd as f64).sqrt();
                    let rows = nodes[k].rows;
                    let kcols = nodes[k].cols;
                    let qv = nodes[q].value.clone();
                    let kv = nodes[k].value.clone();
                    for h in 0..heads {
                        for e in 0..rows {
                            let d = grad[h * rows + e] * inv;
                            if d == 0.0 {
                                continue;
                            }
                            for j in 0..hd {
                                nodes[q].grad[h * hd + j] += d * kv[e * kcols + h * hd + j];
                                nodes[k].grad[e * kcols + h * hd + j] += d * qv[h * hd + j];
                            }
                        }
                    }
                }
                Op::AttnCombine { w, v } => {
                    let heads = nodes[w].rows;
                    let e_count = nodes[v].rows;
                    let vcols = nodes[v].cols;
                    let hd = vcols / heads;
                    let wv = nodes[w].value.clone();
                    let vv = nodes[v].value.clone();
                    for h in 0..heads {
                        for e in 0..e_count {
                            let mut dw = 0.0;
                            let weight = wv[h * e_count + e];
                            for d in 0..hd {
                                let g = grad[h * hd + d];
                                dw += g * vv[e * vcols + h * hd + d];
                                nodes[v].grad[e * vcols + h * hd + d] += weight * g;
                            }
                            nodes[w].grad[h * e_count + e] += dw;
                        }
                    }
                }
                Op::SumAll(a) => {
                    let d = grad[0];
                    for g in nodes[a].grad.iter_mut() {
                        *g += d;
                    }
                }
            }
            nodes[i].grad = grad;
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// C[m,p] += A[m,n] * B[n,p]
fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            let crow = &mut c[i * p..(i + 1) * p];
            for j in 0..p {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// C[m,n] += A[m,p] * B[n,p]^T
fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..n {
            let brow = &b[j * p..(j + 1) * p];
            let mut s = 0.0;
            for k in 0..p {
                s += arow[k] * brow[k];
            }
            c[i * n + j] += s;
        }
    }
}

/// C[n,p] += A[m,n]^T * B[m,p]
fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    for k in 0..m {
        let brow = &b[k * p..(k + 1) * p];
        for i in 0..n {
            let aki = a[k * n + i];
            if aki == 0.0 {
                continue;
            }
            let crow = &mut c[i * p..(i + 1) * p];
            for j in 0..p {
                crow[j] += aki * brow[j];
            }
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
