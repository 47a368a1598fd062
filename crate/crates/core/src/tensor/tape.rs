//! Recording tape for reverse-mode differentiation.
//!
//! The tape is rebuilt for every forward pass and consumed by
//! [`Tape::backward`]. Nodes are appended in execution order, so walking them
//! in reverse id order is a valid topological order and each node is visited
//! exactly once.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{numel, NodeRef, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

// Constants of the tanh GELU approximation:
//   gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC_COEFF: f64 = 0.044_715;

enum Op {
    Leaf,
    Matmul { a: Tensor, b: Tensor },
    Transpose { a: Tensor },
    SoftmaxRows { a: Tensor },
    LayerNorm { x: Tensor, gain: Tensor, bias: Tensor, eps: f64 },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    AddScalar { a: Tensor },
    Scale { a: Tensor, c: f64 },
    Gelu { a: Tensor },
    Square { a: Tensor },
    SqrtElem { a: Tensor },
    Sum { a: Tensor, axes: Vec<usize> },
    Mean { a: Tensor, axes: Vec<usize> },
    L2Norm { a: Tensor, axes: Vec<usize> },
    Gather { a: Tensor, indices: Arc<Vec<usize>> },
    SliceRows { a: Tensor, start: usize },
    SliceCols { a: Tensor, start: usize },
    ConcatRows { parts: Vec<Tensor> },
    ConcatCols { parts: Vec<Tensor> },
    RepeatRows { a: Tensor },
    Reshape { a: Tensor },
    CrossEntropyMean { logits: Tensor, targets: Arc<Vec<usize>> },
}

struct Node {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    op: Op,
}

/// Recorded computation for one forward pass. Single writer; create one tape
/// per concurrent attack or training sample.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Register an input whose gradient is wanted. Returns a tracked copy;
    /// the original is untouched.
    pub fn leaf(&mut self, t: Tensor) -> Tensor {
        let node = NodeRef {
            tape: self.id,
            index: self.nodes.len(),
        };
        let values = t.values_arc();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            values: Arc::clone(&values),
            op: Op::Leaf,
        });
        Tensor::with_node(t.shape().to_vec(), values, node)
    }

    fn check_same_tape(&self, op: &'static str, inputs: &[&Tensor]) -> Result<(), TensorError> {
        for t in inputs {
            if let Some(n) = t.node() {
                if n.tape != self.id {
                    return Err(TensorError::TapeMismatch { op });
                }
            }
        }
        Ok(())
    }

    /// Record `op` when any input is tracked, otherwise return a constant.
    fn emit(&mut self, tracked: bool, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        let values = Arc::new(values);
        if !tracked {
            return Tensor::from_arc(shape, values);
        }
        let node = NodeRef {
            tape: self.id,
            index: self.nodes.len(),
        };
        self.nodes.push(Node {
            shape: shape.clone(),
            values: Arc::clone(&values),
            op,
        });
        Tensor::with_node(shape, values, node)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// `a [m,k] × b [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.check_same_tape("matmul", &[a, b])?;
        let (m, ka) = a.dims2("matmul")?;
        let (kb, n) = b.dims2("matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = matmul_nn(a.values(), b.values(), m, ka, n);
        let tracked = a.is_tracked() || b.is_tracked();
        Ok(self.emit(
            tracked,
            vec![m, n],
            out,
            Op::Matmul {
                a: a.clone(),
                b: b.clone(),
            },
        ))
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.check_same_tape("transpose", &[a])?;
        let (m, n) = a.dims2("transpose")?;
        let out = transpose(a.values(), m, n);
        Ok(self.emit(a.is_tracked(), vec![n, m], out, Op::Transpose { a: a.clone() }))
    }

    // ── Row-wise nonlinearities ─────────────────────────────────────

    /// Softmax over the trailing axis, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.check_same_tape("softmax_rows", &[a])?;
        if a.rank() == 0 {
            return Err(TensorError::InvalidAxis {
                op: "softmax_rows",
                axis: 0,
                rank: 0,
            });
        }
        let cols = *a.shape().last().unwrap();
        let mut out = a.values().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.emit(
            a.is_tracked(),
            a.shape().to_vec(),
            out,
            Op::SoftmaxRows { a: a.clone() },
        ))
    }

    /// Per-row normalization over the trailing axis followed by the affine
    /// map `gain * x̂ + bias`. Variance is the biased (population) estimate.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> Result<Tensor, TensorError> {
        self.check_same_tape("layer_norm", &[x, gain, bias])?;
        if x.rank() == 0 {
            return Err(TensorError::InvalidAxis {
                op: "layer_norm",
                axis: 0,
                rank: 0,
            });
        }
        let d = *x.shape().last().unwrap();
        if gain.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        if bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let g = gain.values();
        let b = bias.values();
        let mut out = Vec::with_capacity(x.len());
        for row in x.values().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (i, v) in row.iter().enumerate() {
                out.push((v - mean) * inv * g[i] + b[i]);
            }
        }
        let tracked = x.is_tracked() || gain.is_tracked() || bias.is_tracked();
        Ok(self.emit(
            tracked,
            x.shape().to_vec(),
            out,
            Op::LayerNorm {
                x: x.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                eps,
            },
        ))
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn binary(
        &mut self,
        op_name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor, TensorError> {
        self.check_same_tape(op_name, &[a, b])?;
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out: Vec<f64> = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = a.is_tracked() || b.is_tracked();
        Ok(self.emit(tracked, a.shape().to_vec(), out, op))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(
            "add",
            a,
            b,
            |x, y| x + y,
            Op::Add {
                a: a.clone(),
                b: b.clone(),
            },
        )
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(
            "sub",
            a,
            b,
            |x, y| x - y,
            Op::Sub {
                a: a.clone(),
                b: b.clone(),
            },
        )
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(
            "mul",
            a,
            b,
            |x, y| x * y,
            Op::Mul {
                a: a.clone(),
                b: b.clone(),
            },
        )
    }

    fn unary(&mut self, a: &Tensor, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let out: Vec<f64> = a.values().iter().map(|&x| f(x)).collect();
        self.emit(a.is_tracked(), a.shape().to_vec(), out, op)
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        self.unary(a, |x| x + c, Op::AddScalar { a: a.clone() })
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        self.unary(a, |x| x * c, Op::Scale { a: a.clone(), c })
    }

    /// tanh-approximated GELU; see the module constants for the exact
    /// coefficients so forward values are reproducible bit-for-bit.
    pub fn gelu(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, gelu_value, Op::Gelu { a: a.clone() })
    }

    pub fn square(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, |x| x * x, Op::Square { a: a.clone() })
    }

    /// Elementwise square root. Domain: x ≥ 0 (gradient defined for x > 0).
    pub fn sqrt_elem(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, f64::sqrt, Op::SqrtElem { a: a.clone() })
    }

    // ── Reductions ──────────────────────────────────────────────────

    fn reduce_axes(&self, op: &'static str, a: &Tensor, axes: Option<&[usize]>) -> Result<Vec<usize>, TensorError> {
        let rank = a.rank();
        let mut list: Vec<usize> = match axes {
            None => (0..rank).collect(),
            Some(ax) => ax.to_vec(),
        };
        list.sort_unstable();
        list.dedup();
        if let Some(&bad) = list.iter().find(|&&ax| ax >= rank) {
            return Err(TensorError::InvalidAxis { op, axis: bad, rank });
        }
        Ok(list)
    }

    /// Sum over `axes` (all axes when `None`, yielding a scalar).
    pub fn sum(&mut self, a: &Tensor, axes: Option<&[usize]>) -> Result<Tensor, TensorError> {
        self.check_same_tape("sum", &[a])?;
        let axes = self.reduce_axes("sum", a, axes)?;
        let (out_shape, map) = reduction_map(a.shape(), &axes);
        let mut out = vec![0.0; numel(&out_shape)];
        for (i, &v) in a.values().iter().enumerate() {
            out[map[i]] += v;
        }
        Ok(self.emit(a.is_tracked(), out_shape, out, Op::Sum { a: a.clone(), axes }))
    }

    /// Mean over `axes` (all axes when `None`).
    pub fn mean(&mut self, a: &Tensor, axes: Option<&[usize]>) -> Result<Tensor, TensorError> {
        self.check_same_tape("mean", &[a])?;
        let axes = self.reduce_axes("mean", a, axes)?;
        let (out_shape, map) = reduction_map(a.shape(), &axes);
        let group = group_size(a.shape(), &axes);
        let mut out = vec![0.0; numel(&out_shape)];
        for (i, &v) in a.values().iter().enumerate() {
            out[map[i]] += v;
        }
        for v in &mut out {
            *v /= group as f64;
        }
        Ok(self.emit(a.is_tracked(), out_shape, out, Op::Mean { a: a.clone(), axes }))
    }

    /// Euclidean norm over `axes` (all axes when `None`): sqrt(Σ v²) per
    /// group. The gradient v/‖v‖ is defined as zero at ‖v‖ = 0.
    pub fn l2_norm(&mut self, a: &Tensor, axes: Option<&[usize]>) -> Result<Tensor, TensorError> {
        self.check_same_tape("l2_norm", &[a])?;
        let axes = self.reduce_axes("l2_norm", a, axes)?;
        let (out_shape, map) = reduction_map(a.shape(), &axes);
        let mut out = vec![0.0; numel(&out_shape)];
        for (i, &v) in a.values().iter().enumerate() {
            out[map[i]] += v * v;
        }
        for v in &mut out {
            *v = v.sqrt();
        }
        Ok(self.emit(a.is_tracked(), out_shape, out, Op::L2Norm { a: a.clone(), axes }))
    }

    // ── Structure ───────────────────────────────────────────────────

    /// `out[j] = a.flat[indices[j]]`, reshaped to `out_shape`. Backward is a
    /// scatter-add, so repeated indices accumulate.
    pub fn gather(
        &mut self,
        a: &Tensor,
        indices: Arc<Vec<usize>>,
        out_shape: Vec<usize>,
    ) -> Result<Tensor, TensorError> {
        self.check_same_tape("gather", &[a])?;
        if numel(&out_shape) != indices.len() {
            return Err(TensorError::LengthMismatch {
                op: "gather",
                shape: out_shape,
                expected: indices.len(),
                got: 0,
            });
        }
        let src = a.values();
        let mut out = Vec::with_capacity(indices.len());
        for &ix in indices.iter() {
            if ix >= src.len() {
                return Err(TensorError::GatherOutOfBounds {
                    index: ix,
                    len: src.len(),
                });
            }
            out.push(src[ix]);
        }
        Ok(self.emit(
            a.is_tracked(),
            out_shape,
            out,
            Op::Gather {
                a: a.clone(),
                indices,
            },
        ))
    }

    pub fn slice_rows(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor, TensorError> {
        self.check_same_tape("slice_rows", &[a])?;
        let (m, n) = a.dims2("slice_rows")?;
        if start + len > m {
            return Err(TensorError::RangeOutOfBounds {
                op: "slice_rows",
                start,
                len,
                extent: m,
            });
        }
        let out = a.values()[start * n..(start + len) * n].to_vec();
        Ok(self.emit(a.is_tracked(), vec![len, n], out, Op::SliceRows { a: a.clone(), start }))
    }

    pub fn slice_cols(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor, TensorError> {
        self.check_same_tape("slice_cols", &[a])?;
        let (m, n) = a.dims2("slice_cols")?;
        if start + len > n {
            return Err(TensorError::RangeOutOfBounds {
                op: "slice_cols",
                start,
                len,
                extent: n,
            });
        }
        let src = a.values();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        Ok(self.emit(a.is_tracked(), vec![m, len], out, Op::SliceCols { a: a.clone(), start }))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        self.check_same_tape("concat_rows", parts)?;
        let (_, n) = parts[0].dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (pm, pn) = p.dims2("concat_rows")?;
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += pm;
            out.extend_from_slice(p.values());
        }
        let tracked = parts.iter().any(|p| p.is_tracked());
        let parts: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(self.emit(tracked, vec![rows, n], out, Op::ConcatRows { parts }))
    }

    /// Stack matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        self.check_same_tape("concat_cols", parts)?;
        let (m, _) = parts[0].dims2("concat_cols")?;
        let mut cols = 0;
        for p in parts {
            let (pm, pn) = p.dims2("concat_cols")?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            cols += pn;
        }
        let mut out = Vec::with_capacity(m * cols);
        for r in 0..m {
            for p in parts {
                let pn = p.shape()[1];
                out.extend_from_slice(&p.values()[r * pn..(r + 1) * pn]);
            }
        }
        let tracked = parts.iter().any(|p| p.is_tracked());
        let parts: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(self.emit(tracked, vec![m, cols], out, Op::ConcatCols { parts }))
    }

    /// Tile a vector `[d]` into `n` identical rows `[n, d]` (bias broadcast).
    pub fn repeat_rows(&mut self, a: &Tensor, n: usize) -> Result<Tensor, TensorError> {
        self.check_same_tape("repeat_rows", &[a])?;
        if a.rank() != 1 {
            return Err(TensorError::NotAMatrix {
                op: "repeat_rows",
                shape: a.shape().to_vec(),
            });
        }
        let d = a.len();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(a.values());
        }
        Ok(self.emit(a.is_tracked(), vec![n, d], out, Op::RepeatRows { a: a.clone() }))
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        self.check_same_tape("reshape", &[a])?;
        if numel(&shape) != a.len() {
            return Err(TensorError::LengthMismatch {
                op: "reshape",
                shape,
                expected: a.len(),
                got: 0,
            });
        }
        let out = a.values().to_vec();
        Ok(self.emit(a.is_tracked(), shape, out, Op::Reshape { a: a.clone() }))
    }

    /// Mean cross-entropy of row-wise logits `[n, c]` against integer
    /// targets, fused with a stabilized log-softmax.
    pub fn cross_entropy_mean(
        &mut self,
        logits: &Tensor,
        targets: Arc<Vec<usize>>,
    ) -> Result<Tensor, TensorError> {
        self.check_same_tape("cross_entropy", &[logits])?;
        let (n, c) = logits.dims2("cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::LengthMismatch {
                op: "cross_entropy",
                shape: vec![n],
                expected: n,
                got: targets.len(),
            });
        }
        let vals = logits.values();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::TargetOutOfRange { target: t, classes: c });
            }
            let row = &vals[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = vec![total / n as f64];
        Ok(self.emit(
            logits.is_tracked(),
            Vec::new(),
            out,
            Op::CrossEntropyMean {
                logits: logits.clone(),
                targets,
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients are
    /// returned for every recorded tensor, leaves included.
    pub fn backward(self, loss: &Tensor) -> Result<Gradients, TensorError> {
        let node = loss.node().ok_or(TensorError::NotOnTape)?;
        if node.tape != self.id || node.index >= self.nodes.len() {
            return Err(TensorError::NotOnTape);
        }
        if loss.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }

        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoint[node.index] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            let d_out = match adjoint[idx].take() {
                Some(d) => d,
                None => continue,
            };
            let put = &mut adjoint;
            // Re-insert: downstream accumulation already happened (reverse
            // order), so the finished adjoint is stored for the result map.
            let node = &self.nodes[idx];
            backward_op(node, &d_out, put);
            adjoint[idx] = Some(d_out);
        }

        let grads = self
            .nodes
            .iter()
            .zip(adjoint)
            .map(|(node, adj)| {
                adj.map(|values| Tensor::from_arc(node.shape.clone(), Arc::new(values)))
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

/// Gradient map produced by [`Tape::backward`], queried by tracked tensor.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, when `t` was recorded on the
    /// tape that produced this map and gradient flowed to it.
    pub fn wrt(&self, t: &Tensor) -> Option<&Tensor> {
        let node = t.node()?;
        if node.tape != self.tape {
            return None;
        }
        self.grads.get(node.index)?.as_ref()
    }
}

fn accumulate(adjoint: &mut [Option<Vec<f64>>], t: &Tensor, contrib: impl Fn(&mut [f64])) {
    if let Some(node) = t.node() {
        let slot = &mut adjoint[node.index];
        let buf = slot.get_or_insert_with(|| vec![0.0; t.len()]);
        contrib(buf);
    }
}

fn backward_op(node: &Node, d_out: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.is_tracked() {
                let da = matmul_nt(d_out, b.values(), m, n, k);
                accumulate(adjoint, a, |buf| add_into(buf, &da));
            }
            if b.is_tracked() {
                let db = matmul_tn(a.values(), d_out, m, k, n);
                accumulate(adjoint, b, |buf| add_into(buf, &db));
            }
        }
        Op::Transpose { a } => {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            // d_out has shape [n, m]; transpose it back.
            let da = transpose(d_out, n, m);
            accumulate(adjoint, a, |buf| add_into(buf, &da));
        }
        Op::SoftmaxRows { a } => {
            let cols = *node.shape.last().unwrap();
            let y = &node.values;
            let mut da = vec![0.0; y.len()];
            for r in 0..y.len() / cols {
                let base = r * cols;
                let yr = &y[base..base + cols];
                let dr = &d_out[base..base + cols];
                let dot: f64 = yr.iter().zip(dr).map(|(&yv, &dv)| yv * dv).sum();
                for c in 0..cols {
                    da[base + c] = yr[c] * (dr[c] - dot);
                }
            }
            accumulate(adjoint, a, |buf| add_into(buf, &da));
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let d = *x.shape().last().unwrap();
            let xv = x.values();
            let g = gain.values();
            let rows = xv.len() / d;
            let mut dx = vec![0.0; xv.len()];
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            for r in 0..rows {
                let base = r * d;
                let row = &xv[base..base + d];
                let dy = &d_out[base..base + d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                // x̂ = (x − μ)·inv; dL/dx = inv·(gdy − mean(gdy) − x̂·mean(gdy·x̂))
                let mut mean_gdy = 0.0;
                let mut mean_gdy_xhat = 0.0;
                for i in 0..d {
                    let xhat = (row[i] - mean) * inv;
                    let gdy = g[i] * dy[i];
                    mean_gdy += gdy;
                    mean_gdy_xhat += gdy * xhat;
                    dg[i] += dy[i] * xhat;
                    db[i] += dy[i];
                }
                mean_gdy /= d as f64;
                mean_gdy_xhat /= d as f64;
                for i in 0..d {
                    let xhat = (row[i] - mean) * inv;
                    dx[base + i] = inv * (g[i] * dy[i] - mean_gdy - xhat * mean_gdy_xhat);
                }
            }
            accumulate(adjoint, x, |buf| add_into(buf, &dx));
            accumulate(adjoint, gain, |buf| add_into(buf, &dg));
            accumulate(adjoint, bias, |buf| add_into(buf, &db));
        }
        Op::Add { a, b } => {
            accumulate(adjoint, a, |buf| add_into(buf, d_out));
            accumulate(adjoint, b, |buf| add_into(buf, d_out));
        }
        Op::Sub { a, b } => {
            accumulate(adjoint, a, |buf| add_into(buf, d_out));
            accumulate(adjoint, b, |buf| {
                for (o, &d) in buf.iter_mut().zip(d_out) {
                    *o -= d;
                }
            });
        }
        Op::Mul { a, b } => {
            if a.is_tracked() {
                let bv = b.values();
                accumulate(adjoint, a, |buf| {
                    for ((o, &d), &x) in buf.iter_mut().zip(d_out).zip(bv) {
                        *o += d * x;
                    }
                });
            }
            if b.is_tracked() {
                let av = a.values();
                accumulate(adjoint, b, |buf| {
                    for ((o, &d), &x) in buf.iter_mut().zip(d_out).zip(av) {
                        *o += d * x;
                    }
                });
            }
        }
        Op::AddScalar { a } => {
            accumulate(adjoint, a, |buf| add_into(buf, d_out));
        }
        Op::Scale { a, c } => {
            accumulate(adjoint, a, |buf| {
                for (o, &d) in buf.iter_mut().zip(d_out) {
                    *o += c * d;
                }
            });
        }
        Op::Gelu { a } => {
            let av = a.values();
            accumulate(adjoint, a, |buf| {
                for ((o, &d), &x) in buf.iter_mut().zip(d_out).zip(av) {
                    *o += d * gelu_grad(x);
                }
            });
        }
        Op::Square { a } => {
            let av = a.values();
            accumulate(adjoint, a, |buf| {
                for ((o, &d), &x) in buf.iter_mut().zip(d_out).zip(av) {
                    *o += d * 2.0 * x;
                }
            });
        }
        Op::SqrtElem { a } => {
            let y = &node.values;
            accumulate(adjoint, a, |buf| {
                for ((o, &d), &s) in buf.iter_mut().zip(d_out).zip(y.iter()) {
                    *o += d * 0.5 / s;
                }
            });
        }
        Op::Sum { a, axes } => {
            let (_, map) = reduction_map(a.shape(), axes);
            accumulate(adjoint, a, |buf| {
                for (i, o) in buf.iter_mut().enumerate() {
                    *o += d_out[map[i]];
                }
            });
        }
        Op::Mean { a, axes } => {
            let (_, map) = reduction_map(a.shape(), axes);
            let scale = 1.0 / group_size(a.shape(), axes) as f64;
            accumulate(adjoint, a, |buf| {
                for (i, o) in buf.iter_mut().enumerate() {
                    *o += d_out[map[i]] * scale;
                }
            });
        }
        Op::L2Norm { a, axes } => {
            let (_, map) = reduction_map(a.shape(), axes);
            let norms = &node.values;
            let av = a.values();
            accumulate(adjoint, a, |buf| {
                for (i, o) in buf.iter_mut().enumerate() {
                    let norm = norms[map[i]];
                    if norm > 0.0 {
                        *o += d_out[map[i]] * av[i] / norm;
                    }
                    // ‖v‖ = 0: gradient defined as zero.
                }
            });
        }
        Op::Gather { a, indices } => {
            accumulate(adjoint, a, |buf| {
                for (j, &ix) in indices.iter().enumerate() {
                    buf[ix] += d_out[j];
                }
            });
        }
        Op::SliceRows { a, start } => {
            let n = a.shape()[1];
            accumulate(adjoint, a, |buf| {
                add_into(&mut buf[start * n..start * n + d_out.len()], d_out);
            });
        }
        Op::SliceCols { a, start } => {
            let n = a.shape()[1];
            let len = node.shape[1];
            accumulate(adjoint, a, |buf| {
                for r in 0..node.shape[0] {
                    add_into(
                        &mut buf[r * n + start..r * n + start + len],
                        &d_out[r * len..(r + 1) * len],
                    );
                }
            });
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for p in parts {
                let plen = p.len();
                accumulate(adjoint, p, |buf| {
                    add_into(buf, &d_out[offset..offset + plen]);
                });
                offset += plen;
            }
        }
        Op::ConcatCols { parts } => {
            let m = node.shape[0];
            let total = node.shape[1];
            let mut col0 = 0;
            for p in parts {
                let pn = p.shape()[1];
                accumulate(adjoint, p, |buf| {
                    for r in 0..m {
                        add_into(
                            &mut buf[r * pn..(r + 1) * pn],
                            &d_out[r * total + col0..r * total + col0 + pn],
                        );
                    }
                });
                col0 += pn;
            }
        }
        Op::RepeatRows { a } => {
            let d = a.len();
            accumulate(adjoint, a, |buf| {
                for row in d_out.chunks(d) {
                    add_into(buf, row);
                }
            });
        }
        Op::Reshape { a } => {
            accumulate(adjoint, a, |buf| add_into(buf, d_out));
        }
        Op::CrossEntropyMean { logits, targets } => {
            let c = logits.shape()[1];
            let n = targets.len();
            let seed = d_out[0] / n as f64;
            let vals = logits.values();
            accumulate(adjoint, logits, |buf| {
                for (r, &t) in targets.iter().enumerate() {
                    let row = &vals[r * c..(r + 1) * c];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for i in 0..c {
                        let p = (row[i] - max).exp() / sum;
                        let onehot = if i == t { 1.0 } else { 0.0 };
                        buf[r * c + i] += seed * (p - onehot);
                    }
                }
            });
        }
    }
}

fn add_into(out: &mut [f64], src: &[f64]) {
    for (o, &s) in out.iter_mut().zip(src) {
        *o += s;
    }
}

// ── Kernels ─────────────────────────────────────────────────────────

/// out[m,n] = a[m,k] · b[k,n]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// out[m,p] = x[m,q] · y[p,q]ᵀ (dot products of rows)
fn matmul_nt(x: &[f64], y: &[f64], m: usize, q: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let xrow = &x[i * q..(i + 1) * q];
        let orow = &mut out[i * p..(i + 1) * p];
        for (l, o) in orow.iter_mut().enumerate() {
            let yrow = &y[l * q..(l + 1) * q];
            *o = xrow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
        }
    }
    out
}

/// out[k,n] = x[m,k]ᵀ · y[m,n]
fn matmul_tn(x: &[f64], y: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let yrow = &y[i * n..(i + 1) * n];
        for p in 0..k {
            let xip = x[i * k + p];
            if xip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &yv) in orow.iter_mut().zip(yrow) {
                *o += xip * yv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn gelu_value(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEFF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEFF * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// For each flat input index, the flat output index of its reduction group,
/// plus the reduced output shape (reduced axes removed).
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let keep: Vec<usize> = (0..rank).filter(|ax| !axes.contains(ax)).collect();
    let out_shape: Vec<usize> = keep.iter().map(|&ax| shape[ax]).collect();

    let total = numel(shape);
    let mut map = vec![0usize; total];
    if total == 0 {
        return (out_shape, map);
    }
    // Strides of the kept axes inside the output tensor.
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1;
    for &ax in keep.iter().rev() {
        out_strides[ax] = acc;
        acc *= shape[ax];
    }
    let mut index = vec![0usize; rank];
    for slot in map.iter_mut() {
        let mut out_idx = 0;
        for (ax, &i) in index.iter().enumerate() {
            out_idx += i * out_strides[ax];
        }
        *slot = out_idx;
        // Odometer increment over the full input shape.
        for ax in (0..rank).rev() {
            index[ax] += 1;
            if index[ax] < shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    (out_shape, map)
}

fn group_size(shape: &[usize], axes: &[usize]) -> usize {
    axes.iter().map(|&ax| shape[ax]).product::<usize>().max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], vals: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), vals.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]);
        let out = tape.matmul(&eye, &b).unwrap();
        assert_eq!(out.values(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.values(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 1]"), "{msg}");
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_b_transpose() {
        // d sum(AB) / dA = 1 · Bᵀ, i.e. row i gets the row sums of Bᵀ.
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[0.5, -1.0, 2.0, 0.25]));
        let b = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let prod = tape.matmul(&a, &b).unwrap();
        let loss = tape.sum(&prod, None).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let ga = grads.wrt(&a).unwrap();
        // Row sums of B: [6, 15] repeated for both rows of A.
        assert_eq!(ga.values(), &[6.0, 15.0, 6.0, 15.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let s = tape.softmax_rows(&t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(s.values(), &[0.5, 0.5]);
        let big = tape.softmax_rows(&t(&[2], &[1000.0, 1000.0])).unwrap();
        assert_eq!(big.values(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form_on_logs() {
        let mut tape = Tape::new();
        let logits = t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let s = tape.softmax_rows(&logits).unwrap();
        for (got, want) in s.values().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = t(&[1, 3], &[1.0, 1.0, 1.0]);
        let gain = t(&[3], &[1.0, 1.0, 1.0]);
        let bias = Tensor::zeros(vec![3]);
        let out = tape.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        for v in out.values() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let mut tape = Tape::new();
        let x = t(&[1, 2], &[-1.0, 1.0]);
        let gain = t(&[2], &[1.0, 1.0]);
        let bias = Tensor::zeros(vec![2]);
        let out = tape.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        assert!((out.values()[0] + 1.0).abs() < 1e-4);
        assert!((out.values()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(tape.add(&a, &b).unwrap().values(), &[4.0, 6.0]);
        assert_eq!(tape.gelu(&Tensor::scalar(0.0)).item(), 0.0);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(&x);
        let grads = tape.backward(&y).unwrap();
        let g = grads.wrt(&x).unwrap().item();
        assert_eq!(g, 6.0);
        // Central difference oracle.
        let f = |v: f64| v * v;
        let numeric = (f(3.001) - f(2.999)) / 0.002;
        assert!((g - numeric).abs() < 1e-8);
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::new();
        let v = t(&[2], &[3.0, 4.0]);
        assert_eq!(tape.l2_norm(&v, None).unwrap().item(), 5.0);
        assert_eq!(tape.mean(&t(&[2], &[2.0, 4.0]), None).unwrap().item(), 3.0);
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(&x, None).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().values(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn l2_norm_zero_vector_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![3]));
        let n = tape.l2_norm(&x, None).unwrap();
        let grads = tape.backward(&n).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn axis_reductions() {
        let mut tape = Tape::new();
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rows = tape.sum(&a, Some(&[1])).unwrap();
        assert_eq!(rows.shape(), &[2]);
        assert_eq!(rows.values(), &[6.0, 15.0]);
        let cols = tape.mean(&a, Some(&[0])).unwrap();
        assert_eq!(cols.values(), &[2.5, 3.5, 4.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_tensors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.scale(&x, 2.0);
        let err = tape.backward(&y).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));

        let tape2 = Tape::new();
        let constant = Tensor::scalar(1.0);
        assert!(matches!(
            tape2.backward(&constant).unwrap_err(),
            TensorError::NotOnTape
        ));
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[4], &[0.3, -1.2, 2.4, 0.9]));
            let s = tape.softmax_rows(&x).unwrap();
            let sq = tape.square(&s);
            let loss = tape.sum(&sq, None).unwrap();
            let grads = tape.backward(&loss).unwrap();
            grads.wrt(&x).unwrap().values().to_vec()
        };
        let a = build();
        let b = build();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let mut tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let before = a.values().to_vec();
        let _ = tape.matmul(&a, &a).unwrap();
        let _ = tape.softmax_rows(&a).unwrap();
        let _ = tape.gelu(&a);
        assert_eq!(a.values(), &before[..]);
    }

    #[test]
    fn gather_and_scatter_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[10.0, 20.0, 30.0, 40.0]));
        let idx = Arc::new(vec![3usize, 0, 3]);
        let g = tape.gather(&x, idx, vec![3]).unwrap();
        assert_eq!(g.values(), &[40.0, 10.0, 40.0]);
        let loss = tape.sum(&g, None).unwrap();
        let grads = tape.backward(&loss).unwrap();
        // Index 3 was used twice, so the adjoint accumulates.
        assert_eq!(grads.wrt(&x).unwrap().values(), &[1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_slice_roundtrip_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let cat = tape.concat_rows(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[3, 2]);
        let bottom = tape.slice_rows(&cat, 1, 2).unwrap();
        let loss = tape.sum(&bottom, None).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&a).unwrap().values(), &[0.0, 0.0]);
        assert_eq!(grads.wrt(&b).unwrap().values(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut tape = Tape::new();
        let logits = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let ce = tape
            .cross_entropy_mean(&logits, Arc::new(vec![2]))
            .unwrap();
        let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((ce.item() - (lse - 3.0)).abs() < 1e-12);
    }
}
