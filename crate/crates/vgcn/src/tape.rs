//! Wengert tape: reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Ops are methods on [`Tape`]. An op is recorded only when at least one
//! input is tracked; untracked inputs are interned as constants at record
//! time. `backward` replays the tape once in reverse, visiting each node at
//! most once, and writes gradients into every `requires_grad` leaf. The tape
//! is consumed by `backward`; recording on a spent tape panics.
//!
//! A tape and all tensors recorded on it are confined to one thread
//! (enforced by `Rc`/`RefCell` being `!Send`). Detached tensors are plain
//! immutable values.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{GradCell, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Tanh,
    Softplus,
    Exp,
    Neg,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Unary {
        kind: UnaryKind,
        x: NodeId,
    },
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    AddScalar {
        x: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        plan: MatmulPlan,
    },
    Transpose {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    MeanAxis {
        x: NodeId,
        axis: usize,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
    TemporalConv {
        x: NodeId,
        k: NodeId,
        stride: usize,
    },
    StrideTime {
        x: NodeId,
        stride: usize,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        label: usize,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    grad_cell: Option<GradCell>,
}

/// Reverse-mode AD tape. Explicitly scoped; one per forward/backward pass.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

struct TapeInner {
    nodes: Vec<Node>,
    spent: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                spent: false,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a trainable leaf. The returned tensor shares the input's
    /// values, requires grad, and receives its gradient on `backward`.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let cell: GradCell = Rc::new(RefCell::new(None));
        let id = self.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: t.data_rc(),
            grad_cell: Some(Rc::clone(&cell)),
        });
        Tensor::leaf_from(t, id, cell)
    }

    fn push(&self, node: Node) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        assert!(!inner.spent, "tape already consumed by backward");
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    /// Node id of `t` on this tape, interning it as a constant if untracked.
    fn intern(&self, t: &Tensor) -> NodeId {
        match t.node {
            Some(id) => {
                assert!(
                    id < self.inner.borrow().nodes.len(),
                    "tensor node id out of range for this tape"
                );
                id
            }
            None => self.push(Node {
                op: Op::Const,
                shape: t.shape().to_vec(),
                value: t.data_rc(),
                grad_cell: None,
            }),
        }
    }

    fn emit(&self, op_of: impl FnOnce(&Self) -> Op, shape: Vec<usize>, values: Vec<f64>, tracked: bool) -> Tensor {
        let data = Rc::new(values);
        if tracked {
            let op = op_of(self);
            let id = self.push(Node {
                op,
                shape: shape.clone(),
                value: Rc::clone(&data),
                grad_cell: None,
            });
            Tensor::tracked(shape, data, id)
        } else {
            Tensor::from_parts(shape, data)
        }
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn unary(&self, kind: UnaryKind, x: &Tensor) -> Tensor {
        let v: Vec<f64> = x.values().iter().map(|&a| unary_fwd(kind, a)).collect();
        let tracked = x.requires_grad();
        self.emit(
            |t| Op::Unary { kind, x: t.intern(x) },
            x.shape().to_vec(),
            v,
            tracked,
        )
    }

    pub fn relu(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn tanh(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn softplus(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Softplus, x)
    }
    pub fn exp(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn neg(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn sqrt(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn scale(&self, x: &Tensor, c: f64) -> Tensor {
        let v: Vec<f64> = x.values().iter().map(|&a| a * c).collect();
        let tracked = x.requires_grad();
        self.emit(|t| Op::Scale { x: t.intern(x), c }, x.shape().to_vec(), v, tracked)
    }

    pub fn add_scalar(&self, x: &Tensor, c: f64) -> Tensor {
        let v: Vec<f64> = x.values().iter().map(|&a| a + c).collect();
        let tracked = x.requires_grad();
        self.emit(|t| Op::AddScalar { x: t.intern(x) }, x.shape().to_vec(), v, tracked)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Binary op with broadcasting limited to: equal shapes, scalar
    /// broadcast, or one operand's shape equal to the trailing suffix of
    /// the other's (leading-dimension batch broadcast).
    pub fn binary(&self, kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let plan = broadcast_plan(a.shape(), b.shape())?;
        let out_shape = plan.out_shape.clone();
        let n: usize = out_shape.iter().product();
        let av = a.values();
        let bv = b.values();
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            let x = av[plan.index_a(i)];
            let y = bv[plan.index_b(i)];
            v.push(binary_fwd(kind, x, y));
        }
        let tracked = a.requires_grad() || b.requires_grad();
        Ok(self.emit(
            |t| Op::Binary {
                kind,
                a: t.intern(a),
                b: t.intern(b),
            },
            out_shape,
            v,
            tracked,
        ))
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// Matrix product. Both operands must have rank >= 2; leading
    /// dimensions broadcast batch-wise.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let plan = matmul_plan(a.shape(), b.shape())?;
        let v = matmul_forward(&plan, a.values(), b.values());
        let out_shape = plan.out_shape();
        let tracked = a.requires_grad() || b.requires_grad();
        Ok(self.emit(
            |t| Op::MatMul {
                a: t.intern(a),
                b: t.intern(b),
                plan: plan.clone(),
            },
            out_shape,
            v,
            tracked,
        ))
    }

    /// 2D transpose.
    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 {
            return Err(Error::shape(format!(
                "transpose expects a matrix, got shape {:?}",
                x.shape()
            )));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let xv = x.values();
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = xv[i * c + j];
            }
        }
        let tracked = x.requires_grad();
        Ok(self.emit(
            |t| Op::Transpose {
                x: t.intern(x),
                rows: r,
                cols: c,
            },
            vec![c, r],
            v,
            tracked,
        ))
    }

    pub fn reshape(&self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != x.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                x.shape(),
                x.numel(),
                shape,
                n
            )));
        }
        let tracked = x.requires_grad();
        Ok(self.emit(|t| Op::Reshape { x: t.intern(x) }, shape, x.values().to_vec(), tracked))
    }

    // ── reductions and normalizations ────────────────────────────────

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.shape().len() {
            return Err(Error::Index(format!(
                "softmax axis {} out of range for shape {:?}",
                axis,
                x.shape()
            )));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let xv = x.values();
        let mut v = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(xv[at(j)]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = (xv[at(j)] - mx).exp();
                    v[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    v[at(j)] /= z;
                }
            }
        }
        let tracked = x.requires_grad();
        Ok(self.emit(
            |t| Op::Softmax { x: t.intern(x), axis },
            x.shape().to_vec(),
            v,
            tracked,
        ))
    }

    /// Mean over one axis; that axis is removed from the shape.
    pub fn mean_axis(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.shape().len() {
            return Err(Error::Index(format!(
                "mean axis {} out of range for shape {:?}",
                axis,
                x.shape()
            )));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let xv = x.values();
        let mut v = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    v[o * inner + i] += xv[(o * len + j) * inner + i];
                }
            }
        }
        for e in v.iter_mut() {
            *e /= len as f64;
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let tracked = x.requires_grad();
        Ok(self.emit(|t| Op::MeanAxis { x: t.intern(x), axis }, shape, v, tracked))
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&self, x: &Tensor) -> Tensor {
        let s: f64 = x.values().iter().sum();
        let tracked = x.requires_grad();
        self.emit(|t| Op::Sum { x: t.intern(x) }, vec![], vec![s], tracked)
    }

    /// Mean of all elements (scalar output).
    pub fn mean(&self, x: &Tensor) -> Tensor {
        let s: f64 = x.values().iter().sum();
        let n = x.numel() as f64;
        let tracked = x.requires_grad();
        self.emit(|t| Op::Mean { x: t.intern(x) }, vec![], vec![s / n], tracked)
    }

    // ── structured ops ───────────────────────────────────────────────

    /// 1D convolution over the time axis of a `[C_in, T, N]` tensor with a
    /// `[C_out, C_in, K_t]` kernel. `K_t` must be odd; zero padding of
    /// `(K_t-1)/2` keeps `T' = ceil(T / stride)`. Node columns are
    /// convolved independently.
    pub fn temporal_conv(&self, x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
        let (c_out, t_out) = temporal_conv_check(x.shape(), kernel.shape(), stride)?;
        let n = x.shape()[2];
        let v = temporal_conv_forward(
            x.values(),
            kernel.values(),
            x.shape()[0],
            x.shape()[1],
            n,
            c_out,
            kernel.shape()[2],
            stride,
        );
        let tracked = x.requires_grad() || kernel.requires_grad();
        Ok(self.emit(
            |t| Op::TemporalConv {
                x: t.intern(x),
                k: t.intern(kernel),
                stride,
            },
            vec![c_out, t_out, n],
            v,
            tracked,
        ))
    }

    /// Subsample the time axis of a `[C, T, N]` tensor, keeping frames at
    /// multiples of `stride` (used for residual paths of strided blocks).
    pub fn stride_time(&self, x: &Tensor, stride: usize) -> Result<Tensor> {
        if x.shape().len() != 3 {
            return Err(Error::shape(format!(
                "stride_time expects [C,T,N], got {:?}",
                x.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::config("stride must be >= 1"));
        }
        let (c, t_in, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let t_out = t_in.div_ceil(stride);
        let xv = x.values();
        let mut v = vec![0.0; c * t_out * n];
        for ci in 0..c {
            for tp in 0..t_out {
                let src = (ci * t_in + tp * stride) * n;
                let dst = (ci * t_out + tp) * n;
                v[dst..dst + n].copy_from_slice(&xv[src..src + n]);
            }
        }
        let tracked = x.requires_grad();
        Ok(self.emit(
            |t| Op::StrideTime { x: t.intern(x), stride },
            vec![c, t_out, n],
            v,
            tracked,
        ))
    }

    /// Per-channel batch normalization over all trailing axes of a
    /// channel-first tensor, using batch statistics. Returns the output and
    /// the batch (mean, var) for the caller's running-statistics update.
    pub fn batch_norm_train(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let c = bn_check(x.shape(), gamma.shape(), beta.shape())?;
        let m = x.numel() / c;
        let xv = x.values();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let row = &xv[ci * m..(ci + 1) * m];
            let mu: f64 = row.iter().sum::<f64>() / m as f64;
            let vv: f64 = row.iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>() / m as f64;
            mean[ci] = mu;
            var[ci] = vv;
        }
        let v = bn_apply(xv, gamma.values(), beta.values(), &mean, &var, eps, c, m);
        let tracked = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let mean_c = mean.clone();
        let var_c = var.clone();
        let out = self.emit(
            move |t| Op::BatchNormTrain {
                x: t.intern(x),
                gamma: t.intern(gamma),
                beta: t.intern(beta),
                eps,
                mean: mean_c,
                var: var_c,
            },
            x.shape().to_vec(),
            v,
            tracked,
        );
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Tensor> {
        let c = bn_check(x.shape(), gamma.shape(), beta.shape())?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("running stats length does not match channels"));
        }
        let m = x.numel() / c;
        let v = bn_apply(x.values(), gamma.values(), beta.values(), mean, var, eps, c, m);
        let tracked = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let mean_c = mean.to_vec();
        let var_c = var.to_vec();
        Ok(self.emit(
            move |t| Op::BatchNormEval {
                x: t.intern(x),
                gamma: t.intern(gamma),
                beta: t.intern(beta),
                eps,
                mean: mean_c,
                var: var_c,
            },
            x.shape().to_vec(),
            v,
            tracked,
        ))
    }

    /// Cross-entropy of a logit vector against a class index, computed via
    /// a stable log-sum-exp. Scalar output.
    pub fn cross_entropy(&self, logits: &Tensor, label: usize) -> Result<Tensor> {
        if logits.shape().len() != 1 {
            return Err(Error::shape(format!(
                "cross_entropy expects a rank-1 logit vector, got {:?}",
                logits.shape()
            )));
        }
        let k = logits.shape()[0];
        if label >= k {
            return Err(Error::data(format!(
                "label {} out of range for {} classes",
                label, k
            )));
        }
        let lv = logits.values();
        let mx = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + lv.iter().map(|&a| (a - mx).exp()).sum::<f64>().ln();
        let loss = lse - lv[label];
        let tracked = logits.requires_grad();
        Ok(self.emit(
            |t| Op::CrossEntropy {
                logits: t.intern(logits),
                label,
            },
            vec![],
            vec![loss],
            tracked,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// `requires_grad` leaf, then consumes the tape.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        let loss_node = loss
            .node
            .ok_or_else(|| Error::contract("loss is detached from this tape"))?;
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.spent {
            return Err(Error::contract("tape already consumed by backward"));
        }
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss_node] = Some(vec![1.0]);

        for i in (0..nodes.len()).rev() {
            let node = &nodes[i];
            match grads[i].take() {
                Some(g) => {
                    backward_op(node, &g, nodes, &mut grads);
                    if let Some(cell) = &node.grad_cell {
                        *cell.borrow_mut() = Some(g);
                    }
                }
                // leaves the loss does not depend on get zero gradients,
                // so every bound parameter has a gradient after backward
                None => {
                    if let Some(cell) = &node.grad_cell {
                        *cell.borrow_mut() = Some(vec![0.0; node.value.len()]);
                    }
                }
            }
        }
        inner.nodes.clear();
        inner.spent = true;
        Ok(())
    }
}

// ── forward kernels ──────────────────────────────────────────────────

fn unary_fwd(kind: UnaryKind, a: f64) -> f64 {
    match kind {
        UnaryKind::Relu => {
            if a > 0.0 {
                a
            } else {
                0.0
            }
        }
        UnaryKind::Tanh => a.tanh(),
        // Overflow-safe: for large x, log(1+e^x) == x to double precision.
        UnaryKind::Softplus => {
            if a > 30.0 {
                a
            } else {
                a.exp().ln_1p()
            }
        }
        UnaryKind::Exp => a.exp(),
        UnaryKind::Neg => -a,
        UnaryKind::Sqrt => a.sqrt(),
    }
}

fn binary_fwd(kind: BinaryKind, a: f64, b: f64) -> f64 {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
    }
}

/// How each output element maps onto operand elements for a broadcast
/// binary op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Full,
    Scalar,
    /// Operand shape is a trailing suffix of the output; repeats over
    /// leading dims with this period.
    Suffix(usize),
}

#[derive(Debug, Clone)]
struct BroadcastPlan {
    out_shape: Vec<usize>,
    a: Side,
    b: Side,
}

impl BroadcastPlan {
    fn index(side: Side, i: usize) -> usize {
        match side {
            Side::Full => i,
            Side::Scalar => 0,
            Side::Suffix(p) => i % p,
        }
    }
    fn index_a(&self, i: usize) -> usize {
        Self::index(self.a, i)
    }
    fn index_b(&self, i: usize) -> usize {
        Self::index(self.b, i)
    }
}

fn broadcast_plan(a: &[usize], b: &[usize]) -> Result<BroadcastPlan> {
    let an: usize = a.iter().product();
    let bn: usize = b.iter().product();
    if a == b {
        return Ok(BroadcastPlan {
            out_shape: a.to_vec(),
            a: Side::Full,
            b: Side::Full,
        });
    }
    if bn == 1 {
        return Ok(BroadcastPlan {
            out_shape: a.to_vec(),
            a: Side::Full,
            b: Side::Scalar,
        });
    }
    if an == 1 {
        return Ok(BroadcastPlan {
            out_shape: b.to_vec(),
            a: Side::Scalar,
            b: Side::Full,
        });
    }
    if b.len() < a.len() && a[a.len() - b.len()..] == *b {
        return Ok(BroadcastPlan {
            out_shape: a.to_vec(),
            a: Side::Full,
            b: Side::Suffix(bn),
        });
    }
    if a.len() < b.len() && b[b.len() - a.len()..] == *a {
        return Ok(BroadcastPlan {
            out_shape: b.to_vec(),
            a: Side::Suffix(an),
            b: Side::Full,
        });
    }
    Err(Error::shape(format!(
        "cannot broadcast {:?} with {:?} (only equal shapes, scalars, and leading-dimension broadcast are supported)",
        a, b
    )))
}

/// (outer, axis length, inner) decomposition of a shape around one axis.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

// ── matmul with leading-dimension batch broadcast ─────────────────────

#[derive(Debug, Clone)]
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: Vec<usize>,
    /// Per-batch-dim strides (in matrices) into each operand; 0 where the
    /// operand is broadcast along that dim.
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl MatmulPlan {
    fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.push(self.m);
        s.push(self.n);
        s
    }
    fn batch_count(&self) -> usize {
        self.batch.iter().product()
    }
    fn offsets(&self, flat: usize) -> (usize, usize) {
        let mut rem = flat;
        let mut ai = 0;
        let mut bi = 0;
        for d in (0..self.batch.len()).rev() {
            let coord = rem % self.batch[d];
            rem /= self.batch[d];
            ai += coord * self.a_strides[d];
            bi += coord * self.b_strides[d];
        }
        (ai, bi)
    }
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(format!(
            "matmul requires rank >= 2 operands, got {:?} and {:?}",
            a, b
        )));
    }
    let (m, ka) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {:?} vs {:?}",
            a, b
        )));
    }
    let a_lead = &a[..a.len() - 2];
    let b_lead = &b[..b.len() - 2];
    let rank = a_lead.len().max(b_lead.len());
    let mut batch = vec![0usize; rank];
    let mut a_pad = vec![1usize; rank];
    let mut b_pad = vec![1usize; rank];
    a_pad[rank - a_lead.len()..].copy_from_slice(a_lead);
    b_pad[rank - b_lead.len()..].copy_from_slice(b_lead);
    for d in 0..rank {
        batch[d] = match (a_pad[d], b_pad[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "matmul batch dimensions incompatible: {:?} vs {:?}",
                    a, b
                )))
            }
        };
    }
    // strides in units of matrices
    let stride_of = |pad: &[usize]| {
        let mut s = vec![0usize; rank];
        let mut acc = 1usize;
        for d in (0..rank).rev() {
            s[d] = if pad[d] == 1 { 0 } else { acc };
            acc *= pad[d];
        }
        s
    };
    Ok(MatmulPlan {
        m,
        k: ka,
        n,
        batch,
        a_strides: stride_of(&a_pad),
        b_strides: stride_of(&b_pad),
    })
}

fn matmul_forward(plan: &MatmulPlan, a: &[f64], b: &[f64]) -> Vec<f64> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let batches = plan.batch_count();
    let mut out = vec![0.0; batches * m * n];
    for bi in 0..batches {
        let (ao, bo) = plan.offsets(bi);
        mat_nn(
            &a[ao * m * k..ao * m * k + m * k],
            &b[bo * k * n..bo * k * n + k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    out
}

/// C += A[m,k] B[k,n]
fn mat_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C += A[m,k] B[n,k]^T
fn mat_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[j * k + p];
            }
            c[i * n + j] += s;
        }
    }
}

/// C += A[k,m]^T B[k,n]
fn mat_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

// ── temporal convolution ─────────────────────────────────────────────

fn temporal_conv_check(x: &[usize], k: &[usize], stride: usize) -> Result<(usize, usize)> {
    if x.len() != 3 {
        return Err(Error::shape(format!(
            "temporal_conv expects input [C_in, T, N], got {:?}",
            x
        )));
    }
    if k.len() != 3 {
        return Err(Error::shape(format!(
            "temporal_conv expects kernel [C_out, C_in, K_t], got {:?}",
            k
        )));
    }
    if x[1] < 1 {
        return Err(Error::shape("temporal_conv requires T >= 1"));
    }
    if k[2].is_multiple_of(2) {
        return Err(Error::config(format!(
            "temporal kernel size must be odd, got {}",
            k[2]
        )));
    }
    if stride == 0 {
        return Err(Error::config("stride must be >= 1"));
    }
    if k[1] != x[0] {
        return Err(Error::shape(format!(
            "kernel input channels {} do not match input channels {}",
            k[1], x[0]
        )));
    }
    Ok((k[0], x[1].div_ceil(stride)))
}

#[allow(clippy::too_many_arguments)]
fn temporal_conv_forward(
    x: &[f64],
    k: &[f64],
    c_in: usize,
    t_in: usize,
    n: usize,
    c_out: usize,
    k_t: usize,
    stride: usize,
) -> Vec<f64> {
    let pad = (k_t - 1) / 2;
    let t_out = t_in.div_ceil(stride);
    let mut out = vec![0.0; c_out * t_out * n];
    for o in 0..c_out {
        for ci in 0..c_in {
            for j in 0..k_t {
                let w = k[(o * c_in + ci) * k_t + j];
                if w == 0.0 {
                    continue;
                }
                for tp in 0..t_out {
                    let tau = (tp * stride + j) as isize - pad as isize;
                    if tau < 0 || tau >= t_in as isize {
                        continue;
                    }
                    let src = (ci * t_in + tau as usize) * n;
                    let dst = (o * t_out + tp) * n;
                    for nn in 0..n {
                        out[dst + nn] += w * x[src + nn];
                    }
                }
            }
        }
    }
    out
}

// ── batch norm helpers ───────────────────────────────────────────────

fn bn_check(x: &[usize], gamma: &[usize], beta: &[usize]) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::shape("batch_norm expects channel-first input"));
    }
    let c = x[0];
    if gamma != [c] || beta != [c] {
        return Err(Error::shape(format!(
            "batch_norm scale/shift must have shape [{}], got {:?} and {:?}",
            c, gamma, beta
        )));
    }
    Ok(c)
}

#[allow(clippy::too_many_arguments)]
fn bn_apply(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    c: usize,
    m: usize,
) -> Vec<f64> {
    let mut v = vec![0.0; c * m];
    for ci in 0..c {
        let inv = 1.0 / (var[ci] + eps).sqrt();
        for j in 0..m {
            v[ci * m + j] = gamma[ci] * (x[ci * m + j] - mean[ci]) * inv + beta[ci];
        }
    }
    v
}

// ── backward rules ───────────────────────────────────────────────────

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, add: impl FnOnce(&mut [f64])) {
    // Const nodes never need gradients.
    if matches!(nodes[id].op, Op::Const) {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    add(slot);
}

fn backward_op(node: &Node, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf | Op::Const => {}
        Op::Unary { kind, x } => {
            let xv = &nodes[*x].value;
            let yv = &node.value;
            let kind = *kind;
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i]
                        * match kind {
                            UnaryKind::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Tanh => 1.0 - yv[i] * yv[i],
                            UnaryKind::Softplus => 1.0 / (1.0 + (-xv[i]).exp()),
                            UnaryKind::Exp => yv[i],
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Sqrt => 0.5 / yv[i],
                        };
                }
            });
        }
        Op::Binary { kind, a, b } => {
            let plan = broadcast_plan(&nodes[*a].shape, &nodes[*b].shape)
                .expect("recorded op had a valid plan");
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            match kind {
                BinaryKind::Add => {
                    accumulate(grads, nodes, *a, |ga| {
                        for (i, &gi) in g.iter().enumerate() {
                            ga[plan.index_a(i)] += gi;
                        }
                    });
                    accumulate(grads, nodes, *b, |gb| {
                        for (i, &gi) in g.iter().enumerate() {
                            gb[plan.index_b(i)] += gi;
                        }
                    });
                }
                BinaryKind::Sub => {
                    accumulate(grads, nodes, *a, |ga| {
                        for (i, &gi) in g.iter().enumerate() {
                            ga[plan.index_a(i)] += gi;
                        }
                    });
                    accumulate(grads, nodes, *b, |gb| {
                        for (i, &gi) in g.iter().enumerate() {
                            gb[plan.index_b(i)] -= gi;
                        }
                    });
                }
                BinaryKind::Mul => {
                    accumulate(grads, nodes, *a, |ga| {
                        for (i, &gi) in g.iter().enumerate() {
                            ga[plan.index_a(i)] += gi * bv[plan.index_b(i)];
                        }
                    });
                    accumulate(grads, nodes, *b, |gb| {
                        for (i, &gi) in g.iter().enumerate() {
                            gb[plan.index_b(i)] += gi * av[plan.index_a(i)];
                        }
                    });
                }
            }
        }
        Op::Scale { x, c } => {
            let c = *c;
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * c;
                }
            });
        }
        Op::AddScalar { x } => {
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i];
                }
            });
        }
        Op::MatMul { a, b, plan } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k, n) = (plan.m, plan.k, plan.n);
            accumulate(grads, nodes, *a, |ga| {
                for bi in 0..plan.batch_count() {
                    let (ao, bo) = plan.offsets(bi);
                    mat_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bv[bo * k * n..bo * k * n + k * n],
                        &mut ga[ao * m * k..ao * m * k + m * k],
                        m,
                        n,
                        k,
                    );
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for bi in 0..plan.batch_count() {
                    let (ao, bo) = plan.offsets(bi);
                    mat_tn(
                        &av[ao * m * k..ao * m * k + m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[bo * k * n..bo * k * n + k * n],
                        k,
                        m,
                        n,
                    );
                }
            });
        }
        Op::Transpose { x, rows, cols } => {
            let (r, c) = (*rows, *cols);
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Reshape { x } => {
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i];
                }
            });
        }
        Op::Softmax { x, axis } => {
            let yv = &node.value;
            let (outer, len, inner) = split_axis(&node.shape, *axis);
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += g[at(j)] * yv[at(j)];
                        }
                        for j in 0..len {
                            gx[at(j)] += yv[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::MeanAxis { x, axis } => {
            let (outer, len, inner) = split_axis(&nodes[*x].shape, *axis);
            accumulate(grads, nodes, *x, |gx| {
                let scale = 1.0 / len as f64;
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[(o * len + j) * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            });
        }
        Op::Sum { x } => {
            accumulate(grads, nodes, *x, |gx| {
                for e in gx.iter_mut() {
                    *e += g[0];
                }
            });
        }
        Op::Mean { x } => {
            let n = nodes[*x].value.len() as f64;
            accumulate(grads, nodes, *x, |gx| {
                for e in gx.iter_mut() {
                    *e += g[0] / n;
                }
            });
        }
        Op::TemporalConv { x, k, stride } => {
            let stride = *stride;
            let xs = &nodes[*x].shape;
            let ks = &nodes[*k].shape;
            let (c_in, t_in, n) = (xs[0], xs[1], xs[2]);
            let (c_out, k_t) = (ks[0], ks[2]);
            let pad = (k_t - 1) / 2;
            let t_out = t_in.div_ceil(stride);
            let xv = &nodes[*x].value;
            let kv = &nodes[*k].value;
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..c_out {
                    for ci in 0..c_in {
                        for j in 0..k_t {
                            let w = kv[(o * c_in + ci) * k_t + j];
                            if w == 0.0 {
                                continue;
                            }
                            for tp in 0..t_out {
                                let tau = (tp * stride + j) as isize - pad as isize;
                                if tau < 0 || tau >= t_in as isize {
                                    continue;
                                }
                                let src = (ci * t_in + tau as usize) * n;
                                let dst = (o * t_out + tp) * n;
                                for nn in 0..n {
                                    gx[src + nn] += w * g[dst + nn];
                                }
                            }
                        }
                    }
                }
            });
            accumulate(grads, nodes, *k, |gk| {
                for o in 0..c_out {
                    for ci in 0..c_in {
                        for j in 0..k_t {
                            let mut s = 0.0;
                            for tp in 0..t_out {
                                let tau = (tp * stride + j) as isize - pad as isize;
                                if tau < 0 || tau >= t_in as isize {
                                    continue;
                                }
                                let src = (ci * t_in + tau as usize) * n;
                                let dst = (o * t_out + tp) * n;
                                for nn in 0..n {
                                    s += g[dst + nn] * xv[src + nn];
                                }
                            }
                            gk[(o * c_in + ci) * k_t + j] += s;
                        }
                    }
                }
            });
        }
        Op::StrideTime { x, stride } => {
            let stride = *stride;
            let xs = &nodes[*x].shape;
            let (c, t_in, n) = (xs[0], xs[1], xs[2]);
            let t_out = t_in.div_ceil(stride);
            accumulate(grads, nodes, *x, |gx| {
                for ci in 0..c {
                    for tp in 0..t_out {
                        let dst = (ci * t_in + tp * stride) * n;
                        let src = (ci * t_out + tp) * n;
                        for nn in 0..n {
                            gx[dst + nn] += g[src + nn];
                        }
                    }
                }
            });
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            eps,
            mean,
            var,
        } => {
            let c = nodes[*gamma].value.len();
            let m = nodes[*x].value.len() / c;
            let xv = &nodes[*x].value;
            let gv = &nodes[*gamma].value;
            accumulate(grads, nodes, *x, |gx| {
                for ci in 0..c {
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..m {
                        let xhat = (xv[ci * m + j] - mean[ci]) * inv;
                        let dxhat = g[ci * m + j] * gv[ci];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for j in 0..m {
                        let xhat = (xv[ci * m + j] - mean[ci]) * inv;
                        let dxhat = g[ci * m + j] * gv[ci];
                        gx[ci * m + j] += inv / m as f64
                            * (m as f64 * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
            });
            accumulate(grads, nodes, *gamma, |gg| {
                for ci in 0..c {
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    let mut s = 0.0;
                    for j in 0..m {
                        s += g[ci * m + j] * (xv[ci * m + j] - mean[ci]) * inv;
                    }
                    gg[ci] += s;
                }
            });
            accumulate(grads, nodes, *beta, |gb| {
                for ci in 0..c {
                    let mut s = 0.0;
                    for j in 0..m {
                        s += g[ci * m + j];
                    }
                    gb[ci] += s;
                }
            });
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            eps,
            mean,
            var,
        } => {
            let c = nodes[*gamma].value.len();
            let m = nodes[*x].value.len() / c;
            let xv = &nodes[*x].value;
            let gv = &nodes[*gamma].value;
            accumulate(grads, nodes, *x, |gx| {
                for ci in 0..c {
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    for j in 0..m {
                        gx[ci * m + j] += g[ci * m + j] * gv[ci] * inv;
                    }
                }
            });
            accumulate(grads, nodes, *gamma, |gg| {
                for ci in 0..c {
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    let mut s = 0.0;
                    for j in 0..m {
                        s += g[ci * m + j] * (xv[ci * m + j] - mean[ci]) * inv;
                    }
                    gg[ci] += s;
                }
            });
            accumulate(grads, nodes, *beta, |gb| {
                for ci in 0..c {
                    let mut s = 0.0;
                    for j in 0..m {
                        s += g[ci * m + j];
                    }
                    gb[ci] += s;
                }
            });
        }
        Op::CrossEntropy { logits, label } => {
            let lv = &nodes[*logits].value;
            let mx = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = lv.iter().map(|&a| (a - mx).exp()).sum();
            accumulate(grads, nodes, *logits, |gl| {
                for (i, e) in gl.iter_mut().enumerate() {
                    let p = (lv[i] - mx).exp() / z;
                    let onehot = if i == *label { 1.0 } else { 0.0 };
                    *e += g[0] * (p - onehot);
                }
            });
        }
    }
}
