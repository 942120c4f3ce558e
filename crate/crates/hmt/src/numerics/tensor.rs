//! Dense double-precision tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable handles (`Rc` inside) onto row-major `f64` buffers.
//! Every operation records its inputs, so calling [`Tensor::backward`] on a
//! scalar loss walks the graph once in reverse topological order and
//! accumulates gradients into every `requires_grad` ancestor. Evaluation code
//! that does not need gradients should hold a [`NoGradGuard`], which stops
//! graph recording entirely (forward values are bit-identical either way).
//!
//! Everything is single-threaded per graph and strictly sequential, so two
//! runs from the same seed produce bit-identical results.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{HmtError, Result};
use crate::numerics::rng::RngState;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// While alive, newly created tensors record no graph and require no grad.
pub struct NoGradGuard(());

impl NoGradGuard {
    pub fn new() -> Self {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
        NoGradGuard(())
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

pub fn grad_recording_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    /// `[m×n] + [1×n]`, the bias add.
    AddRow(Tensor, Tensor),
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    Gelu(Tensor),
    SoftmaxRows(Tensor),
    /// Row-wise softmax over a square matrix restricted to columns `<= row`.
    CausalSoftmaxRows(Tensor),
    LayerNormRows {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
    },
    CrossEntropy {
        logits: Tensor,
        targets: Vec<usize>,
    },
    ConcatRows(Vec<Tensor>),
    ConcatCols(Vec<Tensor>),
    SliceRows {
        x: Tensor,
        start: usize,
    },
    SliceCols {
        x: Tensor,
        start: usize,
    },
    GatherRows {
        table: Tensor,
        ids: Vec<usize>,
    },
    Sum(Tensor),
}

impl Op {
    fn parents(&self) -> Vec<Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::Matmul(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::CausalSoftmaxRows(a)
            | Op::Sum(a) => vec![a.clone()],
            Op::LayerNormRows { x, gamma, beta, .. } => {
                vec![x.clone(), gamma.clone(), beta.clone()]
            }
            Op::CrossEntropy { logits, .. } => vec![logits.clone()],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
            Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => vec![x.clone()],
            Op::GatherRows { table, .. } => vec![table.clone()],
        }
    }
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

/// Handle onto a node of the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Tensor {
    fn new_node(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Inner {
            id: fresh_id(),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    /// Leaf tensor. When `requires_grad`, a zeroed grad buffer is allocated
    /// up front so optimizers always find one.
    pub fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(HmtError::DimensionMismatch {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        let t = Tensor::new_node(shape.to_vec(), data, requires_grad, Op::Leaf);
        if requires_grad {
            *t.0.grad.borrow_mut() = Some(vec![0.0; numel]);
        }
        Ok(t)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::leaf(shape, data, false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new_node(shape.to_vec(), vec![0.0; numel], false, Op::Leaf)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new_node(shape.to_vec(), vec![value; numel], false, Op::Leaf)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new_node(vec![1], vec![value], false, Op::Leaf)
    }

    /// Trainable parameter drawn from Normal(0, std²).
    pub fn randn(shape: &[usize], std: f64, rng: &mut RngState, requires_grad: bool) -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| std * rng.next_normal()).collect();
        Tensor::leaf(shape, data, requires_grad).expect("shape/data consistent by construction")
    }

    /// Constant copy that contributes no gradient.
    pub fn detach(&self) -> Tensor {
        Tensor::new_node(
            self.0.shape.clone(),
            self.0.data.borrow().clone(),
            false,
            Op::Leaf,
        )
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access to the raw buffer (optimizer updates, finite-difference
    /// perturbations). Graphs referencing this tensor must be rebuilt after.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(HmtError::Contract(format!(
                "item() requires a scalar tensor, got shape {:?}",
                self.0.shape
            )));
        }
        Ok(self.0.data.borrow()[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Overwrite the grad buffer (optimizer-side surgery, tests).
    pub fn set_grad(&self, grad: &[f64]) {
        assert_eq!(grad.len(), self.numel(), "set_grad length mismatch");
        *self.0.grad.borrow_mut() = Some(grad.to_vec());
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(HmtError::DimensionMismatch {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn ensure_grad(&self) {
        let mut g = self.0.grad.borrow_mut();
        if g.is_none() {
            *g = Some(vec![0.0; self.numel()]);
        }
    }

    fn tracked(inputs: &[&Tensor]) -> bool {
        grad_recording_enabled() && inputs.iter().any(|t| t.0.requires_grad)
    }

    fn result(shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> Tensor {
        if tracked {
            Tensor::new_node(shape, data, true, op)
        } else {
            Tensor::new_node(shape, data, false, Op::Leaf)
        }
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.0.shape != other.0.shape {
            return Err(HmtError::DimensionMismatch {
                op: "add",
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        let a = self.0.data.borrow();
        let b = other.0.data.borrow();
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        drop(a);
        drop(b);
        let tracked = Tensor::tracked(&[self, other]);
        Ok(Tensor::result(
            self.0.shape.clone(),
            out,
            Op::Add(self.clone(), other.clone()),
            tracked,
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.0.shape != other.0.shape {
            return Err(HmtError::DimensionMismatch {
                op: "sub",
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        let a = self.0.data.borrow();
        let b = other.0.data.borrow();
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
        drop(a);
        drop(b);
        let tracked = Tensor::tracked(&[self, other]);
        Ok(Tensor::result(
            self.0.shape.clone(),
            out,
            Op::Sub(self.clone(), other.clone()),
            tracked,
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.0.shape != other.0.shape {
            return Err(HmtError::DimensionMismatch {
                op: "mul",
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        let a = self.0.data.borrow();
        let b = other.0.data.borrow();
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        drop(a);
        drop(b);
        let tracked = Tensor::tracked(&[self, other]);
        Ok(Tensor::result(
            self.0.shape.clone(),
            out,
            Op::Mul(self.clone(), other.clone()),
            tracked,
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.0.data.borrow().iter().map(|x| x * c).collect();
        let tracked = Tensor::tracked(&[self]);
        Tensor::result(self.0.shape.clone(), out, Op::Scale(self.clone(), c), tracked)
    }

    /// Broadcast add of a `[1×n]` row onto every row of `[m×n]`.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("add_row")?;
        let (rr, rc) = row.dims2("add_row")?;
        if rr != 1 || rc != n {
            return Err(HmtError::DimensionMismatch {
                op: "add_row",
                lhs: self.0.shape.clone(),
                rhs: row.0.shape.clone(),
            });
        }
        let a = self.0.data.borrow();
        let b = row.0.data.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = a[i * n + j] + b[j];
            }
        }
        drop(a);
        drop(b);
        let tracked = Tensor::tracked(&[self, row]);
        Ok(Tensor::result(
            vec![m, n],
            out,
            Op::AddRow(self.clone(), row.clone()),
            tracked,
        ))
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(HmtError::DimensionMismatch {
                op: "matmul",
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        let a = self.0.data.borrow();
        let b = other.0.data.borrow();
        let out = mm(&a, &b, m, k, n);
        drop(a);
        drop(b);
        let tracked = Tensor::tracked(&[self, other]);
        Ok(Tensor::result(
            vec![m, n],
            out,
            Op::Matmul(self.clone(), other.clone()),
            tracked,
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let a = self.0.data.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        drop(a);
        let tracked = Tensor::tracked(&[self]);
        Ok(Tensor::result(
            vec![n, m],
            out,
            Op::Transpose(self.clone()),
            tracked,
        ))
    }

    // ---- nonlinearities --------------------------------------------------

    /// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
    pub fn gelu(&self) -> Tensor {
        let out: Vec<f64> = self.0.data.borrow().iter().map(|&x| gelu_fwd(x)).collect();
        let tracked = Tensor::tracked(&[self]);
        Tensor::result(self.0.shape.clone(), out, Op::Gelu(self.clone()), tracked)
    }

    /// Row-wise softmax with per-row max subtraction. Rejects NaN/Inf input.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("softmax_rows")?;
        let a = self.0.data.borrow();
        if let Some(bad) = a.iter().position(|v| !v.is_finite()) {
            return Err(HmtError::NumericDomain {
                op: "softmax_rows",
                message: format!("non-finite input {} at flat index {}", a[bad], bad),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&a[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        drop(a);
        let tracked = Tensor::tracked(&[self]);
        Ok(Tensor::result(
            vec![m, n],
            out,
            Op::SoftmaxRows(self.clone()),
            tracked,
        ))
    }

    /// Softmax over a square score matrix where row `i` may attend only to
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("causal_softmax_rows")?;
        if m != n {
            return Err(HmtError::DimensionMismatch {
                op: "causal_softmax_rows",
                lhs: self.0.shape.clone(),
                rhs: vec![m, m],
            });
        }
        let a = self.0.data.borrow();
        if let Some(bad) = a.iter().position(|v| !v.is_finite()) {
            return Err(HmtError::NumericDomain {
                op: "causal_softmax_rows",
                message: format!("non-finite input {} at flat index {}", a[bad], bad),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&a[i * n..i * n + i + 1], &mut out[i * n..i * n + i + 1]);
        }
        drop(a);
        let tracked = Tensor::tracked(&[self]);
        Ok(Tensor::result(
            vec![m, n],
            out,
            Op::CausalSoftmaxRows(self.clone()),
            tracked,
        ))
    }

    /// Per-row layer norm with affine scale/shift (`gamma`, `beta` are `[1×n]`).
    pub fn layer_norm_rows(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = self.dims2("layer_norm_rows")?;
        for (t, name) in [(gamma, "gamma"), (beta, "beta")] {
            let (r, c) = t.dims2("layer_norm_rows")?;
            if r != 1 || c != n {
                return Err(HmtError::DimensionMismatch {
                    op: if name == "gamma" {
                        "layer_norm_rows gamma"
                    } else {
                        "layer_norm_rows beta"
                    },
                    lhs: vec![m, n],
                    rhs: t.0.shape.clone(),
                });
            }
        }
        let a = self.0.data.borrow();
        let g = gamma.0.data.borrow();
        let b = beta.0.data.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &a[i * n..(i + 1) * n];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = g[j] * ((row[j] - mean) * inv) + b[j];
            }
        }
        drop(a);
        drop(g);
        drop(b);
        let tracked = Tensor::tracked(&[self, gamma, beta]);
        Ok(Tensor::result(
            vec![m, n],
            out,
            Op::LayerNormRows {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                eps,
            },
            tracked,
        ))
    }

    /// Mean over positions of −log softmax(logits)[t, target_t]. Scalar output.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let (m, v) = self.dims2("cross_entropy")?;
        if targets.len() != m {
            return Err(HmtError::DimensionMismatch {
                op: "cross_entropy",
                lhs: vec![m, v],
                rhs: vec![targets.len()],
            });
        }
        if m == 0 {
            return Err(HmtError::Contract(
                "cross_entropy over zero positions".to_string(),
            ));
        }
        for (pos, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(HmtError::IndexOutOfRange {
                    index: t,
                    bound: v,
                    position: pos,
                });
            }
        }
        let a = self.0.data.borrow();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &a[i * v..(i + 1) * v];
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / m as f64;
        drop(a);
        let tracked = Tensor::tracked(&[self]);
        Ok(Tensor::result(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
            },
            tracked,
        ))
    }

    // ---- shape surgery ---------------------------------------------------

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_rows")?;
        if start + len > m {
            return Err(HmtError::Contract(format!(
                "slice_rows [{start}, {}) out of {m} rows",
                start + len
            )));
        }
        let a = self.0.data.borrow();
        let out = a[start * n..(start + len) * n].to_vec();
        drop(a);
        let tracked = Tensor::tracked(&[self]);
        Ok(Tensor::result(
            vec![len, n],
            out,
            Op::SliceRows {
                x: self.clone(),
                start,
            },
            tracked,
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_cols")?;
        if start + len > n {
            return Err(HmtError::Contract(format!(
                "slice_cols [{start}, {}) out of {n} cols",
                start + len
            )));
        }
        let a = self.0.data.borrow();
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len].copy_from_slice(&a[i * n + start..i * n + start + len]);
        }
        drop(a);
        let tracked = Tensor::tracked(&[self]);
        Ok(Tensor::result(
            vec![m, len],
            out,
            Op::SliceCols {
                x: self.clone(),
                start,
            },
            tracked,
        ))
    }

    /// Row gather: out[i] = table[ids[i]]. Gradients scatter-add into the table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (m, n) = self.dims2("gather_rows")?;
        for (pos, &id) in ids.iter().enumerate() {
            if id >= m {
                return Err(HmtError::IndexOutOfRange {
                    index: id,
                    bound: m,
                    position: pos,
                });
            }
        }
        let a = self.0.data.borrow();
        let mut out = vec![0.0; ids.len() * n];
        for (i, &id) in ids.iter().enumerate() {
            out[i * n..(i + 1) * n].copy_from_slice(&a[id * n..(id + 1) * n]);
        }
        drop(a);
        let tracked = Tensor::tracked(&[self]);
        Ok(Tensor::result(
            vec![ids.len(), n],
            out,
            Op::GatherRows {
                table: self.clone(),
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.0.data.borrow().iter().sum();
        let tracked = Tensor::tracked(&[self]);
        Tensor::result(vec![1], vec![total], Op::Sum(self.clone()), tracked)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode pass from a scalar loss. Gradients accumulate (+=) into
    /// every `requires_grad` ancestor; each graph node is processed exactly
    /// once; detached tensors stay untouched.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(HmtError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.0.shape
            )));
        }
        if !self.0.requires_grad {
            // Loss does not depend on any tracked tensor; nothing to do.
            return Ok(());
        }
        let order = topo_order(self);
        self.ensure_grad();
        self.0.grad.borrow_mut().as_mut().unwrap()[0] += 1.0;

        for node in &order {
            let g = node
                .0
                .grad
                .borrow()
                .clone()
                .expect("topo order guarantees a populated grad");
            node.distribute(&g);
        }
        Ok(())
    }

    fn distribute(&self, g: &[f64]) {
        match &self.0.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                });
                accum(b, |db| {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                });
            }
            Op::Sub(a, b) => {
                accum(a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                });
                accum(b, |db| {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
                });
            }
            Op::Mul(a, b) => {
                {
                    let bd = b.0.data.borrow();
                    accum(a, |da| {
                        for i in 0..g.len() {
                            da[i] += g[i] * bd[i];
                        }
                    });
                }
                let ad = a.0.data.borrow();
                accum(b, |db| {
                    for i in 0..g.len() {
                        db[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                accum(a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * c;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = row.numel();
                accum(a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                });
                accum(row, |dr| {
                    for (i, &gv) in g.iter().enumerate() {
                        dr[i % n] += gv;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                {
                    let bd = b.0.data.borrow();
                    accum(a, |da| {
                        // dA += g · Bᵀ
                        for i in 0..m {
                            for j in 0..k {
                                let mut s = 0.0;
                                for p in 0..n {
                                    s += g[i * n + p] * bd[j * n + p];
                                }
                                da[i * k + j] += s;
                            }
                        }
                    });
                }
                let ad = a.0.data.borrow();
                accum(b, |db| {
                    // dB += Aᵀ · g
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += ad[i * k + p] * g[i * n + j];
                            }
                            db[p * n + j] += s;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                accum(a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let ad = a.0.data.borrow();
                accum(a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * gelu_bwd(ad[i]);
                    }
                });
            }
            Op::SoftmaxRows(a) | Op::CausalSoftmaxRows(a) => {
                // dx = y ∘ (g − ⟨g, y⟩) per row; masked entries have y = 0.
                let y = self.0.data.borrow();
                let (m, n) = (self.shape()[0], self.shape()[1]);
                accum(a, |da| {
                    for i in 0..m {
                        let row_y = &y[i * n..(i + 1) * n];
                        let row_g = &g[i * n..(i + 1) * n];
                        let dot: f64 = row_y.iter().zip(row_g).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..n {
                            da[i * n + j] += row_y[j] * (row_g[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let xd = x.0.data.borrow();
                let gd = gamma.0.data.borrow();
                accum(beta, |db| {
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                });
                accum(gamma, |dg| {
                    for i in 0..m {
                        let row = &xd[i * n..(i + 1) * n];
                        let (mean, var) = mean_var(row);
                        let inv = 1.0 / (var + eps).sqrt();
                        for j in 0..n {
                            dg[j] += g[i * n + j] * (row[j] - mean) * inv;
                        }
                    }
                });
                accum(x, |dx| {
                    for i in 0..m {
                        let row = &xd[i * n..(i + 1) * n];
                        let (mean, var) = mean_var(row);
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = g[i * n + j] * gd[j];
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = g[i * n + j] * gd[j];
                            dx[i * n + j] += inv * (dxhat - m1 - xhat * m2);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let (m, v) = (logits.shape()[0], logits.shape()[1]);
                let go = g[0] / m as f64;
                let ld = logits.0.data.borrow();
                accum(logits, |dl| {
                    let mut probs = vec![0.0; v];
                    for (i, &t) in targets.iter().enumerate() {
                        softmax_into(&ld[i * v..(i + 1) * v], &mut probs);
                        for j in 0..v {
                            let indicator = if j == t { 1.0 } else { 0.0 };
                            dl[i * v + j] += go * (probs[j] - indicator);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let n = self.shape()[1];
                let mut row = 0;
                for p in parts {
                    let rows = p.shape()[0];
                    accum(p, |dp| {
                        dp.iter_mut()
                            .zip(&g[row * n..(row + rows) * n])
                            .for_each(|(d, &gv)| *d += gv);
                    });
                    row += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.shape()[0];
                let total = self.shape()[1];
                let mut col = 0;
                for p in parts {
                    let cols = p.shape()[1];
                    accum(p, |dp| {
                        for i in 0..m {
                            for j in 0..cols {
                                dp[i * cols + j] += g[i * total + col + j];
                            }
                        }
                    });
                    col += cols;
                }
            }
            Op::SliceRows { x, start } => {
                let n = x.shape()[1];
                let len = self.shape()[0];
                accum(x, |dx| {
                    dx[start * n..(start + len) * n]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &gv)| *d += gv);
                });
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let len = self.shape()[1];
                accum(x, |dx| {
                    for i in 0..m {
                        for j in 0..len {
                            dx[i * n + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let n = table.shape()[1];
                accum(table, |dt| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..n {
                            dt[id * n + j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                accum(a, |da| {
                    da.iter_mut().for_each(|d| *d += g[0]);
                });
            }
        }
    }
}

/// Accumulate into `t`'s grad buffer if it participates in the graph.
fn accum(t: &Tensor, f: impl FnOnce(&mut [f64])) {
    if !t.0.requires_grad {
        return;
    }
    t.ensure_grad();
    let mut guard = t.0.grad.borrow_mut();
    f(guard.as_mut().unwrap());
}

/// Reverse post-order DFS over the tracked subgraph: the returned list starts
/// at the loss and ends at the leaves, so processing it front to back visits
/// every consumer before its producer.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    enum Visit {
        Enter(Tensor),
        Exit(Tensor),
    }
    let mut out = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack = vec![Visit::Enter(root.clone())];
    while let Some(v) = stack.pop() {
        match v {
            Visit::Enter(t) => {
                if !seen.insert(t.id()) {
                    continue;
                }
                stack.push(Visit::Exit(t.clone()));
                for p in t.0.op.parents() {
                    if p.0.requires_grad && !seen.contains(&p.id()) {
                        stack.push(Visit::Enter(p));
                    }
                }
            }
            Visit::Exit(t) => out.push(t),
        }
    }
    out.reverse();
    out
}

/// Concatenate along rows; every part must share the column count.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(HmtError::Contract("concat_rows of zero tensors".to_string()));
    }
    let n = parts[0].dims2("concat_rows")?.1;
    let mut rows = 0;
    for p in parts {
        let (r, c) = p.dims2("concat_rows")?;
        if c != n {
            return Err(HmtError::DimensionMismatch {
                op: "concat_rows",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        rows += r;
    }
    let mut out = Vec::with_capacity(rows * n);
    for p in parts {
        out.extend_from_slice(&p.data());
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let tracked = Tensor::tracked(&refs);
    Ok(Tensor::result(
        vec![rows, n],
        out,
        Op::ConcatRows(parts.to_vec()),
        tracked,
    ))
}

/// Concatenate along columns; every part must share the row count.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(HmtError::Contract("concat_cols of zero tensors".to_string()));
    }
    let m = parts[0].dims2("concat_cols")?.0;
    let mut total = 0;
    for p in parts {
        let (r, c) = p.dims2("concat_cols")?;
        if r != m {
            return Err(HmtError::DimensionMismatch {
                op: "concat_cols",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        total += c;
    }
    let mut out = vec![0.0; m * total];
    let mut col = 0;
    for p in parts {
        let c = p.shape()[1];
        let d = p.data();
        for i in 0..m {
            out[i * total + col..i * total + col + c].copy_from_slice(&d[i * c..(i + 1) * c]);
        }
        col += c;
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let tracked = Tensor::tracked(&refs);
    Ok(Tensor::result(
        vec![m, total],
        out,
        Op::ConcatCols(parts.to_vec()),
        tracked,
    ))
}

// ---- raw kernels ----------------------------------------------------------

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
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
    c
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
