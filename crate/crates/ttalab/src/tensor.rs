//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Tensors are reference-counted handles; a [`Tape`] records every primitive
//! applied to grad-requiring inputs and replays them in reverse to accumulate
//! adjoints. One tape belongs to one forward pass (define-by-run).

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite input to {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    BadData {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("row index {index} out of bounds for {rows} rows")]
    RowOutOfBounds { index: usize, rows: usize },
    #[error("loss function is not deterministic: two identical evaluations differ")]
    NonDeterministicLoss,
    #[error("group count {groups} does not divide width {width}")]
    BadGroupCount { groups: usize, width: usize },
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

/// Dense f64 tensor with an adjoint buffer. Cloning is cheap (shared handle).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("id", &inner.id)
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::BadData {
                shape,
                expected,
                got: data.len(),
            });
        }
        let n = data.len();
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: vec![0.0; n],
                requires_grad: false,
            })),
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![1], vec![v]).unwrap()
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n]).unwrap()
    }

    /// Leaf parameter tensor that participates in backward.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let t = Tensor::from_vec(shape, data)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub fn grad(&self) -> Vec<f64> {
        self.inner.borrow().grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.borrow_mut().requires_grad = v;
    }

    /// Overwrites the stored values. Length must match.
    pub fn set_data(&self, data: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data.copy_from_slice(data);
    }

    /// Adds `delta` elementwise to the stored values.
    pub fn add_assign_data(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), delta.len());
        for (d, x) in inner.data.iter_mut().zip(delta) {
            *d += x;
        }
    }

    pub fn sub_assign_data(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), delta.len());
        for (d, x) in inner.data.iter_mut().zip(delta) {
            *d -= x;
        }
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        for g in inner.grad.iter_mut() {
            *g = 0.0;
        }
    }

    pub fn value(&self) -> f64 {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.data.len(), 1);
        inner.data[0]
    }

    fn is_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }
}

/// Which index sets a standardization normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormUnit {
    /// Per feature column, statistics over the batch dimension (batch norm).
    PerFeature,
    /// Per sample, per contiguous feature group (group/layer norm).
    PerSample { groups: usize },
}

enum Op {
    Matmul,
    Add,
    Sub,
    Mul,
    /// x[B,F] + v[F], broadcast over rows.
    AddRow,
    /// x[B,F] * v[F], broadcast over rows.
    MulRow,
    Relu,
    MeanAll,
    SumAll,
    Scale(f64),
    LogSumExpRows,
    SoftmaxRows,
    SelectRows(Vec<usize>),
    /// out[b] = x[b, cols[b]].
    PickCols(Vec<usize>),
    Standardize { unit: NormUnit, inv_std: Vec<f64> },
}

struct Entry {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Records primitives for one forward pass; replayed in reverse by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    entries: RefCell<Vec<Entry>>,
}

fn rows_cols(shape: &[usize], op: &'static str) -> Result<(usize, usize), TensorError> {
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected 2-d tensor, got {shape:?}"),
        });
    }
    Ok((shape[0], shape[1]))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn record(&self, op: Op, inputs: Vec<Tensor>, output: &Tensor) {
        if inputs.iter().any(|t| t.requires_grad()) {
            output.set_requires_grad(true);
            self.entries.borrow_mut().push(Entry {
                op,
                inputs,
                output: output.clone(),
            });
        }
    }

    fn check_finite(t: &Tensor, op: &'static str) -> Result<(), TensorError> {
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        Ok(())
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        Self::check_finite(a, "matmul")?;
        Self::check_finite(b, "matmul")?;
        let (m, k) = rows_cols(&a.shape(), "matmul")?;
        let (k2, n) = rows_cols(&b.shape(), "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{m}x{k} * {k2}x{n}"),
            });
        }
        let ad = a.data();
        let bd = b.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let t = Tensor::from_vec(vec![m, n], out)?;
        self.record(Op::Matmul, vec![a.clone(), b.clone()], &t);
        Ok(t)
    }

    fn elementwise(
        &self,
        a: &Tensor,
        b: &Tensor,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        Self::check_finite(a, name)?;
        Self::check_finite(b, name)?;
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        let out: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::from_vec(a.shape(), out)?;
        self.record(op, vec![a.clone(), b.clone()], &t);
        Ok(t)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(a, b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(a, b, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(a, b, Op::Mul, "mul", |x, y| x * y)
    }

    fn broadcast_row(
        &self,
        x: &Tensor,
        v: &Tensor,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        Self::check_finite(x, name)?;
        Self::check_finite(v, name)?;
        let (b, cols) = rows_cols(&x.shape(), name)?;
        let vs = v.shape();
        if vs.len() != 1 || vs[0] != cols {
            return Err(TensorError::ShapeMismatch {
                op: name,
                detail: format!("matrix {:?} vs row vector {:?}", x.shape(), vs),
            });
        }
        let xd = x.data();
        let vd = v.data();
        let mut out = vec![0.0; b * cols];
        for i in 0..b {
            for j in 0..cols {
                out[i * cols + j] = f(xd[i * cols + j], vd[j]);
            }
        }
        let t = Tensor::from_vec(vec![b, cols], out)?;
        self.record(op, vec![x.clone(), v.clone()], &t);
        Ok(t)
    }

    /// Adds a per-feature row vector to every row (bias add).
    pub fn add_row(&self, x: &Tensor, v: &Tensor) -> Result<Tensor, TensorError> {
        self.broadcast_row(x, v, Op::AddRow, "add_row", |a, b| a + b)
    }

    /// Multiplies every row elementwise by a per-feature row vector.
    pub fn mul_row(&self, x: &Tensor, v: &Tensor) -> Result<Tensor, TensorError> {
        self.broadcast_row(x, v, Op::MulRow, "mul_row", |a, b| a * b)
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        Self::check_finite(x, "relu")?;
        let out: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::from_vec(x.shape(), out)?;
        self.record(Op::Relu, vec![x.clone()], &t);
        Ok(t)
    }

    pub fn mean_all(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        Self::check_finite(x, "mean_all")?;
        let d = x.data();
        let t = Tensor::scalar(d.iter().sum::<f64>() / d.len() as f64);
        self.record(Op::MeanAll, vec![x.clone()], &t);
        Ok(t)
    }

    pub fn sum_all(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        Self::check_finite(x, "sum_all")?;
        let t = Tensor::scalar(x.data().iter().sum());
        self.record(Op::SumAll, vec![x.clone()], &t);
        Ok(t)
    }

    /// Multiplies every entry by a constant.
    pub fn scale(&self, x: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        Self::check_finite(x, "scale")?;
        let out: Vec<f64> = x.data().iter().map(|v| v * c).collect();
        let t = Tensor::from_vec(x.shape(), out)?;
        self.record(Op::Scale(c), vec![x.clone()], &t);
        Ok(t)
    }

    /// Per-row log-sum-exp of a `[B, C]` tensor, returning shape `[B]`.
    pub fn logsumexp_rows(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        Self::check_finite(x, "logsumexp_rows")?;
        let (b, c) = rows_cols(&x.shape(), "logsumexp_rows")?;
        let xd = x.data();
        let mut out = vec![0.0; b];
        for i in 0..b {
            out[i] = logsumexp(&xd[i * c..(i + 1) * c]);
        }
        let t = Tensor::from_vec(vec![b], out)?;
        self.record(Op::LogSumExpRows, vec![x.clone()], &t);
        Ok(t)
    }

    /// Per-row softmax of a `[B, C]` tensor, computed via log-sum-exp.
    pub fn softmax_rows(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        Self::check_finite(x, "softmax_rows")?;
        let (b, c) = rows_cols(&x.shape(), "softmax_rows")?;
        let xd = x.data();
        let mut out = vec![0.0; b * c];
        for i in 0..b {
            let row = &xd[i * c..(i + 1) * c];
            let lse = logsumexp(row);
            for j in 0..c {
                out[i * c + j] = (row[j] - lse).exp();
            }
        }
        let t = Tensor::from_vec(vec![b, c], out)?;
        self.record(Op::SoftmaxRows, vec![x.clone()], &t);
        Ok(t)
    }

    /// Gathers the given rows of a `[B, F]` tensor into a `[k, F]` tensor.
    pub fn select_rows(&self, x: &Tensor, indices: &[usize]) -> Result<Tensor, TensorError> {
        Self::check_finite(x, "select_rows")?;
        let (b, f) = rows_cols(&x.shape(), "select_rows")?;
        let xd = x.data();
        let mut out = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            if i >= b {
                return Err(TensorError::RowOutOfBounds { index: i, rows: b });
            }
            out.extend_from_slice(&xd[i * f..(i + 1) * f]);
        }
        let t = Tensor::from_vec(vec![indices.len(), f], out)?;
        self.record(Op::SelectRows(indices.to_vec()), vec![x.clone()], &t);
        Ok(t)
    }

    /// out[b] = x[b, cols[b]] for a `[B, C]` tensor; used by cross-entropy.
    pub fn pick_cols(&self, x: &Tensor, cols: &[usize]) -> Result<Tensor, TensorError> {
        Self::check_finite(x, "pick_cols")?;
        let (b, c) = rows_cols(&x.shape(), "pick_cols")?;
        if cols.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "pick_cols",
                detail: format!("{b} rows vs {} indices", cols.len()),
            });
        }
        let xd = x.data();
        let mut out = vec![0.0; b];
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(TensorError::RowOutOfBounds { index: j, rows: c });
            }
            out[i] = xd[i * c + j];
        }
        let t = Tensor::from_vec(vec![b], out)?;
        self.record(Op::PickCols(cols.to_vec()), vec![x.clone()], &t);
        Ok(t)
    }

    /// Standardizes `x` (`[B, F]`) to zero mean / unit variance per unit, with
    /// `eps` added under the square root.
    pub fn standardize(&self, x: &Tensor, unit: NormUnit, eps: f64) -> Result<Tensor, TensorError> {
        Self::check_finite(x, "standardize")?;
        let (b, f) = rows_cols(&x.shape(), "standardize")?;
        if let NormUnit::PerSample { groups } = unit {
            if groups == 0 || f % groups != 0 {
                return Err(TensorError::BadGroupCount { groups, width: f });
            }
        }
        let xd = x.data();
        let mut out = vec![0.0; b * f];
        let mut inv_std = Vec::new();
        match unit {
            NormUnit::PerFeature => {
                inv_std.reserve(f);
                for j in 0..f {
                    let col: Vec<f64> = (0..b).map(|i| xd[i * f + j]).collect();
                    let (mean, var) = mean_var(&col);
                    let inv = 1.0 / (var + eps).sqrt();
                    inv_std.push(inv);
                    for i in 0..b {
                        out[i * f + j] = (xd[i * f + j] - mean) * inv;
                    }
                }
            }
            NormUnit::PerSample { groups } => {
                let gsize = f / groups;
                inv_std.reserve(b * groups);
                for i in 0..b {
                    for g in 0..groups {
                        let start = i * f + g * gsize;
                        let chunk = &xd[start..start + gsize];
                        let (mean, var) = mean_var(chunk);
                        let inv = 1.0 / (var + eps).sqrt();
                        inv_std.push(inv);
                        for (k, &v) in chunk.iter().enumerate() {
                            out[start + k] = (v - mean) * inv;
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(vec![b, f], out)?;
        self.record(Op::Standardize { unit, inv_std }, vec![x.clone()], &t);
        Ok(t)
    }

    /// Reverse pass from a scalar root. Adjoints accumulate additively into
    /// each grad-requiring tensor's grad buffer; intermediate adjoints live in
    /// a per-call map, so calling backward twice doubles the grads exactly.
    pub fn backward(&self, root: &Tensor) -> Result<(), TensorError> {
        if root.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root.shape()));
        }
        let mut adjoint: HashMap<u64, Vec<f64>> = HashMap::new();
        adjoint.insert(root.id(), vec![1.0]);
        let mut touched: HashMap<u64, Tensor> = HashMap::new();
        touched.insert(root.id(), root.clone());

        let entries = self.entries.borrow();
        for entry in entries.iter().rev() {
            let gout = match adjoint.get(&entry.output.id()) {
                Some(g) => g.clone(),
                None => continue,
            };
            for t in &entry.inputs {
                touched.entry(t.id()).or_insert_with(|| t.clone());
            }
            let grads = entry.input_adjoints(&gout);
            for (t, g) in entry.inputs.iter().zip(grads) {
                let slot = adjoint
                    .entry(t.id())
                    .or_insert_with(|| vec![0.0; t.numel()]);
                for (a, b) in slot.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
        for (id, t) in &touched {
            if t.requires_grad() {
                if let Some(adj) = adjoint.get(id) {
                    let mut inner = t.inner.borrow_mut();
                    for (g, a) in inner.grad.iter_mut().zip(adj) {
                        *g += a;
                    }
                }
            }
        }
        Ok(())
    }
}

impl Entry {
    fn input_adjoints(&self, gout: &[f64]) -> Vec<Vec<f64>> {
        match &self.op {
            Op::Matmul => {
                let a = &self.inputs[0];
                let b = &self.inputs[1];
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let ad = a.data();
                let bd = b.data();
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                // ga = gout * b^T, gb = a^T * gout
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += gout[i * n + j] * bd[p * n + j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                for p in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += ad[i * k + p] * gout[i * n + j];
                        }
                        gb[p * n + j] = s;
                    }
                }
                vec![ga, gb]
            }
            Op::Add => vec![gout.to_vec(), gout.to_vec()],
            Op::Sub => vec![gout.to_vec(), gout.iter().map(|g| -g).collect()],
            Op::Mul => {
                let ad = self.inputs[0].data();
                let bd = self.inputs[1].data();
                vec![
                    gout.iter().zip(&bd).map(|(g, b)| g * b).collect(),
                    gout.iter().zip(&ad).map(|(g, a)| g * a).collect(),
                ]
            }
            Op::AddRow => {
                let f = self.inputs[1].numel();
                let mut gv = vec![0.0; f];
                for (i, g) in gout.iter().enumerate() {
                    gv[i % f] += g;
                }
                vec![gout.to_vec(), gv]
            }
            Op::MulRow => {
                let xd = self.inputs[0].data();
                let vd = self.inputs[1].data();
                let f = vd.len();
                let gx: Vec<f64> = gout
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * vd[i % f])
                    .collect();
                let mut gv = vec![0.0; f];
                for (i, g) in gout.iter().enumerate() {
                    gv[i % f] += g * xd[i];
                }
                vec![gx, gv]
            }
            Op::Relu => {
                let xd = self.inputs[0].data();
                vec![gout
                    .iter()
                    .zip(&xd)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect()]
            }
            Op::MeanAll => {
                let n = self.inputs[0].numel();
                vec![vec![gout[0] / n as f64; n]]
            }
            Op::SumAll => {
                let n = self.inputs[0].numel();
                vec![vec![gout[0]; n]]
            }
            Op::Scale(c) => vec![gout.iter().map(|g| g * c).collect()],
            Op::LogSumExpRows => {
                let x = &self.inputs[0];
                let (b, c) = (x.shape()[0], x.shape()[1]);
                let xd = x.data();
                let out = self.output.data();
                let mut gx = vec![0.0; b * c];
                for i in 0..b {
                    for j in 0..c {
                        gx[i * c + j] = gout[i] * (xd[i * c + j] - out[i]).exp();
                    }
                }
                vec![gx]
            }
            Op::SoftmaxRows => {
                let p = self.output.data();
                let (b, c) = (self.inputs[0].shape()[0], self.inputs[0].shape()[1]);
                let mut gx = vec![0.0; b * c];
                for i in 0..b {
                    let dot: f64 = (0..c).map(|j| gout[i * c + j] * p[i * c + j]).sum();
                    for j in 0..c {
                        gx[i * c + j] = p[i * c + j] * (gout[i * c + j] - dot);
                    }
                }
                vec![gx]
            }
            Op::SelectRows(indices) => {
                let x = &self.inputs[0];
                let (b, f) = (x.shape()[0], x.shape()[1]);
                let mut gx = vec![0.0; b * f];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..f {
                        gx[i * f + j] += gout[k * f + j];
                    }
                }
                vec![gx]
            }
            Op::PickCols(cols) => {
                let x = &self.inputs[0];
                let (b, c) = (x.shape()[0], x.shape()[1]);
                let mut gx = vec![0.0; b * c];
                for (i, &j) in cols.iter().enumerate() {
                    gx[i * c + j] += gout[i];
                }
                vec![gx]
            }
            Op::Standardize { unit, inv_std } => {
                let x = &self.inputs[0];
                let (b, f) = (x.shape()[0], x.shape()[1]);
                let y = self.output.data();
                let mut gx = vec![0.0; b * f];
                // d/dx of y = (x - mean) * inv_std over unit S:
                //   gx_i = inv_std * (g_i - mean_S(g) - y_i * mean_S(g .* y))
                match unit {
                    NormUnit::PerFeature => {
                        for j in 0..f {
                            let idx: Vec<usize> = (0..b).map(|i| i * f + j).collect();
                            standardize_unit_adjoint(&idx, inv_std[j], gout, &y, &mut gx);
                        }
                    }
                    NormUnit::PerSample { groups } => {
                        let groups = *groups;
                        let gsize = f / groups;
                        for i in 0..b {
                            for g in 0..groups {
                                let start = i * f + g * gsize;
                                let idx: Vec<usize> = (start..start + gsize).collect();
                                standardize_unit_adjoint(
                                    &idx,
                                    inv_std[i * groups + g],
                                    gout,
                                    &y,
                                    &mut gx,
                                );
                            }
                        }
                    }
                }
                vec![gx]
            }
        }
    }
}

fn standardize_unit_adjoint(idx: &[usize], inv: f64, gout: &[f64], y: &[f64], gx: &mut [f64]) {
    let n = idx.len() as f64;
    let mean_g: f64 = idx.iter().map(|&i| gout[i]).sum::<f64>() / n;
    let mean_gy: f64 = idx.iter().map(|&i| gout[i] * y[i]).sum::<f64>() / n;
    for &i in idx {
        gx[i] = inv * (gout[i] - mean_g - y[i] * mean_gy);
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Numerically stable log(sum(exp(row))).
pub fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Compares analytic gradients against central finite differences.
///
/// `loss_fn` must rebuild the graph from the shared `params` handles and
/// return the tape plus a scalar loss. Returns the maximum over all parameter
/// entries of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &[Tensor],
    step: f64,
) -> Result<f64, TensorError>
where
    F: Fn() -> Result<(Tape, Tensor), TensorError>,
{
    let (_, l1) = loss_fn()?;
    let (_, l2) = loss_fn()?;
    if l1.value().to_bits() != l2.value().to_bits() {
        return Err(TensorError::NonDeterministicLoss);
    }

    for p in params {
        p.zero_grad();
    }
    let (tape, loss) = loss_fn()?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad()).collect();

    let mut max_err: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        let base = p.data();
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus[k] += step;
            p.set_data(&plus);
            let lp = loss_fn()?.1.value();
            let mut minus = base.clone();
            minus[k] -= step;
            p.set_data(&minus);
            let lm = loss_fn()?.1.value();
            p.set_data(&base);
            let numeric = (lp - lm) / (2.0 * step);
            let a = analytic[pi][k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
