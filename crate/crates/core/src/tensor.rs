//! A small reverse-mode differentiation engine over row-major `f64` arrays.
//!
//! Every operation records its parents and a vector-Jacobian product when
//! any input requires a gradient. [`Tensor::backward`] walks the recorded
//! graph once in reverse topological order, accumulating into `grad`.
//!
//! "Rows" always means the second-to-last axis, so rank-2 tensors behave as
//! matrices and higher ranks as batches of matrices.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::rng::SeedStream;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("dimensions must be positive, got {0:?}")]
    EmptyDim(Vec<usize>),
    #[error("data length {got} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, got: usize },
    #[error("dropout probability {0} outside [0, 1)")]
    DropoutRange(f64),
}

impl TensorError {
    pub fn code(&self) -> &'static str {
        match self {
            TensorError::Shape { .. } => "shape",
            TensorError::Invalid { .. } => "invalid",
            TensorError::EmptyDim(_) => "empty_dim",
            TensorError::DataLength { .. } => "data_length",
            TensorError::DropoutRange(_) => "dropout_range",
        }
    }
}

pub type TResult<T = Tensor> = Result<T, TensorError>;

type Backward = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Op {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: Backward,
}

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// Handle to a node in a differentiation graph. Cloning shares the node.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.0.op.as_ref().map(|o| o.name))
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a shape into `(batch, rows, cols)`; rank-1 counts as one row.
fn matrix_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, 1, shape[0]),
        n => (numel(&shape[..n - 2]), shape[n - 2], shape[n - 1]),
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// `c (+)= op(a) · op(b)` for row-major `m x k` and `k x n` operands, where
/// `op` optionally transposes the stored matrix.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // stored a is (m x k) or, when transposed, (k x m)
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths match the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<f64>) -> TResult {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::EmptyDim(shape.to_vec()));
        }
        if data.len() != numel(shape) {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                got: data.len(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> TResult {
        let t = Self::new(shape, data)?;
        Ok(Self::from_parts(t.shape().to_vec(), t.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> TResult {
        Self::new(shape, vec![0.0; numel(shape)])
    }

    pub fn scalar(x: f64) -> Tensor {
        Self::from_parts(vec![1], vec![x], false, None)
    }

    /// Result of an operation: records the graph only when a parent needs it.
    fn derived(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        let requires = parents.iter().any(|p| p.requires_grad());
        let op = requires.then(|| Op {
            name,
            parents,
            backward: Box::new(backward),
        });
        Self::from_parts(shape, data, requires, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|o| o.name)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// First element; convenient for scalar losses.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrite the values of a leaf in place (optimizer updates).
    pub fn set_data(&self, data: Vec<f64>) -> TResult<()> {
        if data.len() != self.len() {
            return Err(TensorError::DataLength {
                shape: self.shape().to_vec(),
                got: data.len(),
            });
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    /// Constant copy, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.shape().to_vec(), self.to_vec(), false, None)
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep seeded with ones. Leaves keep their accumulated
    /// gradients; intermediate gradients are released as the sweep passes.
    pub fn backward(&self) {
        if !self.requires_grad() {
            return;
        }
        // iterative post-order DFS gives a topological order
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(Rc::as_ptr(&t.0)) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in &op.parents {
                    if p.requires_grad() && !visited.contains(&Rc::as_ptr(&p.0)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        self.accumulate_grad(&vec![1.0; self.len()]);
        for t in order.iter().rev() {
            let Some(op) = &t.0.op else { continue };
            let g = t.0.grad.borrow_mut().take();
            let Some(g) = g else { continue };
            let grads = (op.backward)(&g);
            for (p, pg) in op.parents.iter().zip(grads) {
                if let Some(pg) = pg {
                    if p.requires_grad() {
                        p.accumulate_grad(&pg);
                    }
                }
            }
        }
    }

    fn needs(&self) -> bool {
        self.requires_grad()
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[..., m, k] x [k, n]` (shared right operand) or
    /// `[..., m, k] x [..., k, n]` with identical batch dimensions.
    pub fn matmul(&self, rhs: &Tensor) -> TResult {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (batch, m, k) = matrix_dims(sa);
        let (bb, k2, n) = matrix_dims(sb);
        let shared = sb.len() == 2;
        if k != k2 || (!shared && (sa[..sa.len() - 2] != sb[..sb.len() - 2])) {
            return Err(shape_err("matmul", sa, sb));
        }
        debug_assert!(shared || bb == batch);
        let mut out = vec![0.0; batch * m * n];
        {
            let (a, b) = (self.data(), rhs.data());
            for i in 0..batch {
                let bi = if shared { 0 } else { i };
                gemm(
                    m,
                    k,
                    n,
                    &a[i * m * k..(i + 1) * m * k],
                    false,
                    &b[bi * k * n..(bi + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let (a_t, b_t) = (self.clone(), rhs.clone());
        Ok(Self::derived("matmul", shape, out, vec![self.clone(), rhs.clone()], move |g| {
            let (a, b) = (a_t.data(), b_t.data());
            let ga = a_t.needs().then(|| {
                let mut ga = vec![0.0; batch * m * k];
                for i in 0..batch {
                    let bi = if shared { 0 } else { i };
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &b[bi * k * n..(bi + 1) * k * n],
                        true,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                ga
            });
            let gb = b_t.needs().then(|| {
                let mut gb = vec![0.0; b.len()];
                for i in 0..batch {
                    let bi = if shared { 0 } else { i };
                    gemm(
                        k,
                        m,
                        n,
                        &a[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        true,
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Elementwise sum; `rhs` may match a trailing suffix of `self`'s shape
    /// and is broadcast over the leading dimensions.
    pub fn add(&self, rhs: &Tensor) -> TResult {
        let (sa, sb) = (self.shape(), rhs.shape());
        let suffix_ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        // a [1, n] row also broadcasts against [.., n]
        let row_ok = sb.len() == 2 && sb[0] == 1 && sa.last() == sb.last();
        if !suffix_ok && !row_ok {
            return Err(shape_err("add", sa, sb));
        }
        let inner = rhs.len();
        let out: Vec<f64> = {
            let (a, b) = (self.data(), rhs.data());
            a.iter()
                .enumerate()
                .map(|(i, &x)| x + b[i % inner])
                .collect()
        };
        let (a_t, b_t) = (self.clone(), rhs.clone());
        Ok(Self::derived("add", sa.to_vec(), out, vec![self.clone(), rhs.clone()], move |g| {
            let ga = a_t.needs().then(|| g.to_vec());
            let gb = b_t.needs().then(|| {
                let mut gb = vec![0.0; inner];
                for (i, &x) in g.iter().enumerate() {
                    gb[i % inner] += x;
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    pub fn sub(&self, rhs: &Tensor) -> TResult {
        self.add(&rhs.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let out = self.data().iter().map(|&x| x * s).collect();
        Self::derived("scale", self.shape().to_vec(), out, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|&x| x * s).collect())]
        })
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> TResult {
        let s = self.shape();
        if s.len() < 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("needs rank >= 2, got {s:?}"),
            });
        }
        let (batch, r, c) = matrix_dims(s);
        let swap = move |src: &[f64], rows: usize, cols: usize| {
            let mut out = vec![0.0; src.len()];
            for b in 0..batch {
                let o = b * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        out[o + j * rows + i] = src[o + i * cols + j];
                    }
                }
            }
            out
        };
        let out = swap(&self.data(), r, c);
        let mut shape = s.to_vec();
        let n = shape.len();
        shape.swap(n - 1, n - 2);
        Ok(Self::derived("transpose", shape, out, vec![self.clone()], move |g| {
            vec![Some(swap(g, c, r))]
        }))
    }

    // ---- row manipulation --------------------------------------------------

    /// Concatenate along the row axis; all other dimensions must agree.
    pub fn concat_rows(parts: &[Tensor]) -> TResult {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let s0 = first.shape();
        if s0.len() < 2 {
            return Err(shape_err("concat_rows", s0, s0));
        }
        let n = s0.len();
        for p in parts {
            let s = p.shape();
            if s.len() != n || s[..n - 2] != s0[..n - 2] || s[n - 1] != s0[n - 1] {
                return Err(shape_err("concat_rows", s0, s));
            }
        }
        let (batch, _, cols) = matrix_dims(s0);
        let rows: Vec<usize> = parts.iter().map(|p| p.shape()[n - 2]).collect();
        let total: usize = rows.iter().sum();
        let mut out = Vec::with_capacity(batch * total * cols);
        for b in 0..batch {
            for (p, &r) in parts.iter().zip(&rows) {
                let d = p.data();
                out.extend_from_slice(&d[b * r * cols..(b + 1) * r * cols]);
            }
        }
        let mut shape = s0.to_vec();
        shape[n - 2] = total;
        let needs: Vec<bool> = parts.iter().map(|p| p.needs()).collect();
        Ok(Self::derived("concat_rows", shape, out, parts.to_vec(), move |g| {
            let mut grads: Vec<Option<Vec<f64>>> = rows
                .iter()
                .zip(&needs)
                .map(|(&r, &need)| need.then(|| Vec::with_capacity(batch * r * cols)))
                .collect();
            for b in 0..batch {
                let mut offset = b * total * cols;
                for (gp, &r) in grads.iter_mut().zip(&rows) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[offset..offset + r * cols]);
                    }
                    offset += r * cols;
                }
            }
            grads
        }))
    }

    /// Rows `start..end` along the row axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> TResult {
        let s = self.shape();
        if s.len() < 2 {
            return Err(shape_err("slice_rows", s, s));
        }
        let (batch, rows, cols) = matrix_dims(s);
        if start >= end || end > rows {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("range {start}..{end} outside {rows} rows"),
            });
        }
        let take = end - start;
        let mut out = Vec::with_capacity(batch * take * cols);
        {
            let d = self.data();
            for b in 0..batch {
                let o = (b * rows + start) * cols;
                out.extend_from_slice(&d[o..o + take * cols]);
            }
        }
        let mut shape = s.to_vec();
        let n = shape.len();
        shape[n - 2] = take;
        Ok(Self::derived("slice_rows", shape, out, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; batch * rows * cols];
            for b in 0..batch {
                let o = (b * rows + start) * cols;
                gx[o..o + take * cols].copy_from_slice(&g[b * take * cols..(b + 1) * take * cols]);
            }
            vec![Some(gx)]
        }))
    }

    /// Select rows by index (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&self, index: &[usize]) -> TResult {
        let s = self.shape();
        if s.len() < 2 || index.is_empty() {
            return Err(shape_err("gather_rows", s, &[index.len()]));
        }
        let (batch, rows, cols) = matrix_dims(s);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} outside {rows} rows"),
            });
        }
        let index = index.to_vec();
        let take = index.len();
        let mut out = Vec::with_capacity(batch * take * cols);
        {
            let d = self.data();
            for b in 0..batch {
                for &i in &index {
                    let o = (b * rows + i) * cols;
                    out.extend_from_slice(&d[o..o + cols]);
                }
            }
        }
        let mut shape = s.to_vec();
        let n = shape.len();
        shape[n - 2] = take;
        Ok(Self::derived("gather_rows", shape, out, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; batch * rows * cols];
            for b in 0..batch {
                for (j, &i) in index.iter().enumerate() {
                    let o = (b * rows + i) * cols;
                    let go = (b * take + j) * cols;
                    for c in 0..cols {
                        gx[o + c] += g[go + c];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Add the vector `v` (`[cols]` or `[1, cols]`) to rows `start..` of
    /// every matrix in `self`.
    pub fn add_to_rows(&self, v: &Tensor, start: usize) -> TResult {
        let s = self.shape();
        let (batch, rows, cols) = matrix_dims(s);
        if s.len() < 2 || v.len() != cols || start >= rows {
            return Err(shape_err("add_to_rows", s, v.shape()));
        }
        let mut out = self.to_vec();
        {
            let vd = v.data();
            for b in 0..batch {
                for r in start..rows {
                    let o = (b * rows + r) * cols;
                    for c in 0..cols {
                        out[o + c] += vd[c];
                    }
                }
            }
        }
        let (x_t, v_t) = (self.clone(), v.clone());
        Ok(Self::derived("add_to_rows", s.to_vec(), out, vec![self.clone(), v.clone()], move |g| {
            let gx = x_t.needs().then(|| g.to_vec());
            let gv = v_t.needs().then(|| {
                let mut gv = vec![0.0; cols];
                for b in 0..batch {
                    for r in start..rows {
                        let o = (b * rows + r) * cols;
                        for c in 0..cols {
                            gv[c] += g[o + c];
                        }
                    }
                }
                gv
            });
            vec![gx, gv]
        }))
    }

    // ---- normalization and activations ------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&self) -> TResult {
        let s = self.shape();
        let cols = *s.last().unwrap();
        let mut out = self.to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let y = out.clone();
        Ok(Self::derived("softmax", s.to_vec(), out, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; g.len()];
            for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    out[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Layer normalization over the last axis with learned gain and bias of
    /// shape `[cols]`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> TResult {
        let s = self.shape();
        let cols = *s.last().unwrap();
        if gain.len() != cols || bias.len() != cols {
            return Err(shape_err("layer_norm", s, gain.shape()));
        }
        let x = self.to_vec();
        let rows = x.len() / cols;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                xhat[r * cols + c] = (row[c] - mean) * is;
            }
        }
        let out: Vec<f64> = {
            let (gd, bd) = (gain.data(), bias.data());
            xhat.iter()
                .enumerate()
                .map(|(i, &h)| h * gd[i % cols] + bd[i % cols])
                .collect()
        };
        let (x_t, g_t, b_t) = (self.clone(), gain.clone(), bias.clone());
        Ok(Self::derived(
            "layer_norm",
            s.to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            move |g| {
                let gamma = g_t.data();
                let gx = x_t.needs().then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let o = r * cols;
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..cols {
                            let d = g[o + c] * gamma[c];
                            sum_d += d;
                            sum_dh += d * xhat[o + c];
                        }
                        let n = cols as f64;
                        for c in 0..cols {
                            let d = g[o + c] * gamma[c];
                            gx[o + c] = inv_std[r] * (d - sum_d / n - xhat[o + c] * sum_dh / n);
                        }
                    }
                    gx
                });
                let ggain = g_t.needs().then(|| {
                    let mut acc = vec![0.0; cols];
                    for (i, &gi) in g.iter().enumerate() {
                        acc[i % cols] += gi * xhat[i];
                    }
                    acc
                });
                let gbias = b_t.needs().then(|| {
                    let mut acc = vec![0.0; cols];
                    for (i, &gi) in g.iter().enumerate() {
                        acc[i % cols] += gi;
                    }
                    acc
                });
                vec![gx, ggain, gbias]
            },
        ))
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let x = self.to_vec();
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let yc = y.clone();
        Self::derived(name, self.shape().to_vec(), y, vec![self.clone()], move |g| {
            vec![Some(
                g.iter()
                    .zip(x.iter().zip(&yc))
                    .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect(),
            )]
        })
    }

    /// Exact (erf) GELU.
    pub fn gelu(&self) -> Tensor {
        use std::f64::consts::{FRAC_1_SQRT_2, PI};
        self.unary(
            "gelu",
            |x| 0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2)),
            |x, _| {
                let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
                cdf + x * pdf
            },
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// Inverted dropout: in training each entry is zeroed with probability
    /// `p` and survivors scaled by `1/(1-p)`; in evaluation the identity.
    pub fn dropout(&self, p: f64, train: bool, rng: &mut SeedStream) -> TResult {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::DropoutRange(p));
        }
        if !train || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.len())
            .map(|_| if rng.unit() < p { 0.0 } else { keep })
            .collect();
        let out = self.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(Self::derived("dropout", self.shape().to_vec(), out, vec![self.clone()], move |g| {
            vec![Some(g.iter().zip(&mask).map(|(x, m)| x * m).collect())]
        }))
    }

    // ---- reductions and losses --------------------------------------------

    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        let n = self.len();
        Self::derived("sum", vec![1], vec![total], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len();
        let m = self.data().iter().sum::<f64>() / n as f64;
        Self::derived("mean", vec![1], vec![m], vec![self.clone()], move |g| {
            vec![Some(vec![g[0] / n as f64; n])]
        })
    }

    /// Mean squared error against `target` of the same shape.
    pub fn mse(&self, target: &Tensor) -> TResult {
        if self.shape() != target.shape() {
            return Err(shape_err("mse", self.shape(), target.shape()));
        }
        let diff: Vec<f64> = self
            .data()
            .iter()
            .zip(target.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let n = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let (a_t, b_t) = (self.clone(), target.clone());
        Ok(Self::derived("mse", vec![1], vec![loss], vec![self.clone(), target.clone()], move |g| {
            let scale = 2.0 * g[0] / n;
            let ga = a_t.needs().then(|| diff.iter().map(|d| d * scale).collect());
            let gb = b_t.needs().then(|| diff.iter().map(|d| -d * scale).collect());
            vec![ga, gb]
        }))
    }

    /// Mean binary cross-entropy of logits against 0/1 targets, computed in
    /// the numerically stable form.
    pub fn bce_with_logits(&self, target: &Tensor) -> TResult {
        if self.shape() != target.shape() {
            return Err(shape_err("bce_with_logits", self.shape(), target.shape()));
        }
        let z = self.to_vec();
        let t = target.to_vec();
        let n = z.len() as f64;
        let loss = z
            .iter()
            .zip(&t)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let (z_t, t_t) = (self.clone(), target.clone());
        Ok(Self::derived(
            "bce_with_logits",
            vec![1],
            vec![loss],
            vec![self.clone(), target.clone()],
            move |g| {
                let gz = z_t.needs().then(|| {
                    z.iter()
                        .zip(&t)
                        .map(|(&z, &t)| g[0] * (sigmoid(z) - t) / n)
                        .collect()
                });
                let gt = t_t.needs().then(|| z.iter().map(|&z| -g[0] * z / n).collect());
                vec![gz, gt]
            },
        ))
    }

    /// Batch normalization of a `[batch, features]` input. Training mode uses
    /// batch statistics and updates `stats`; evaluation uses the running
    /// statistics.
    pub fn batch_norm_1d(
        &self,
        gain: &Tensor,
        bias: &Tensor,
        stats: &mut BatchNormStats,
        train: bool,
    ) -> TResult {
        let s = self.shape();
        if s.len() != 2 || s[1] != stats.features() || gain.len() != s[1] || bias.len() != s[1] {
            return Err(shape_err("batch_norm_1d", s, gain.shape()));
        }
        let (b, f) = (s[0], s[1]);
        let x = self.to_vec();
        let (mean, var) = if train {
            if b < 2 {
                return Err(TensorError::Invalid {
                    op: "batch_norm_1d",
                    msg: "training mode needs at least two samples".into(),
                });
            }
            let mut mean = vec![0.0; f];
            let mut var = vec![0.0; f];
            for r in 0..b {
                for c in 0..f {
                    mean[c] += x[r * f + c] / b as f64;
                }
            }
            for r in 0..b {
                for c in 0..f {
                    let d = x[r * f + c] - mean[c];
                    var[c] += d * d / b as f64;
                }
            }
            stats.update(&mean, &var, b);
            (mean, var)
        } else {
            (stats.running_mean.clone(), stats.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let xhat: Vec<f64> = (0..b * f)
            .map(|i| (x[i] - mean[i % f]) * inv_std[i % f])
            .collect();
        let out: Vec<f64> = {
            let (gd, bd) = (gain.data(), bias.data());
            xhat.iter()
                .enumerate()
                .map(|(i, &h)| h * gd[i % f] + bd[i % f])
                .collect()
        };
        let (x_t, g_t, b_t) = (self.clone(), gain.clone(), bias.clone());
        Ok(Self::derived(
            "batch_norm_1d",
            s.to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            move |g| {
                let gamma = g_t.data();
                let gx = x_t.needs().then(|| {
                    let mut gx = vec![0.0; b * f];
                    for c in 0..f {
                        if train {
                            let n = b as f64;
                            let mut sum_d = 0.0;
                            let mut sum_dh = 0.0;
                            for r in 0..b {
                                let d = g[r * f + c] * gamma[c];
                                sum_d += d;
                                sum_dh += d * xhat[r * f + c];
                            }
                            for r in 0..b {
                                let d = g[r * f + c] * gamma[c];
                                gx[r * f + c] =
                                    inv_std[c] * (d - sum_d / n - xhat[r * f + c] * sum_dh / n);
                            }
                        } else {
                            for r in 0..b {
                                gx[r * f + c] = g[r * f + c] * gamma[c] * inv_std[c];
                            }
                        }
                    }
                    gx
                });
                let ggain = g_t.needs().then(|| {
                    let mut acc = vec![0.0; f];
                    for (i, &gi) in g.iter().enumerate() {
                        acc[i % f] += gi * xhat[i];
                    }
                    acc
                });
                let gbias = b_t.needs().then(|| {
                    let mut acc = vec![0.0; f];
                    for (i, &gi) in g.iter().enumerate() {
                        acc[i % f] += gi;
                    }
                    acc
                });
                vec![gx, ggain, gbias]
            },
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BatchNormStats {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: BATCH_NORM_MOMENTUM,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential update with the batch mean and the unbiased batch variance.
    fn update(&mut self, mean: &[f64], biased_var: &[f64], n: usize) {
        let m = self.momentum;
        let correction = n as f64 / (n as f64 - 1.0);
        for c in 0..mean.len() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * biased_var[c] * correction;
        }
    }
}

/// Central finite-difference gradient checking.
pub mod gradcheck {
    use super::Tensor;

    /// Numerical gradient of the scalar `f` with respect to each input's
    /// entries, by central differences with step `eps`. Inputs are perturbed
    /// in place and restored.
    pub fn numeric(inputs: &[Tensor], eps: f64, f: &dyn Fn() -> f64) -> Vec<Vec<f64>> {
        inputs
            .iter()
            .map(|t| {
                (0..t.len())
                    .map(|i| {
                        let orig = t.data()[i];
                        t.update_data(|d| d[i] = orig + eps);
                        let up = f();
                        t.update_data(|d| d[i] = orig - eps);
                        let down = f();
                        t.update_data(|d| d[i] = orig);
                        (up - down) / (2.0 * eps)
                    })
                    .collect()
            })
            .collect()
    }

    /// `‖a − n‖ / max(‖a‖, ‖n‖)` over the concatenated vectors; zero when
    /// both are zero.
    pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        let diff = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    /// Runs `build` once for analytic gradients (via backward) and then by
    /// finite differences; returns the worst per-input relative error.
    pub fn check(inputs: &[Tensor], eps: f64, build: &dyn Fn() -> Tensor) -> f64 {
        let (analytic, numeric) = both(inputs, eps, build);
        analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| relative_error(a, n))
            .fold(0.0, f64::max)
    }

    /// Relative error over all inputs' gradients taken as one vector. Use
    /// when some inputs have an identically zero gradient, where a
    /// per-input ratio only compares rounding noise.
    pub fn check_joint(inputs: &[Tensor], eps: f64, build: &dyn Fn() -> Tensor) -> f64 {
        let (analytic, numeric) = both(inputs, eps, build);
        relative_error(&analytic.concat(), &numeric.concat())
    }

    fn both(inputs: &[Tensor], eps: f64, build: &dyn Fn() -> Tensor) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        for t in inputs {
            t.zero_grad();
        }
        let loss = build();
        loss.backward();
        let analytic = inputs
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        (analytic, numeric(inputs, eps, &|| build().item()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(shape: &[usize], rng: &mut SeedStream) -> Tensor {
        Tensor::param(shape, (0..numel(shape)).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn softmax_uniform_and_rows_sum() {
        let t = Tensor::new(&[1, 3], vec![0.0; 3]).unwrap();
        for &p in t.softmax().unwrap().data().iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut rng = SeedStream::new(1);
        let s = randn(&[3, 4, 5], &mut rng).scale(10.0).softmax().unwrap();
        for row in s.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_zero_gradient_at_minimum() {
        let x = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let loss = x.mse(&x.detach()).unwrap();
        loss.backward();
        assert_eq!(loss.item(), 0.0);
        assert!(x.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn shared_use_accumulates() {
        let x = Tensor::param(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let y = x.matmul(&x).unwrap().add(&x).unwrap().sum();
        let err = gradcheck::check(&[x.clone()], 1e-6, &|| {
            x.matmul(&x).unwrap().add(&x).unwrap().sum()
        });
        y.backward();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn dropout_modes() {
        let mut rng = SeedStream::new(3);
        let x = randn(&[4, 5], &mut rng);
        let a = x.dropout(0.0, true, &mut rng).unwrap();
        assert_eq!(a.to_vec(), x.to_vec());
        let b = x.dropout(0.7, false, &mut rng).unwrap();
        assert_eq!(b.to_vec(), x.to_vec());
        assert_eq!(
            x.dropout(1.0, true, &mut rng).unwrap_err(),
            TensorError::DropoutRange(1.0)
        );
        let c = x.dropout(0.5, true, &mut rng).unwrap();
        for (o, i) in c.data().iter().zip(x.data().iter()) {
            assert!(*o == 0.0 || (*o - 2.0 * i).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 3]).unwrap();
        assert!(matches!(a.matmul(&b), Err(TensorError::Shape { .. })));
        assert!(matches!(
            a.add(&Tensor::zeros(&[2]).unwrap()),
            Err(TensorError::Shape { .. })
        ));
        assert!(matches!(Tensor::zeros(&[0, 3]), Err(TensorError::EmptyDim(_))));
        assert!(matches!(
            a.slice_rows(1, 5),
            Err(TensorError::Invalid { .. })
        ));
    }

    #[test]
    fn batch_norm_running_stats_converge() {
        let mut stats = BatchNormStats::new(1);
        let x = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let (g, b) = (Tensor::scalar(1.0), Tensor::scalar(0.0));
        let mu = 3.0;
        let var = ((4.0 + 1.0 + 0.0 + 9.0) / 3.0) as f64;
        let mut prev = f64::INFINITY;
        for _ in 0..200 {
            x.batch_norm_1d(&g, &b, &mut stats, true).unwrap();
            let gap = (stats.running_mean[0] - mu).abs() + (stats.running_var[0] - var).abs();
            assert!(gap < prev || gap < 1e-12);
            prev = gap;
        }
        assert!((stats.running_mean[0] - mu).abs() < 1e-8);
        assert!((stats.running_var[0] - var).abs() < 1e-8);
    }

    #[test]
    fn constant_inputs_build_no_graph() {
        let a = Tensor::new(&[2, 2], vec![1.0; 4]).unwrap();
        let b = a.matmul(&a).unwrap().relu();
        assert!(!b.requires_grad());
        assert!(b.op_name().is_none());
    }
}
