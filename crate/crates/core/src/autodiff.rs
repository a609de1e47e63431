//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every forward operation as a node holding its output
//! value and enough auxiliary state to run the backward rule. Nodes are
//! appended in execution order, so the tape is already topologically sorted
//! and [`Tape::backward`] is a single reverse sweep.
//!
//! Leaves borrow parameter tensors (`Cow::Borrowed`) so building a graph
//! over a large embedding table does not copy it.
//!
//! Matrices are row-major `[rows × cols]`. Encoder sequences of `B` pairs use
//! a block layout: rows `0..B` hold the source tokens and rows `B..2B` the
//! relation tokens, so token `i` of pair `b` lives at row `i * B + b`.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{KgeError, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic layers are active and normalizations use batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddRow {
        a: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        a: Var,
        scale: T,
    },
    Mask {
        a: Var,
        mask: Vec<T>,
    },
    ColumnNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    RowNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Var, Var),
    SliceRows {
        a: Var,
        start: usize,
    },
    PairLogits {
        q: Var,
        k: Var,
        heads: usize,
    },
    PairMix {
        p: Var,
        v: Var,
        heads: usize,
    },
    ModeTwo {
        t: Var,
        r: Var,
    },
    Sum(Var),
    Mean(Var),
    BceLogits {
        logits: Var,
        positives: Vec<Vec<u32>>,
        smoothing: T,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Mul(a, b) | Op::ConcatRows(a, b) => vec![*a, *b],
            Op::AddRow { a, bias } => vec![*a, *bias],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax { a, .. }
            | Op::Mask { a, .. }
            | Op::SliceRows { a, .. } => vec![*a],
            Op::ColumnNorm { x, gamma, beta, .. } | Op::RowNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::GatherRows { table, .. } => vec![*table],
            Op::PairLogits { q, k, .. } => vec![*q, *k],
            Op::PairMix { p, v, .. } => vec![*p, *v],
            Op::ModeTwo { t, r } => vec![*t, *r],
            Op::BceLogits { logits, .. } => vec![*logits],
        }
    }
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a train-mode batch norm, for running averages.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n − 1) variance, as used for running estimates.
    pub var_unbiased: Vec<T>,
}

/// Running mean/variance buffers of a batch normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(features: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
            momentum: T::from_f64_lossy(0.1),
            eps: T::from_f64_lossy(1e-5),
        }
    }

    pub fn update(&mut self, stats: &BatchStats<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var_unbiased) {
            *r = keep * *r + m * b;
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a node that requires grad; `None` when nothing flowed into it.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x)) − x·y`, written so it never overflows.
fn bce_term<T: Scalar>(x: T, y: T) -> T {
    x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p()
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn dims(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.rows_cols()
    }

    fn data(&self, var: Var) -> &[T] {
        self.nodes[var.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions) && inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) {
            debug_assert!(value.is_finite(), "non-finite output from finite inputs");
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf borrowing an existing tensor (typically a parameter).
    pub fn leaf(&mut self, value: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf owning its value.
    pub fn constant(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(KgeError::shape("matmul", sa, sb));
        }
        let (m, k) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(KgeError::shape("matmul", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(trans_a, trans_b, m, k, n, self.data(a), self.data(b), &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                m,
                k,
                n,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(KgeError::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.dims(a);
        if self.value(bias).len() != cols {
            return Err(KgeError::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.data(bias);
        let out: Vec<T> = self
            .data(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::AddRow { a, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(KgeError::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out: Vec<T> = self.data(a).iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push(value, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.data(a).iter().map(|&x| x.max(T::zero())).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push(value, Op::Sigmoid(a))
    }

    /// Row-wise `softmax(scale · x)`, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var, scale: T) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if cols == 0 {
            return Err(KgeError::shape("softmax_rows", self.shape(a), &[rows, 1]));
        }
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.data(a).chunks(cols) {
            let max = row
                .iter()
                .map(|&x| x * scale)
                .fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &x in row {
                let e = (x * scale - max).exp();
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= total);
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { a, scale }))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(KgeError::Parameter(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out: Vec<T> = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Mask { a, mask }))
    }

    /// Per-feature batch normalization of a `[B × d]` matrix.
    ///
    /// Train mode normalizes with batch statistics (biased variance) and
    /// returns them so the caller can update `state`; eval mode uses the
    /// running estimates in `state`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState<T>,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (rows, cols) = self.dims(x);
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(KgeError::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        if state.running_mean.len() != cols {
            return Err(KgeError::shape("batch_norm", self.shape(x), &[state.running_mean.len()]));
        }
        let data = self.data(x);
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(KgeError::Contract(format!(
                        "batch_norm in train mode needs at least 2 rows, got {rows}"
                    )));
                }
                let n = T::from_usize_lossy(rows);
                let mut mean = vec![T::zero(); cols];
                for row in data.chunks(cols) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![T::zero(); cols];
                for row in data.chunks(cols) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let unbiased: Vec<T> = var
                    .iter()
                    .map(|&s| s / T::from_usize_lossy(rows - 1))
                    .collect();
                var.iter_mut().for_each(|s| *s /= n);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone(), None),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + state.eps).sqrt()).collect();
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut out = Vec::with_capacity(rows * cols);
        for row in data.chunks(cols) {
            for j in 0..cols {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let var_out = self.push(
            value,
            Op::ColumnNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        );
        Ok((var_out, stats))
    }

    /// Normalizes each row over its last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (_, cols) = self.dims(x);
        if cols == 0 || self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(KgeError::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let n = T::from_usize_lossy(cols);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = Vec::with_capacity(self.value(x).len());
        let mut inv_std = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..cols {
                let h = (row[j] - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::RowNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Selects rows of a `[N × d]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(KgeError::Contract(format!(
                "row index {bad} out of range for table with {rows} rows"
            )));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![idx.len(), cols], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Stacks `a` on top of `b`; with two `[1 × d]` rows this yields `[2 × d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ca != cb {
            return Err(KgeError::shape("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(self.data(a));
        out.extend_from_slice(self.data(b));
        let value = Tensor::new(vec![ra + rb, ca], out)?;
        Ok(self.push(value, Op::ConcatRows(a, b)))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if start + len > rows {
            return Err(KgeError::shape("slice_rows", self.shape(a), &[start + len, cols]));
        }
        let out = self.data(a)[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], out)?;
        Ok(self.push(value, Op::SliceRows { a, start }))
    }

    /// Per-pair, per-head attention logits `Q_i K_iᵀ` (unscaled).
    ///
    /// `q` and `k` are `[2B × heads·w]` in block layout; the result is
    /// `[(B·heads·2) × 2]` with row `(b·heads + h)·2 + i` holding the logits
    /// of token `i` of pair `b` against both tokens of that pair in head `h`.
    pub fn pair_logits(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        let (rows, cols) = self.dims(q);
        if self.shape(q) != self.shape(k) || rows % 2 != 0 || heads == 0 || cols % heads != 0 {
            return Err(KgeError::shape("pair_logits", self.shape(q), self.shape(k)));
        }
        let pairs = rows / 2;
        let w = cols / heads;
        let (qd, kd) = (self.data(q), self.data(k));
        let mut out = vec![T::zero(); pairs * heads * 4];
        for b in 0..pairs {
            for h in 0..heads {
                for i in 0..2 {
                    let qrow = &qd[(i * pairs + b) * cols + h * w..][..w];
                    for j in 0..2 {
                        let krow = &kd[(j * pairs + b) * cols + h * w..][..w];
                        out[((b * heads + h) * 2 + i) * 2 + j] =
                            qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum();
                    }
                }
            }
        }
        let value = Tensor::new(vec![pairs * heads * 2, 2], out)?;
        Ok(self.push(value, Op::PairLogits { q, k, heads }))
    }

    /// Applies per-pair, per-head attention weights to the values:
    /// `H_i = A_i V_i`, with heads concatenated along columns.
    pub fn pair_mix(&mut self, p: Var, v: Var, heads: usize) -> Result<Var> {
        let (rows, cols) = self.dims(v);
        if rows % 2 != 0 || heads == 0 || cols % heads != 0 {
            return Err(KgeError::shape("pair_mix", self.shape(p), self.shape(v)));
        }
        let pairs = rows / 2;
        if self.shape(p) != [pairs * heads * 2, 2] {
            return Err(KgeError::shape("pair_mix", self.shape(p), self.shape(v)));
        }
        let w = cols / heads;
        let (pd, vd) = (self.data(p), self.data(v));
        let mut out = vec![T::zero(); rows * cols];
        for b in 0..pairs {
            for h in 0..heads {
                for i in 0..2 {
                    let dst = (i * pairs + b) * cols + h * w;
                    for j in 0..2 {
                        let a = pd[((b * heads + h) * 2 + i) * 2 + j];
                        let src = &vd[(j * pairs + b) * cols + h * w..][..w];
                        for (o, &x) in out[dst..dst + w].iter_mut().zip(src) {
                            *o += a * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::PairMix { p, v, heads }))
    }

    /// Row-wise contraction of a `[B × d·d]` tensor (viewed as `d × d` per
    /// row, index `j·d + k`) with a `[B × d]` vector over `j`, giving `[B × d]`.
    pub fn mode_two(&mut self, t: Var, r: Var) -> Result<Var> {
        let (rows, cols) = self.dims(t);
        let (rrows, d) = self.dims(r);
        if rows != rrows || cols != d * d {
            return Err(KgeError::shape("mode_two", self.shape(t), self.shape(r)));
        }
        let (td, rd) = (self.data(t), self.data(r));
        let mut out = vec![T::zero(); rows * d];
        for b in 0..rows {
            let trow = &td[b * cols..(b + 1) * cols];
            let rrow = &rd[b * d..(b + 1) * d];
            let orow = &mut out[b * d..(b + 1) * d];
            for (j, &rj) in rrow.iter().enumerate() {
                for (o, &x) in orow.iter_mut().zip(&trow[j * d..(j + 1) * d]) {
                    *o += x * rj;
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(value, Op::ModeTwo { t, r }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize_lossy(self.value(a).len().max(1));
        let s = self.data(a).iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Binary cross-entropy on logits, averaged over candidates and rows.
    ///
    /// Row `b` has label 1 on every entity in `positives[b]` and 0 elsewhere;
    /// with `smoothing > 0` labels become `y·(1 − ls) + ls/N`.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        positives: Vec<Vec<u32>>,
        smoothing: f64,
    ) -> Result<Var> {
        let (rows, cols) = self.dims(logits);
        if positives.len() != rows {
            return Err(KgeError::shape("bce_with_logits", self.shape(logits), &[positives.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(KgeError::Parameter(format!(
                "label smoothing {smoothing} outside [0, 1)"
            )));
        }
        if let Some(bad) = positives.iter().flatten().find(|&&t| t as usize >= cols) {
            return Err(KgeError::Contract(format!(
                "target {bad} out of range for {cols} candidates"
            )));
        }
        let ls = T::from_f64_lossy(smoothing);
        let (y_neg, y_pos) = label_values::<T>(ls, cols);
        let data = self.data(logits);
        let mut total = T::zero();
        for (row, pos) in data.chunks(cols).zip(&positives) {
            let mut row_sum = T::zero();
            for &x in row {
                row_sum += bce_term(x, y_neg);
            }
            for &t in pos {
                let x = row[t as usize];
                row_sum += bce_term(x, y_pos) - bce_term(x, y_neg);
            }
            total += row_sum / T::from_usize_lossy(cols);
        }
        let loss = total / T::from_usize_lossy(rows.max(1));
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                positives,
                smoothing: ls,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`, returning gradients of every
    /// node that requires grad and received one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(KgeError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }

    fn backward_node(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                m,
                k,
                n,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if let Some(da) = self.acc(grads, a) {
                    if trans_a {
                        gemm(trans_b, true, k, n, m, bd, g, da, true);
                    } else {
                        gemm(false, !trans_b, m, n, k, g, bd, da, true);
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    if trans_b {
                        gemm(true, trans_a, n, m, k, g, ad, db, true);
                    } else {
                        gemm(!trans_a, false, k, m, n, ad, g, db, true);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            &Op::AddRow { a, bias } => {
                if let Some(da) = self.acc(grads, a) {
                    da.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                let cols = self.value(bias).len();
                if let Some(db) = self.acc(grads, bias) {
                    for row in g.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                if let Some(da) = self.acc(grads, a) {
                    for ((d, &g), &y) in da.iter_mut().zip(g).zip(bd) {
                        *d += g * y;
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    for ((d, &g), &x) in db.iter_mut().zip(g).zip(ad) {
                        *d += g * x;
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(da) = self.acc(grads, a) {
                    da.iter_mut().zip(g).for_each(|(d, &g)| *d += g * c);
                }
            }
            &Op::Relu(a) => {
                let ad = self.data(a);
                if let Some(da) = self.acc(grads, a) {
                    for ((d, &g), &x) in da.iter_mut().zip(g).zip(ad) {
                        if x > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(da) = self.acc(grads, a) {
                    for ((d, &g), &y) in da.iter_mut().zip(g).zip(out) {
                        *d += g * y * (T::one() - y);
                    }
                }
            }
            &Op::Softmax { a, scale } => {
                let (_, cols) = self.dims(a);
                if let Some(da) = self.acc(grads, a) {
                    for ((drow, grow), yrow) in
                        da.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += scale * y * (g - dot);
                        }
                    }
                }
            }
            Op::Mask { a, mask } => {
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &g), &m) in da.iter_mut().zip(g).zip(mask) {
                        *d += g * m;
                    }
                }
            }
            Op::ColumnNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let cols = inv_std.len();
                let rows = xhat.len() / cols;
                let gam = self.data(*gamma);
                let mut sum_g = vec![T::zero(); cols];
                let mut sum_gx = vec![T::zero(); cols];
                for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for j in 0..cols {
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * hrow[j];
                    }
                }
                if let Some(dg) = self.acc(grads, *gamma) {
                    dg.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d += s);
                }
                if let Some(db) = self.acc(grads, *beta) {
                    db.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s);
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let n = T::from_usize_lossy(rows);
                    for ((drow, grow), hrow) in
                        dx.chunks_mut(cols).zip(g.chunks(cols)).zip(xhat.chunks(cols))
                    {
                        for j in 0..cols {
                            let scale = gam[j] * inv_std[j];
                            if *batch_stats {
                                *drow.get_mut(j).unwrap() += scale
                                    * (grow[j] - sum_g[j] / n - hrow[j] * sum_gx[j] / n);
                            } else {
                                drow[j] += scale * grow[j];
                            }
                        }
                    }
                }
            }
            Op::RowNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = self.value(*gamma).len();
                let gam = self.data(*gamma);
                if let Some(dg) = self.acc(grads, *gamma) {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for grow in g.chunks(cols) {
                        db.iter_mut().zip(grow).for_each(|(d, &g)| *d += g);
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let n = T::from_usize_lossy(cols);
                    for (((drow, grow), hrow), &inv) in dx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .zip(inv_std)
                    {
                        let mut s = T::zero();
                        let mut sx = T::zero();
                        for j in 0..cols {
                            let gh = grow[j] * gam[j];
                            s += gh;
                            sx += gh * hrow[j];
                        }
                        for j in 0..cols {
                            let gh = grow[j] * gam[j];
                            drow[j] += inv * (gh - s / n - hrow[j] * sx / n);
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let (_, cols) = self.dims(*table);
                if let Some(dt) = self.acc(grads, *table) {
                    for (grow, &i) in g.chunks(cols).zip(idx) {
                        for (d, &g) in dt[i * cols..(i + 1) * cols].iter_mut().zip(grow) {
                            *d += g;
                        }
                    }
                }
            }
            &Op::ConcatRows(a, b) => {
                let split = self.value(a).len();
                if let Some(da) = self.acc(grads, a) {
                    da.iter_mut().zip(&g[..split]).for_each(|(d, &g)| *d += g);
                }
                if let Some(db) = self.acc(grads, b) {
                    db.iter_mut().zip(&g[split..]).for_each(|(d, &g)| *d += g);
                }
            }
            &Op::SliceRows { a, start } => {
                let (_, cols) = self.dims(a);
                if let Some(da) = self.acc(grads, a) {
                    da[start * cols..start * cols + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &g)| *d += g);
                }
            }
            &Op::PairLogits { q, k, heads } => {
                let (rows, cols) = self.dims(q);
                let pairs = rows / 2;
                let w = cols / heads;
                let (qd, kd) = (self.data(q), self.data(k));
                let at = |b: usize, h: usize, i: usize, j: usize| ((b * heads + h) * 2 + i) * 2 + j;
                if let Some(dq) = self.acc(grads, q) {
                    for b in 0..pairs {
                        for h in 0..heads {
                            for i in 0..2 {
                                let dst = (i * pairs + b) * cols + h * w;
                                for j in 0..2 {
                                    let gv = g[at(b, h, i, j)];
                                    let krow = &kd[(j * pairs + b) * cols + h * w..][..w];
                                    for (d, &x) in dq[dst..dst + w].iter_mut().zip(krow) {
                                        *d += gv * x;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dk) = self.acc(grads, k) {
                    for b in 0..pairs {
                        for h in 0..heads {
                            for j in 0..2 {
                                let dst = (j * pairs + b) * cols + h * w;
                                for i in 0..2 {
                                    let gv = g[at(b, h, i, j)];
                                    let qrow = &qd[(i * pairs + b) * cols + h * w..][..w];
                                    for (d, &x) in dk[dst..dst + w].iter_mut().zip(qrow) {
                                        *d += gv * x;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            &Op::PairMix { p, v, heads } => {
                let (rows, cols) = self.dims(v);
                let pairs = rows / 2;
                let w = cols / heads;
                let (pd, vd) = (self.data(p), self.data(v));
                if let Some(dp) = self.acc(grads, p) {
                    for b in 0..pairs {
                        for h in 0..heads {
                            for i in 0..2 {
                                let grow = &g[(i * pairs + b) * cols + h * w..][..w];
                                for j in 0..2 {
                                    let vrow = &vd[(j * pairs + b) * cols + h * w..][..w];
                                    dp[((b * heads + h) * 2 + i) * 2 + j] +=
                                        grow.iter().zip(vrow).map(|(&x, &y)| x * y).sum();
                                }
                            }
                        }
                    }
                }
                if let Some(dv) = self.acc(grads, v) {
                    for b in 0..pairs {
                        for h in 0..heads {
                            for j in 0..2 {
                                let dst = (j * pairs + b) * cols + h * w;
                                for i in 0..2 {
                                    let a = pd[((b * heads + h) * 2 + i) * 2 + j];
                                    let grow = &g[(i * pairs + b) * cols + h * w..][..w];
                                    for (d, &x) in dv[dst..dst + w].iter_mut().zip(grow) {
                                        *d += a * x;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            &Op::ModeTwo { t, r } => {
                let (rows, d) = self.dims(r);
                let cols = d * d;
                let (td, rd) = (self.data(t), self.data(r));
                if let Some(dt) = self.acc(grads, t) {
                    for b in 0..rows {
                        let grow = &g[b * d..(b + 1) * d];
                        for j in 0..d {
                            let rj = rd[b * d + j];
                            let dst = &mut dt[b * cols + j * d..b * cols + (j + 1) * d];
                            for (x, &gk) in dst.iter_mut().zip(grow) {
                                *x += gk * rj;
                            }
                        }
                    }
                }
                if let Some(dr) = self.acc(grads, r) {
                    for b in 0..rows {
                        let grow = &g[b * d..(b + 1) * d];
                        for j in 0..d {
                            let trow = &td[b * cols + j * d..b * cols + (j + 1) * d];
                            dr[b * d + j] += trow.iter().zip(grow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(da) = self.acc(grads, a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(a) => {
                let n = T::from_usize_lossy(self.value(a).len().max(1));
                if let Some(da) = self.acc(grads, a) {
                    da.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::BceLogits {
                logits,
                positives,
                smoothing,
            } => {
                let (rows, cols) = self.dims(*logits);
                let ld = self.data(*logits);
                let (y_neg, y_pos) = label_values::<T>(*smoothing, cols);
                let scale = g[0] / (T::from_usize_lossy(rows) * T::from_usize_lossy(cols));
                if let Some(dl) = self.acc(grads, *logits) {
                    for ((drow, lrow), pos) in
                        dl.chunks_mut(cols).zip(ld.chunks(cols)).zip(positives)
                    {
                        for (d, &x) in drow.iter_mut().zip(lrow) {
                            *d += scale * (sigmoid(x) - y_neg);
                        }
                        for &t in pos {
                            drow[t as usize] -= scale * (y_pos - y_neg);
                        }
                    }
                }
            }
        }
    }
}

/// Negative and positive label values under smoothing `ls` over `n` candidates.
fn label_values<T: Scalar>(ls: T, n: usize) -> (T, T) {
    let spread = ls / T::from_usize_lossy(n);
    (spread, T::one() - ls + spread)
}

/// Logistic sigmoid applied elementwise.
pub fn sigmoid_slice<T: Scalar>(xs: &[T]) -> Vec<T> {
    xs.iter().map(|&x| sigmoid(x)).collect()
}

/// Stable per-element BCE term on a logit, exposed for loss utilities.
pub(crate) fn bce_logit_term<T: Scalar>(x: T, y: T) -> T {
    bce_term(x, y)
}
