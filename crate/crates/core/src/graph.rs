//! Recorded-operation tape with reverse-mode gradients.
//!
//! A [`Tape`] records every operation applied to its [`Value`] handles
//! during a forward pass. [`Tape::gradient`] replays the record in
//! reverse and returns `∂loss/∂p` for every named variable. The record
//! is append-only and topologically ordered by construction, so
//! replaying it twice yields bit-identical gradients.
//!
//! All graph operations work on matrices; scalars are `1×1`. The only
//! broadcasting is row-vector bias addition.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::tensor::{require_matrix, NumericError, Tensor};

/// Handle to a node on a [`Tape`]. Plain index, cheap to copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

/// Gradients keyed by variable name, in name order.
pub type GradientMap = BTreeMap<String, Tensor>;

enum Op {
    Leaf,
    Matmul(Value, Value),
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Scale(Value, f64),
    AddRowBias(Value, Value),
    Relu(Value),
    Transpose(Value),
    RowSoftmax(Value),
    CausalRowSoftmax(Value),
    RowLogSoftmax(Value),
    LayerNorm {
        x: Value,
        gain: Value,
        bias: Value,
        eps: f64,
    },
    EmbeddingLookup {
        table: Value,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Value>),
    ConcatRows(Vec<Value>),
    SliceRows {
        x: Value,
        start: usize,
        end: usize,
    },
    GatherEntries {
        x: Value,
        picks: Vec<(usize, usize)>,
    },
    SumAll(Value),
    MeanAll(Value),
    MeanRows(Value),
    L2NormalizeRows(Value),
    KlFromConstRows {
        attn: Value,
        target: Tensor,
        annotated: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// The computation record: an arena of nodes plus the registry of
/// named differentiable variables.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    vars: RefCell<Vec<(String, Value)>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op) -> Value {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Value(nodes.len() - 1)
    }

    /// Registers a named differentiable variable (a trainable tensor or
    /// an input we want gradients for).
    pub fn var(&self, name: impl Into<String>, value: Tensor) -> Value {
        let v = self.push(value, Op::Leaf);
        self.vars.borrow_mut().push((name.into(), v));
        v
    }

    /// Inserts a constant leaf; no gradient is tracked for it.
    pub fn constant(&self, value: Tensor) -> Value {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&self, x: f64) -> Value {
        self.constant(Tensor::scalar(x))
    }

    /// Clones the tensor held at `v`.
    pub fn value(&self, v: Value) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar_of(&self, v: Value) -> f64 {
        self.nodes.borrow()[v.0].value.scalar_value()
    }

    pub fn shape_of(&self, v: Value) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn with<R>(&self, v: Value, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    // ----- primitives ---------------------------------------------------

    /// Standard matrix product `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&self, a: Value, b: Value) -> Result<Value, NumericError> {
        let out = self.with(a, |ta| {
            self.with(b, |tb| {
                require_matrix(ta, "matmul")?;
                require_matrix(tb, "matmul")?;
                if ta.cols() != tb.rows() {
                    return Err(NumericError::ShapeMismatch {
                        op: "matmul",
                        left: ta.shape().to_vec(),
                        right: tb.shape().to_vec(),
                    });
                }
                Ok(matmul_raw(ta, tb))
            })
        })?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    pub fn add(&self, a: Value, b: Value) -> Result<Value, NumericError> {
        let out = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Value, b: Value) -> Result<Value, NumericError> {
        let out = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&self, a: Value, b: Value) -> Result<Value, NumericError> {
        let out = self.elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn elementwise(
        &self,
        a: Value,
        b: Value,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericError> {
        self.with(a, |ta| {
            self.with(b, |tb| {
                if ta.shape() != tb.shape() {
                    return Err(NumericError::ShapeMismatch {
                        op,
                        left: ta.shape().to_vec(),
                        right: tb.shape().to_vec(),
                    });
                }
                let data = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                Tensor::new(ta.shape().to_vec(), data)
            })
        })
    }

    /// Multiplication by a compile-time constant (not differentiable in
    /// the constant).
    pub fn scale(&self, a: Value, c: f64) -> Value {
        let out = self.with(a, |t| {
            let mut r = t.clone();
            r.scale_in_place(c);
            r
        });
        self.push(out, Op::Scale(a, c))
    }

    /// `[m×n] + [1×n]` broadcast over rows.
    pub fn add_row_bias(&self, a: Value, bias: Value) -> Result<Value, NumericError> {
        let out = self.with(a, |ta| {
            self.with(bias, |tb| {
                require_matrix(ta, "add_row_bias")?;
                if tb.shape() != [1, ta.cols()] {
                    return Err(NumericError::ShapeMismatch {
                        op: "add_row_bias",
                        left: ta.shape().to_vec(),
                        right: tb.shape().to_vec(),
                    });
                }
                let mut r = ta.clone();
                for i in 0..ta.rows() {
                    for j in 0..ta.cols() {
                        r.set(i, j, ta.at(i, j) + tb.at(0, j));
                    }
                }
                Ok(r)
            })
        })?;
        Ok(self.push(out, Op::AddRowBias(a, bias)))
    }

    pub fn relu(&self, a: Value) -> Value {
        let out = self.with(a, |t| {
            let data = t.data().iter().map(|&x| x.max(0.0)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        });
        self.push(out, Op::Relu(a))
    }

    pub fn transpose(&self, a: Value) -> Result<Value, NumericError> {
        let out = self.with(a, |t| {
            require_matrix(t, "transpose")?;
            Ok(transpose_raw(t))
        })?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// Numerically stable softmax over each row.
    pub fn row_softmax(&self, a: Value) -> Result<Value, NumericError> {
        let out = self.with(a, |t| {
            require_matrix(t, "row_softmax")?;
            Ok(row_softmax_raw(t, None))
        })?;
        Ok(self.push(out, Op::RowSoftmax(a)))
    }

    /// Softmax over each row restricted to the lower triangle (entries
    /// `j ≤ i`); entries above the diagonal are exactly zero. Requires
    /// a square matrix.
    pub fn causal_row_softmax(&self, a: Value) -> Result<Value, NumericError> {
        let out = self.with(a, |t| {
            require_matrix(t, "causal_row_softmax")?;
            if t.rows() != t.cols() {
                return Err(NumericError::InvalidInput {
                    op: "causal_row_softmax",
                    reason: format!("square matrix required, got {:?}", t.shape()),
                });
            }
            Ok(row_softmax_raw(t, Some(())))
        })?;
        Ok(self.push(out, Op::CausalRowSoftmax(a)))
    }

    /// `log ∘ softmax` per row, computed in one stable pass.
    pub fn row_log_softmax(&self, a: Value) -> Result<Value, NumericError> {
        let out = self.with(a, |t| {
            require_matrix(t, "row_log_softmax")?;
            let (m, n) = (t.rows(), t.cols());
            let mut r = t.clone();
            for i in 0..m {
                let row = t.row_slice(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    r.set(i, j, t.at(i, j) - lse);
                }
            }
            Ok(r)
        })?;
        Ok(self.push(out, Op::RowLogSoftmax(a)))
    }

    /// Per-row standardization to mean 0 / variance 1 followed by the
    /// affine transform `x̂ ⊙ gain + bias`. `gain` and `bias` are `1×d`.
    pub fn layer_norm(
        &self,
        x: Value,
        gain: Value,
        bias: Value,
        eps: f64,
    ) -> Result<Value, NumericError> {
        let out = self.with(x, |tx| {
            self.with(gain, |tg| {
                self.with(bias, |tb| {
                    require_matrix(tx, "layer_norm")?;
                    let d = tx.cols();
                    if tg.shape() != [1, d] || tb.shape() != [1, d] {
                        return Err(NumericError::ShapeMismatch {
                            op: "layer_norm",
                            left: tx.shape().to_vec(),
                            right: tg.shape().to_vec(),
                        });
                    }
                    if eps <= 0.0 {
                        return Err(NumericError::InvalidInput {
                            op: "layer_norm",
                            reason: "eps must be positive".into(),
                        });
                    }
                    let mut r = tx.clone();
                    for i in 0..tx.rows() {
                        let row = tx.row_slice(i);
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        for j in 0..d {
                            let xhat = (tx.at(i, j) - mean) * inv;
                            r.set(i, j, xhat * tg.at(0, j) + tb.at(0, j));
                        }
                    }
                    Ok(r)
                })
            })
        })?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Gathers rows of `table` at `ids`: `[V×d], ids[N] → [N×d]`.
    /// The gradient scatter-adds back into the table rows.
    pub fn embedding_lookup(&self, table: Value, ids: &[usize]) -> Result<Value, NumericError> {
        let out = self.with(table, |t| {
            require_matrix(t, "embedding_lookup")?;
            if ids.is_empty() {
                return Err(NumericError::InvalidInput {
                    op: "embedding_lookup",
                    reason: "empty id list".into(),
                });
            }
            if let Some(&bad) = ids.iter().find(|&&id| id >= t.rows()) {
                return Err(NumericError::InvalidInput {
                    op: "embedding_lookup",
                    reason: format!("id {bad} out of range for table with {} rows", t.rows()),
                });
            }
            let d = t.cols();
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                data.extend_from_slice(t.row_slice(id));
            }
            Tensor::new(vec![ids.len(), d], data)
        })?;
        Ok(self.push(
            out,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Value]) -> Result<Value, NumericError> {
        if parts.is_empty() {
            return Err(NumericError::InvalidInput {
                op: "concat_cols",
                reason: "no parts".into(),
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            require_matrix(first, "concat_cols")?;
            let m = first.rows();
            let mut total = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                require_matrix(t, "concat_cols")?;
                if t.rows() != m {
                    return Err(NumericError::ShapeMismatch {
                        op: "concat_cols",
                        left: first.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                total += t.cols();
            }
            let mut data = Vec::with_capacity(m * total);
            for i in 0..m {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row_slice(i));
                }
            }
            Tensor::new(vec![m, total], data)?
        };
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Concatenates matrices with equal column counts along rows.
    pub fn concat_rows(&self, parts: &[Value]) -> Result<Value, NumericError> {
        if parts.is_empty() {
            return Err(NumericError::InvalidInput {
                op: "concat_rows",
                reason: "no parts".into(),
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            require_matrix(first, "concat_rows")?;
            let n = first.cols();
            let mut data = Vec::new();
            let mut m = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                require_matrix(t, "concat_rows")?;
                if t.cols() != n {
                    return Err(NumericError::ShapeMismatch {
                        op: "concat_rows",
                        left: first.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                data.extend_from_slice(t.data());
                m += t.rows();
            }
            Tensor::new(vec![m, n], data)?
        };
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, x: Value, start: usize, end: usize) -> Result<Value, NumericError> {
        let out = self.with(x, |t| {
            require_matrix(t, "slice_rows")?;
            if start >= end || end > t.rows() {
                return Err(NumericError::InvalidInput {
                    op: "slice_rows",
                    reason: format!("range {start}..{end} out of {} rows", t.rows()),
                });
            }
            let n = t.cols();
            Tensor::new(vec![end - start, n], t.data()[start * n..end * n].to_vec())
        })?;
        Ok(self.push(out, Op::SliceRows { x, start, end }))
    }

    /// Picks one entry per `(row, col)` pair, producing a `[k×1]`
    /// column of the selected entries.
    pub fn gather_entries(
        &self,
        x: Value,
        picks: &[(usize, usize)],
    ) -> Result<Value, NumericError> {
        let out = self.with(x, |t| {
            require_matrix(t, "gather_entries")?;
            if picks.is_empty() {
                return Err(NumericError::InvalidInput {
                    op: "gather_entries",
                    reason: "no picks".into(),
                });
            }
            if let Some(&(i, j)) = picks.iter().find(|&&(i, j)| i >= t.rows() || j >= t.cols()) {
                return Err(NumericError::InvalidInput {
                    op: "gather_entries",
                    reason: format!("pick ({i},{j}) out of shape {:?}", t.shape()),
                });
            }
            let data: Vec<f64> = picks.iter().map(|&(i, j)| t.at(i, j)).collect();
            Tensor::new(vec![picks.len(), 1], data)
        })?;
        Ok(self.push(
            out,
            Op::GatherEntries {
                x,
                picks: picks.to_vec(),
            },
        ))
    }

    pub fn sum_all(&self, a: Value) -> Value {
        let out = self.with(a, |t| Tensor::scalar(t.data().iter().sum()));
        self.push(out, Op::SumAll(a))
    }

    pub fn mean_all(&self, a: Value) -> Value {
        let out = self.with(a, |t| {
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        });
        self.push(out, Op::MeanAll(a))
    }

    /// Mean of the rows: `[m×n] → [1×n]`.
    pub fn mean_rows(&self, a: Value) -> Result<Value, NumericError> {
        let out = self.with(a, |t| {
            require_matrix(t, "mean_rows")?;
            let (m, n) = (t.rows(), t.cols());
            let mut acc = vec![0.0; n];
            for i in 0..m {
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += t.at(i, j);
                }
            }
            for a in &mut acc {
                *a /= m as f64;
            }
            Ok(Tensor::row(acc))
        })?;
        Ok(self.push(out, Op::MeanRows(a)))
    }

    /// Scales each row to unit L2 norm. Errors on a zero-norm row.
    pub fn l2_normalize_rows(&self, a: Value) -> Result<Value, NumericError> {
        let out = self.with(a, |t| {
            require_matrix(t, "l2_normalize_rows")?;
            let (m, n) = (t.rows(), t.cols());
            let mut r = t.clone();
            for i in 0..m {
                let norm = t.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(NumericError::InvalidInput {
                        op: "l2_normalize_rows",
                        reason: format!("row {i} has zero norm"),
                    });
                }
                for j in 0..n {
                    r.set(i, j, t.at(i, j) / norm);
                }
            }
            Ok(r)
        })?;
        Ok(self.push(out, Op::L2NormalizeRows(a)))
    }

    /// Mean over annotated rows of `KL(target_row ‖ attn_row)` where
    /// `target` is a constant row-stochastic matrix and `annotated`
    /// lists the rows that carry mass. Rows outside `annotated`
    /// contribute nothing. Convention: `0·log 0 = 0`.
    pub fn kl_from_const_rows(
        &self,
        attn: Value,
        target: &Tensor,
        annotated: &[usize],
    ) -> Result<Value, NumericError> {
        let out = self.with(attn, |a| {
            require_matrix(a, "kl_from_const_rows")?;
            if a.shape() != target.shape() {
                return Err(NumericError::ShapeMismatch {
                    op: "kl_from_const_rows",
                    left: a.shape().to_vec(),
                    right: target.shape().to_vec(),
                });
            }
            if annotated.is_empty() {
                return Ok(Tensor::scalar(0.0));
            }
            let mut total = 0.0;
            for &i in annotated {
                let row_sum: f64 = a.row_slice(i).iter().sum();
                if row_sum <= 0.0 {
                    return Err(NumericError::InvalidInput {
                        op: "kl_from_const_rows",
                        reason: format!("attention row {i} sums to {row_sum}"),
                    });
                }
                for j in 0..a.cols() {
                    let p = target.at(i, j);
                    if p > 0.0 {
                        let q = a.at(i, j);
                        if q <= 0.0 {
                            return Err(NumericError::InvalidInput {
                                op: "kl_from_const_rows",
                                reason: format!(
                                    "attention ({i},{j}) is zero at an annotated cause"
                                ),
                            });
                        }
                        total += p * (p.ln() - q.ln());
                    }
                }
            }
            Ok(Tensor::scalar(total / annotated.len() as f64))
        })?;
        Ok(self.push(
            out,
            Op::KlFromConstRows {
                attn,
                target: target.clone(),
                annotated: annotated.to_vec(),
            },
        ))
    }

    // ----- reverse pass -------------------------------------------------

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// named variable. Variables with no path to the loss get zeros.
    pub fn gradient(&self, loss: Value) -> Result<GradientMap, NumericError> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape();
        if nodes[loss.0].value.len() != 1 {
            return Err(NumericError::NonScalarLoss {
                shape: loss_shape.to_vec(),
            });
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::new(loss_shape.to_vec(), vec![1.0]).expect("scalar"));

        for idx in (0..=loss.0).rev() {
            let Some(go) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(go);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let ta = &nodes[a.0].value;
                    let tb = &nodes[b.0].value;
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    let da = matmul_raw(&go, &transpose_raw(tb));
                    let db = matmul_raw(&transpose_raw(ta), &go);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, go.clone());
                    accumulate(&mut grads, *b, go);
                }
                Op::Sub(a, b) => {
                    let mut neg = go.clone();
                    neg.scale_in_place(-1.0);
                    accumulate(&mut grads, *a, go);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let ta = &nodes[a.0].value;
                    let tb = &nodes[b.0].value;
                    let da = hadamard(&go, tb);
                    let db = hadamard(&go, ta);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    let mut da = go;
                    da.scale_in_place(*c);
                    accumulate(&mut grads, *a, da);
                }
                Op::AddRowBias(a, bias) => {
                    let n = go.cols();
                    let mut col_sums = vec![0.0; n];
                    for i in 0..go.rows() {
                        for (j, s) in col_sums.iter_mut().enumerate() {
                            *s += go.at(i, j);
                        }
                    }
                    accumulate(&mut grads, *bias, Tensor::row(col_sums));
                    accumulate(&mut grads, *a, go);
                }
                Op::Relu(a) => {
                    let ta = &nodes[a.0].value;
                    let data = go
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    let da = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
                    accumulate(&mut grads, *a, da);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, transpose_raw(&go));
                }
                Op::RowSoftmax(a) | Op::CausalRowSoftmax(a) => {
                    // dx_j = y_j (g_j − Σ_k g_k y_k); masked entries have
                    // y_j = 0 and drop out on both sides.
                    let y = &node.value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut da = Tensor::zeros(vec![m, n]);
                    for i in 0..m {
                        let dot: f64 = (0..n).map(|j| go.at(i, j) * y.at(i, j)).sum();
                        for j in 0..n {
                            da.set(i, j, y.at(i, j) * (go.at(i, j) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::RowLogSoftmax(a) => {
                    // dx_j = g_j − softmax_j · Σ_k g_k
                    let y = &node.value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut da = Tensor::zeros(vec![m, n]);
                    for i in 0..m {
                        let gsum: f64 = (0..n).map(|j| go.at(i, j)).sum();
                        for j in 0..n {
                            da.set(i, j, go.at(i, j) - y.at(i, j).exp() * gsum);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let tx = &nodes[x.0].value;
                    let tg = &nodes[gain.0].value;
                    let (m, d) = (tx.rows(), tx.cols());
                    let mut dx = Tensor::zeros(vec![m, d]);
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for i in 0..m {
                        let row = tx.row_slice(i);
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        // gh = dy ⊙ gain; dx = inv·(gh − mean(gh) − x̂·mean(gh⊙x̂))
                        let gh: Vec<f64> = (0..d).map(|j| go.at(i, j) * tg.at(0, j)).collect();
                        let gh_mean = gh.iter().sum::<f64>() / d as f64;
                        let ghx_mean =
                            gh.iter().zip(&xhat).map(|(g, x)| g * x).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx.set(i, j, inv * (gh[j] - gh_mean - xhat[j] * ghx_mean));
                            dgain[j] += go.at(i, j) * xhat[j];
                            dbias[j] += go.at(i, j);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, Tensor::row(dgain));
                    accumulate(&mut grads, *bias, Tensor::row(dbias));
                }
                Op::EmbeddingLookup { table, ids } => {
                    let tt = &nodes[table.0].value;
                    let mut dt = Tensor::zeros(tt.shape().to_vec());
                    let d = tt.cols();
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            let cur = dt.at(id, j);
                            dt.set(id, j, cur + go.at(row, j));
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::ConcatCols(parts) => {
                    let m = go.rows();
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        let mut dp = Tensor::zeros(vec![m, w]);
                        for i in 0..m {
                            for j in 0..w {
                                dp.set(i, j, go.at(i, offset + j));
                            }
                        }
                        accumulate(&mut grads, *p, dp);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let n = go.cols();
                    let mut offset = 0;
                    for p in parts {
                        let h = nodes[p.0].value.rows();
                        let dp = Tensor::new(
                            vec![h, n],
                            go.data()[offset * n..(offset + h) * n].to_vec(),
                        )
                        .expect("slice shape");
                        accumulate(&mut grads, *p, dp);
                        offset += h;
                    }
                }
                Op::SliceRows { x, start, end } => {
                    let tx = &nodes[x.0].value;
                    let mut dx = Tensor::zeros(tx.shape().to_vec());
                    let n = tx.cols();
                    for i in *start..*end {
                        for j in 0..n {
                            dx.set(i, j, go.at(i - start, j));
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GatherEntries { x, picks } => {
                    let tx = &nodes[x.0].value;
                    let mut dx = Tensor::zeros(tx.shape().to_vec());
                    for (k, &(i, j)) in picks.iter().enumerate() {
                        let cur = dx.at(i, j);
                        dx.set(i, j, cur + go.at(k, 0));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SumAll(a) => {
                    let ta = &nodes[a.0].value;
                    let g = go.scalar_value();
                    let da = Tensor::new(ta.shape().to_vec(), vec![g; ta.len()]).expect("shape");
                    accumulate(&mut grads, *a, da);
                }
                Op::MeanAll(a) => {
                    let ta = &nodes[a.0].value;
                    let g = go.scalar_value() / ta.len() as f64;
                    let da = Tensor::new(ta.shape().to_vec(), vec![g; ta.len()]).expect("shape");
                    accumulate(&mut grads, *a, da);
                }
                Op::MeanRows(a) => {
                    let ta = &nodes[a.0].value;
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut da = Tensor::zeros(vec![m, n]);
                    for i in 0..m {
                        for j in 0..n {
                            da.set(i, j, go.at(0, j) / m as f64);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::L2NormalizeRows(a) => {
                    // dx = (g − y·(g·y)) / ‖x‖ per row
                    let ta = &nodes[a.0].value;
                    let y = &node.value;
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut da = Tensor::zeros(vec![m, n]);
                    for i in 0..m {
                        let norm = ta.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = (0..n).map(|j| go.at(i, j) * y.at(i, j)).sum();
                        for j in 0..n {
                            da.set(i, j, (go.at(i, j) - y.at(i, j) * dot) / norm);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::KlFromConstRows {
                    attn,
                    target,
                    annotated,
                } => {
                    let ta = &nodes[attn.0].value;
                    let mut da = Tensor::zeros(ta.shape().to_vec());
                    if !annotated.is_empty() {
                        let w = go.scalar_value() / annotated.len() as f64;
                        for &i in annotated {
                            for j in 0..ta.cols() {
                                let p = target.at(i, j);
                                if p > 0.0 {
                                    da.set(i, j, -w * p / ta.at(i, j));
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *attn, da);
                }
            }
        }

        let mut out = GradientMap::new();
        for (name, v) in self.vars.borrow().iter() {
            let g = match &grads[v.0] {
                Some(t) => t.clone(),
                None => Tensor::zeros(nodes[v.0].value.shape().to_vec()),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Value, delta: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.axpy(1.0, &delta).expect("gradient shapes agree"),
        slot @ None => *slot = Some(delta),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row_slice(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = b.row_slice(p);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

pub(crate) fn transpose_raw(t: &Tensor) -> Tensor {
    let (m, n) = (t.rows(), t.cols());
    let mut out = Tensor::zeros(vec![n, m]);
    for i in 0..m {
        for j in 0..n {
            out.set(j, i, t.at(i, j));
        }
    }
    out
}

/// Max-subtracted softmax per row; with `causal` set, only `j ≤ i`
/// participate and the rest are exactly zero.
fn row_softmax_raw(t: &Tensor, causal: Option<()>) -> Tensor {
    let (m, n) = (t.rows(), t.cols());
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        let limit = if causal.is_some() { i + 1 } else { n };
        let row = &t.row_slice(i)[..limit];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut exps = vec![0.0; limit];
        for (j, &x) in row.iter().enumerate() {
            let e = (x - max).exp();
            exps[j] = e;
            sum += e;
        }
        for (j, e) in exps.into_iter().enumerate() {
            out.set(i, j, e / sum);
        }
    }
    out
}
