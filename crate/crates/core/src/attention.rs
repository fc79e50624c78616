//! Scaled dot-product attention shared by the encoder and decoder.

use crate::graph::{Tape, Value};
use crate::params::{ParamBinding, ParamError};
use crate::tensor::NumericError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    /// Full attention over all key positions.
    None,
    /// Position `i` attends only to positions `j ≤ i` (square inputs).
    Causal,
}

/// Per-head attention output: the row-stochastic attention matrix and
/// the attended values.
pub struct HeadOutput {
    pub attention: Value,
    pub context: Value,
}

/// One attention head: `softmax(Q·Kᵀ/√d_head)·V` with `Q` from
/// `queries` and `K`, `V` from `keys_values`.
pub fn attention_head(
    tape: &Tape,
    queries: Value,
    keys_values: Value,
    wq: Value,
    wk: Value,
    wv: Value,
    mask: AttnMask,
) -> Result<HeadOutput, NumericError> {
    let q = tape.matmul(queries, wq)?;
    let k = tape.matmul(keys_values, wk)?;
    let v = tape.matmul(keys_values, wv)?;
    let d_head = tape.shape_of(q)[1] as f64;
    let scores = tape.matmul(q, tape.transpose(k)?)?;
    let scaled = tape.scale(scores, 1.0 / d_head.sqrt());
    let attention = match mask {
        AttnMask::None => tape.row_softmax(scaled)?,
        AttnMask::Causal => tape.causal_row_softmax(scaled)?,
    };
    let context = tape.matmul(attention, v)?;
    Ok(HeadOutput { attention, context })
}

/// Multi-head attention: per-head projections found under
/// `{prefix}.head{h}.wq|wk|wv`, concatenated contexts projected by
/// `{prefix}.w_out` and shifted by `{prefix}.b_out`.
///
/// Returns the per-head attention matrices alongside the output so the
/// encoder can expose them.
pub fn multi_head_attention(
    tape: &Tape,
    queries: Value,
    keys_values: Value,
    binding: &ParamBinding,
    prefix: &str,
    n_heads: usize,
    mask: AttnMask,
) -> Result<(Vec<Value>, Value), AttentionError> {
    let mut attentions = Vec::with_capacity(n_heads);
    let mut contexts = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let wq = binding.get(&format!("{prefix}.head{h}.wq"))?;
        let wk = binding.get(&format!("{prefix}.head{h}.wk"))?;
        let wv = binding.get(&format!("{prefix}.head{h}.wv"))?;
        let head = attention_head(tape, queries, keys_values, wq, wk, wv, mask)?;
        attentions.push(head.attention);
        contexts.push(head.context);
    }
    let concat = tape.concat_cols(&contexts)?;
    let projected = tape.matmul(concat, binding.get(&format!("{prefix}.w_out"))?)?;
    let out = tape.add_row_bias(projected, binding.get(&format!("{prefix}.b_out"))?)?;
    Ok((attentions, out))
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Param(#[from] ParamError),
}
