//! Training objectives: caption cross-entropy, causal attention
//! alignment, temporal consistency, the fine-tuning composite, and the
//! contrastive alignment loss.
//!
//! Each loss has a graph builder (`*_node`) used during training and a
//! plain-tensor wrapper that evaluates the same graph on a throwaway
//! tape, so tests and training always share one formula.
//!
//! Conventions: mean (not sum) reduction everywhere; the causal loss is
//! `KL(row-normalized annotation ‖ attention row)` with `0·log 0 = 0`,
//! averaged over heads and annotated rows; the temporal loss is the
//! mean squared difference of consecutive rows scaled by `1/d`; the
//! contrastive loss is one-directional (video → text) InfoNCE over
//! cosine similarities with in-batch negatives.

use serde::{Deserialize, Serialize};

use crate::decoder::{TokenId, PAD};
use crate::graph::{Tape, Value};
use crate::tensor::{NumericError, Tensor};

/// Scalar weights of the composite objectives: λ₁ (causal), λ₂
/// (temporal), the contrastive temperature τ, and the configured
/// contrastive batch size B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub batch_size: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            tau: 0.07,
            batch_size: 8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), NumericError> {
        if !(self.tau > 0.0) {
            return Err(NumericError::InvalidInput {
                op: "loss_weights",
                reason: format!("tau must be positive, got {}", self.tau),
            });
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(NumericError::InvalidInput {
                op: "loss_weights",
                reason: "lambda weights must be non-negative".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(NumericError::InvalidInput {
                op: "loss_weights",
                reason: "batch_size must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Ground-truth causal structure over `T` frames.
///
/// `adjacency[i][j] == 1` marks frame `j` as an annotated cause of
/// frame `i` (row = effect, column = cause). The diagonal is zero and
/// all entries are 0/1.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalAnnotation {
    adjacency: Tensor,
}

impl CausalAnnotation {
    pub fn new(adjacency: Tensor) -> Result<Self, NumericError> {
        if !adjacency.is_matrix() || adjacency.rows() != adjacency.cols() {
            return Err(NumericError::InvalidInput {
                op: "causal_annotation",
                reason: format!("square matrix required, got {:?}", adjacency.shape()),
            });
        }
        for i in 0..adjacency.rows() {
            for j in 0..adjacency.cols() {
                let v = adjacency.at(i, j);
                if v != 0.0 && v != 1.0 {
                    return Err(NumericError::InvalidInput {
                        op: "causal_annotation",
                        reason: format!("entry ({i},{j}) is {v}, expected 0 or 1"),
                    });
                }
                if i == j && v != 0.0 {
                    return Err(NumericError::InvalidInput {
                        op: "causal_annotation",
                        reason: format!("diagonal entry ({i},{i}) must be zero"),
                    });
                }
            }
        }
        Ok(Self { adjacency })
    }

    /// All-zero annotation over `t` frames.
    pub fn empty(t: usize) -> Self {
        Self {
            adjacency: Tensor::zeros(vec![t, t]),
        }
    }

    /// Marks `cause → effect`.
    pub fn add_edge(&mut self, cause: usize, effect: usize) {
        self.adjacency.set(effect, cause, 1.0);
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn n_frames(&self) -> usize {
        self.adjacency.rows()
    }

    /// `(cause, effect)` pairs in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for effect in 0..self.adjacency.rows() {
            for cause in 0..self.adjacency.cols() {
                if self.adjacency.at(effect, cause) != 0.0 {
                    edges.push((cause, effect));
                }
            }
        }
        edges
    }

    /// Rows with at least one annotated cause.
    pub fn annotated_rows(&self) -> Vec<usize> {
        (0..self.adjacency.rows())
            .filter(|&i| self.adjacency.row_slice(i).iter().any(|&v| v != 0.0))
            .collect()
    }

    /// Row-normalized annotation: each annotated row sums to one,
    /// un-annotated rows stay zero.
    pub fn normalized(&self) -> Tensor {
        let t = self.n_frames();
        let mut out = Tensor::zeros(vec![t, t]);
        for i in 0..t {
            let sum: f64 = self.adjacency.row_slice(i).iter().sum();
            if sum > 0.0 {
                for j in 0..t {
                    out.set(i, j, self.adjacency.at(i, j) / sum);
                }
            }
        }
        out
    }
}

// ----- caption cross-entropy (pre-training objective) -------------------

/// Mean `−log softmax(logits)[i][targets[i]]` over non-PAD positions.
///
/// PAD is allowed only as trailing padding; scoring spans must not
/// contain it.
pub fn caption_cross_entropy_node(
    tape: &Tape,
    logits: Value,
    targets: &[TokenId],
) -> Result<Value, NumericError> {
    let shape = tape.shape_of(logits);
    if targets.is_empty() {
        return Err(NumericError::InvalidInput {
            op: "caption_cross_entropy",
            reason: "empty targets".into(),
        });
    }
    if shape[0] != targets.len() {
        return Err(NumericError::ShapeMismatch {
            op: "caption_cross_entropy",
            left: shape,
            right: vec![targets.len()],
        });
    }
    let scored: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(i, &t)| (i, t))
        .collect();
    if scored.is_empty() {
        return Err(NumericError::InvalidInput {
            op: "caption_cross_entropy",
            reason: "all targets are padding".into(),
        });
    }
    // PAD must not interrupt the scored span
    let last_scored = scored.last().unwrap().0;
    if targets[..=last_scored].iter().any(|&t| t == PAD) {
        return Err(NumericError::InvalidInput {
            op: "caption_cross_entropy",
            reason: "PAD inside the scored span".into(),
        });
    }
    let log_probs = tape.row_log_softmax(logits)?;
    let picked = tape.gather_entries(log_probs, &scored)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / scored.len() as f64))
}

/// Plain-tensor caption cross-entropy.
pub fn caption_cross_entropy(logits: &Tensor, targets: &[TokenId]) -> Result<f64, NumericError> {
    let tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = caption_cross_entropy_node(&tape, l, targets)?;
    Ok(tape.scalar_of(loss))
}

// ----- causal alignment (fine-tuning auxiliary) --------------------------

/// Causal alignment over live per-head attention values: the mean over
/// heads of the per-head KL between the normalized annotation and the
/// attention rows. Returns a zero constant when nothing is annotated or
/// no attention is available (CDE ablated).
pub fn causal_alignment_node(
    tape: &Tape,
    attention_heads: &[Value],
    annot: &CausalAnnotation,
) -> Result<Value, NumericError> {
    let annotated = annot.annotated_rows();
    if attention_heads.is_empty() || annotated.is_empty() {
        return Ok(tape.scalar_constant(0.0));
    }
    let target = annot.normalized();
    let mut acc: Option<Value> = None;
    for &head in attention_heads {
        let kl = tape.kl_from_const_rows(head, &target, &annotated)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, kl)?,
            None => kl,
        });
    }
    Ok(tape.scale(
        acc.expect("at least one head"),
        1.0 / attention_heads.len() as f64,
    ))
}

/// Plain-tensor causal alignment loss over stacked `[n_heads×T×T]`
/// attention.
pub fn causal_alignment_loss(
    attention: &Tensor,
    annot: &CausalAnnotation,
) -> Result<f64, NumericError> {
    if attention.shape().len() != 3 {
        return Err(NumericError::InvalidInput {
            op: "causal_alignment_loss",
            reason: format!(
                "expected [heads×T×T] attention, got {:?}",
                attention.shape()
            ),
        });
    }
    let (heads, t) = (attention.shape()[0], attention.shape()[1]);
    if attention.shape()[2] != t || t != annot.n_frames() {
        return Err(NumericError::ShapeMismatch {
            op: "causal_alignment_loss",
            left: attention.shape().to_vec(),
            right: annot.adjacency().shape().to_vec(),
        });
    }
    let tape = Tape::new();
    let mut head_values = Vec::with_capacity(heads);
    for h in 0..heads {
        let start = h * t * t;
        let slice = Tensor::new(vec![t, t], attention.data()[start..start + t * t].to_vec())?;
        head_values.push(tape.constant(slice));
    }
    let loss = causal_alignment_node(&tape, &head_values, annot)?;
    Ok(tape.scalar_of(loss))
}

// ----- temporal consistency (fine-tuning auxiliary) ----------------------

/// `(1/(T−1)) Σ_t ‖h_{t+1} − h_t‖² / d`; zero when `T == 1`.
pub fn temporal_consistency_node(tape: &Tape, h_t: Value) -> Result<Value, NumericError> {
    let shape = tape.shape_of(h_t);
    let (t, d) = (shape[0], shape[1]);
    if t == 1 {
        return Ok(tape.scalar_constant(0.0));
    }
    let next = tape.slice_rows(h_t, 1, t)?;
    let prev = tape.slice_rows(h_t, 0, t - 1)?;
    let diff = tape.sub(next, prev)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / ((t - 1) as f64 * d as f64)))
}

/// Plain-tensor temporal consistency loss.
pub fn temporal_consistency_loss(h_t: &Tensor) -> Result<f64, NumericError> {
    let tape = Tape::new();
    let h = tape.constant(h_t.clone());
    let loss = temporal_consistency_node(&tape, h)?;
    Ok(tape.scalar_of(loss))
}

// ----- contrastive alignment ---------------------------------------------

/// One-directional InfoNCE over cosine similarities: mean over batch
/// rows `i` of `−log softmax(cos(vᵢ, t·)/τ)[i]`.
pub fn contrastive_node(
    tape: &Tape,
    video_emb: Value,
    text_emb: Value,
    tau: f64,
) -> Result<Value, NumericError> {
    if !(tau > 0.0) {
        return Err(NumericError::InvalidInput {
            op: "contrastive_loss",
            reason: format!("tau must be positive, got {tau}"),
        });
    }
    let vshape = tape.shape_of(video_emb);
    let tshape = tape.shape_of(text_emb);
    if vshape != tshape {
        return Err(NumericError::ShapeMismatch {
            op: "contrastive_loss",
            left: vshape,
            right: tshape,
        });
    }
    let b = vshape[0];
    let vn = tape.l2_normalize_rows(video_emb)?;
    let tn = tape.l2_normalize_rows(text_emb)?;
    let cos = tape.matmul(vn, tape.transpose(tn)?)?;
    let scaled = tape.scale(cos, 1.0 / tau);
    let log_probs = tape.row_log_softmax(scaled)?;
    let diagonal: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let picked = tape.gather_entries(log_probs, &diagonal)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// Plain-tensor contrastive loss. Row counts are the effective batch;
/// `weights.batch_size` is validated but the mean runs over the actual
/// rows.
pub fn contrastive_loss(
    video_emb: &Tensor,
    text_emb: &Tensor,
    weights: &LossWeights,
) -> Result<f64, NumericError> {
    weights.validate()?;
    let tape = Tape::new();
    let v = tape.constant(video_emb.clone());
    let t = tape.constant(text_emb.clone());
    let loss = contrastive_node(&tape, v, t, weights.tau)?;
    Ok(tape.scalar_of(loss))
}

// ----- fine-tuning composite ----------------------------------------------

/// `caption + λ₁·causal + λ₂·temporal` on live values.
pub fn finetune_node(
    tape: &Tape,
    caption: Value,
    causal: Value,
    temporal: Value,
    weights: &LossWeights,
) -> Result<Value, NumericError> {
    let weighted_causal = tape.scale(causal, weights.lambda1);
    let weighted_temporal = tape.scale(temporal, weights.lambda2);
    let partial = tape.add(caption, weighted_causal)?;
    tape.add(partial, weighted_temporal)
}

/// Exact weighted sum of already-computed scalar components.
pub fn finetune_loss(
    caption_loss: f64,
    causal_loss: f64,
    temporal_loss: f64,
    weights: &LossWeights,
) -> Result<f64, NumericError> {
    for (name, v) in [
        ("caption", caption_loss),
        ("causal", causal_loss),
        ("temporal", temporal_loss),
    ] {
        if !v.is_finite() {
            return Err(NumericError::InvalidInput {
                op: "finetune_loss",
                reason: format!("{name} loss is not finite: {v}"),
            });
        }
    }
    Ok(caption_loss + weights.lambda1 * causal_loss + weights.lambda2 * temporal_loss)
}
