//! Causal-Temporal Reasoning Module: the Causal Dynamics Encoder (CDE)
//! and the Temporal Relational Learner (TRL).
//!
//! The CDE runs self-attention over frame features and exposes its
//! attention matrices `A_c` (one per head) together with the causal
//! embeddings `H_c = A_c·V_c`. The TRL adds sinusoidal positional
//! encodings and applies pre-norm transformer encoder blocks, producing
//! the temporal embeddings `H_t` consumed by the caption decoder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{multi_head_attention, AttentionError, AttnMask};
use crate::graph::{Tape, Value};
use crate::params::{ModelParams, ParamBinding, ParamError, ParamSpec};
use crate::tensor::{NumericError, Tensor};

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalMaskMode {
    /// Frame `t` attends only to frames `≤ t`.
    LowerTriangular,
    /// Dense attention over all frames.
    Unmasked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrmConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_trl_layers: usize,
    pub ffn_dim: usize,
    pub causal_mask_mode: CausalMaskMode,
    pub max_frames: usize,
}

impl CtrmConfig {
    pub fn validate(&self) -> Result<(), CtrmError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(CtrmError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_frames == 0 {
            return Err(CtrmError::Config("max_frames must be at least 1".into()));
        }
        if self.ffn_dim == 0 {
            return Err(CtrmError::Config("ffn_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn mask(&self) -> AttnMask {
        match self.causal_mask_mode {
            CausalMaskMode::LowerTriangular => AttnMask::Causal,
            CausalMaskMode::Unmasked => AttnMask::None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CtrmError {
    #[error("invalid CTRM configuration: {0}")]
    Config(String),
    #[error("frame count {got} exceeds max_frames {max}")]
    Capacity { got: usize, max: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

impl From<AttentionError> for CtrmError {
    fn from(e: AttentionError) -> Self {
        match e {
            AttentionError::Numeric(n) => CtrmError::Numeric(n),
            AttentionError::Param(p) => CtrmError::Param(p),
        }
    }
}

/// Fixed sinusoidal positional encodings.
///
/// Row `t`, column `2i` holds `sin(t / 10000^(2i/d))` and column `2i+1`
/// the matching cosine, so every entry lies in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    table: Tensor,
}

impl PositionalEncoding {
    pub fn sinusoidal(max_positions: usize, d_model: usize) -> Self {
        let mut table = Tensor::zeros(vec![max_positions, d_model]);
        for t in 0..max_positions {
            for j in 0..d_model {
                let pair = (j / 2) * 2;
                let freq = 1.0 / 10000f64.powf(pair as f64 / d_model as f64);
                let angle = t as f64 * freq;
                let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                table.set(t, j, v);
            }
        }
        Self { table }
    }

    /// All-zero table, for running the TRL without positional signal.
    pub fn zeros(max_positions: usize, d_model: usize) -> Self {
        Self {
            table: Tensor::zeros(vec![max_positions, d_model]),
        }
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn max_positions(&self) -> usize {
        self.table.rows()
    }

    /// The first `t` rows as a fresh tensor.
    pub fn rows(&self, t: usize) -> Tensor {
        let d = self.table.cols();
        Tensor::new(vec![t, d], self.table.data()[..t * d].to_vec()).expect("prefix shape")
    }
}

/// CDE output: per-head attention `A_c` stacked as `[n_heads×T×T]` and
/// the causal embeddings `H_c` as `[T×d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CdeOutput {
    pub attention: Tensor,
    pub embeddings: Tensor,
}

impl CdeOutput {
    pub fn n_heads(&self) -> usize {
        self.attention.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.attention.shape()[1]
    }

    /// Attention matrix of one head as a `[T×T]` tensor.
    pub fn head_attention(&self, h: usize) -> Tensor {
        let t = self.n_frames();
        let start = h * t * t;
        Tensor::new(
            vec![t, t],
            self.attention.data()[start..start + t * t].to_vec(),
        )
        .expect("head slice")
    }
}

/// Parameter declarations for the CDE and TRL given the input feature
/// width `d_v`.
pub fn ctrm_param_specs(d_v: usize, cfg: &CtrmConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let mut specs = vec![
        ParamSpec::glorot("cde.w_in", d_v, d),
        ParamSpec::zeros("cde.b_in", d),
    ];
    for h in 0..cfg.n_heads {
        specs.push(ParamSpec::glorot(format!("cde.head{h}.wq"), d, dh));
        specs.push(ParamSpec::glorot(format!("cde.head{h}.wk"), d, dh));
        specs.push(ParamSpec::glorot(format!("cde.head{h}.wv"), d, dh));
    }
    specs.push(ParamSpec::glorot("cde.w_out", d, d));
    specs.push(ParamSpec::zeros("cde.b_out", d));
    for l in 0..cfg.n_trl_layers {
        specs.push(ParamSpec::ones(format!("trl.{l}.ln1.gain"), d));
        specs.push(ParamSpec::zeros(format!("trl.{l}.ln1.bias"), d));
        for h in 0..cfg.n_heads {
            specs.push(ParamSpec::glorot(format!("trl.{l}.attn.head{h}.wq"), d, dh));
            specs.push(ParamSpec::glorot(format!("trl.{l}.attn.head{h}.wk"), d, dh));
            specs.push(ParamSpec::glorot(format!("trl.{l}.attn.head{h}.wv"), d, dh));
        }
        specs.push(ParamSpec::glorot(format!("trl.{l}.attn.w_out"), d, d));
        specs.push(ParamSpec::zeros(format!("trl.{l}.attn.b_out"), d));
        specs.push(ParamSpec::ones(format!("trl.{l}.ln2.gain"), d));
        specs.push(ParamSpec::zeros(format!("trl.{l}.ln2.bias"), d));
        specs.push(ParamSpec::glorot(format!("trl.{l}.ffn.w1"), d, cfg.ffn_dim));
        specs.push(ParamSpec::zeros(format!("trl.{l}.ffn.b1"), cfg.ffn_dim));
        specs.push(ParamSpec::glorot(format!("trl.{l}.ffn.w2"), cfg.ffn_dim, d));
        specs.push(ParamSpec::zeros(format!("trl.{l}.ffn.b2"), d));
    }
    specs
}

/// CDE nodes on a live tape: per-head attention values plus `H_c`.
pub struct CdeNodes {
    pub attention: Vec<Value>,
    pub embeddings: Value,
}

/// Affine input projection of raw frame features into model width.
pub fn build_input_projection(
    tape: &Tape,
    frames: Value,
    binding: &ParamBinding,
) -> Result<Value, CtrmError> {
    let projected = tape.matmul(frames, binding.get("cde.w_in")?)?;
    Ok(tape.add_row_bias(projected, binding.get("cde.b_in")?)?)
}

/// Causal Dynamics Encoder on a live tape.
///
/// `frames` is a `[T×d_v]` value; the result carries the per-head
/// attention matrices and `H_c` after the output projection.
pub fn build_cde(
    tape: &Tape,
    frames: Value,
    binding: &ParamBinding,
    cfg: &CtrmConfig,
) -> Result<CdeNodes, CtrmError> {
    cfg.validate()?;
    let t_frames = tape.shape_of(frames)[0];
    if t_frames > cfg.max_frames {
        return Err(CtrmError::Capacity {
            got: t_frames,
            max: cfg.max_frames,
        });
    }
    let x = build_input_projection(tape, frames, binding)?;
    let (attention, embeddings) =
        multi_head_attention(tape, x, x, binding, "cde", cfg.n_heads, cfg.mask())?;
    Ok(CdeNodes {
        attention,
        embeddings,
    })
}

/// Temporal Relational Learner on a live tape: `H_c + P` followed by
/// `n_trl_layers` pre-norm encoder blocks (unmasked attention, relu
/// feed-forward, residual connections). With zero layers the output is
/// exactly `H_c + P`.
pub fn build_trl(
    tape: &Tape,
    h_c: Value,
    binding: &ParamBinding,
    cfg: &CtrmConfig,
    pe: &PositionalEncoding,
) -> Result<Value, CtrmError> {
    let t_frames = tape.shape_of(h_c)[0];
    if t_frames > cfg.max_frames {
        return Err(CtrmError::Capacity {
            got: t_frames,
            max: cfg.max_frames,
        });
    }
    let p = tape.constant(pe.rows(t_frames));
    let mut x = tape.add(h_c, p)?;
    for l in 0..cfg.n_trl_layers {
        let ln1 = tape.layer_norm(
            x,
            binding.get(&format!("trl.{l}.ln1.gain"))?,
            binding.get(&format!("trl.{l}.ln1.bias"))?,
            LAYER_NORM_EPS,
        )?;
        let (_, attn_out) = multi_head_attention(
            tape,
            ln1,
            ln1,
            binding,
            &format!("trl.{l}.attn"),
            cfg.n_heads,
            AttnMask::None,
        )?;
        x = tape.add(x, attn_out)?;
        let ln2 = tape.layer_norm(
            x,
            binding.get(&format!("trl.{l}.ln2.gain"))?,
            binding.get(&format!("trl.{l}.ln2.bias"))?,
            LAYER_NORM_EPS,
        )?;
        let h1 = tape.matmul(ln2, binding.get(&format!("trl.{l}.ffn.w1"))?)?;
        let h1 = tape.add_row_bias(h1, binding.get(&format!("trl.{l}.ffn.b1"))?)?;
        let h1 = tape.relu(h1);
        let h2 = tape.matmul(h1, binding.get(&format!("trl.{l}.ffn.w2"))?)?;
        let h2 = tape.add_row_bias(h2, binding.get(&format!("trl.{l}.ffn.b2"))?)?;
        x = tape.add(x, h2)?;
    }
    Ok(x)
}

fn stack_heads(tape: &Tape, heads: &[Value]) -> Tensor {
    let t = tape.shape_of(heads[0])[0];
    let mut data = Vec::with_capacity(heads.len() * t * t);
    for &h in heads {
        data.extend_from_slice(tape.value(h).data());
    }
    Tensor::new(vec![heads.len(), t, t], data).expect("stacked attention")
}

/// Runs the CDE over plain tensors: projects `frames` to model width,
/// applies per-head causal self-attention, and returns `A_c` and `H_c`.
pub fn cde_forward(
    frames: &Tensor,
    params: &ModelParams,
    cfg: &CtrmConfig,
) -> Result<CdeOutput, CtrmError> {
    let tape = Tape::new();
    let binding = ParamBinding::bind(&tape, params);
    let f = tape.constant(frames.clone());
    let nodes = build_cde(&tape, f, &binding, cfg)?;
    Ok(CdeOutput {
        attention: stack_heads(&tape, &nodes.attention),
        embeddings: tape.value(nodes.embeddings),
    })
}

/// Runs the TRL over a plain `CdeOutput`, returning `H_t`.
pub fn trl_forward(
    cde_out: &CdeOutput,
    params: &ModelParams,
    cfg: &CtrmConfig,
) -> Result<Tensor, CtrmError> {
    cfg.validate()?;
    let pe = PositionalEncoding::sinusoidal(cfg.max_frames, cfg.d_model);
    let tape = Tape::new();
    let binding = ParamBinding::bind(&tape, params);
    let h_c = tape.constant(cde_out.embeddings.clone());
    let h_t = build_trl(&tape, h_c, &binding, cfg, &pe)?;
    Ok(tape.value(h_t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_config(mask: CausalMaskMode) -> CtrmConfig {
        CtrmConfig {
            d_model: 8,
            n_heads: 2,
            n_trl_layers: 1,
            ffn_dim: 16,
            causal_mask_mode: mask,
            max_frames: 6,
        }
    }

    fn seeded_params(d_v: usize, cfg: &CtrmConfig) -> ModelParams {
        ModelParams::init(&ctrm_param_specs(d_v, cfg), 0)
    }

    fn random_frames(t: usize, d_v: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::Rng::seeded(seed);
        Tensor::new(vec![t, d_v], (0..t * d_v).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn single_frame_attention_is_one_for_every_head() {
        for mask in [CausalMaskMode::LowerTriangular, CausalMaskMode::Unmasked] {
            let cfg = test_config(mask);
            let params = seeded_params(3, &cfg);
            let out = cde_forward(&random_frames(1, 3, 5), &params, &cfg).unwrap();
            assert_eq!(out.attention.shape(), &[2, 1, 1]);
            for &a in out.attention.data() {
                assert_eq!(a, 1.0);
            }
        }
    }

    #[test]
    fn identical_frames_unmasked_attend_half_half() {
        let cfg = test_config(CausalMaskMode::Unmasked);
        let params = seeded_params(3, &cfg);
        let row = vec![0.4, -1.2, 0.7];
        let frames = Tensor::from_rows(&[row.clone(), row]).unwrap();
        let out = cde_forward(&frames, &params, &cfg).unwrap();
        for h in 0..2 {
            let a = out.head_attention(h);
            for i in 0..2 {
                for j in 0..2 {
                    assert!((a.at(i, j) - 0.5).abs() < 1e-12, "head {h} at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic_and_masked_above_diagonal() {
        let cfg = test_config(CausalMaskMode::LowerTriangular);
        let params = seeded_params(4, &cfg);
        for seed in 0..20 {
            let t = 1 + (seed as usize % 5);
            let out = cde_forward(&random_frames(t, 4, seed), &params, &cfg).unwrap();
            for h in 0..cfg.n_heads {
                let a = out.head_attention(h);
                for i in 0..t {
                    let sum: f64 = a.row_slice(i).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                    for j in 0..t {
                        assert!(a.at(i, j) >= 0.0);
                        if j > i {
                            assert_eq!(a.at(i, j), 0.0);
                        }
                    }
                }
            }
        }
    }

    /// Straight-line re-computation of the CDE with explicit loops,
    /// independent of the graph machinery.
    fn cde_loop_oracle(frames: &Tensor, params: &ModelParams, cfg: &CtrmConfig) -> Tensor {
        let t = frames.rows();
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let w_in = params.get("cde.w_in").unwrap();
        let b_in = params.get("cde.b_in").unwrap();
        // x = frames·w_in + b_in
        let mut x = vec![vec![0.0; d]; t];
        for i in 0..t {
            for j in 0..d {
                let mut acc = b_in.at(0, j);
                for p in 0..frames.cols() {
                    acc += frames.at(i, p) * w_in.at(p, j);
                }
                x[i][j] = acc;
            }
        }
        let mut concat = vec![vec![0.0; d]; t];
        for h in 0..cfg.n_heads {
            let wq = params.get(&format!("cde.head{h}.wq")).unwrap();
            let wk = params.get(&format!("cde.head{h}.wk")).unwrap();
            let wv = params.get(&format!("cde.head{h}.wv")).unwrap();
            let proj = |w: &Tensor| -> Vec<Vec<f64>> {
                let mut out = vec![vec![0.0; dh]; t];
                for i in 0..t {
                    for j in 0..dh {
                        let mut acc = 0.0;
                        for p in 0..d {
                            acc += x[i][p] * w.at(p, j);
                        }
                        out[i][j] = acc;
                    }
                }
                out
            };
            let (q, k, v) = (proj(wq), proj(wk), proj(wv));
            for i in 0..t {
                let limit = match cfg.causal_mask_mode {
                    CausalMaskMode::LowerTriangular => i + 1,
                    CausalMaskMode::Unmasked => t,
                };
                let mut scores = vec![0.0; limit];
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for p in 0..dh {
                        acc += q[i][p] * k[j][p];
                    }
                    *s = acc / (dh as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for p in 0..dh {
                    let mut acc = 0.0;
                    for (j, e) in exps.iter().enumerate() {
                        acc += e / z * v[j][p];
                    }
                    concat[i][h * dh + p] = acc;
                }
            }
        }
        let w_out = params.get("cde.w_out").unwrap();
        let b_out = params.get("cde.b_out").unwrap();
        let mut h_c = Tensor::zeros(vec![t, d]);
        for i in 0..t {
            for j in 0..d {
                let mut acc = b_out.at(0, j);
                for p in 0..d {
                    acc += concat[i][p] * w_out.at(p, j);
                }
                h_c.set(i, j, acc);
            }
        }
        h_c
    }

    #[test]
    fn cde_matches_loop_oracle_at_seed_zero() {
        for mask in [CausalMaskMode::LowerTriangular, CausalMaskMode::Unmasked] {
            let cfg = test_config(mask);
            let params = seeded_params(5, &cfg);
            let frames = random_frames(3, 5, 0);
            let got = cde_forward(&frames, &params, &cfg).unwrap();
            let expect = cde_loop_oracle(&frames, &params, &cfg);
            assert!(got.embeddings.max_abs_diff(&expect) < 1e-10);
        }
    }

    #[test]
    fn masked_row_independent_of_later_frames() {
        let cfg = test_config(CausalMaskMode::LowerTriangular);
        let params = seeded_params(4, &cfg);
        let frames = random_frames(4, 4, 3);
        let base = cde_forward(&frames, &params, &cfg).unwrap();
        // perturb frame 3; rows 0..3 of attention and H_c must not move
        let mut bumped = frames.clone();
        bumped.set(3, 1, bumped.at(3, 1) + 10.0);
        let out = cde_forward(&bumped, &params, &cfg).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(base.embeddings.at(i, j), out.embeddings.at(i, j));
            }
            for h in 0..cfg.n_heads {
                let a0 = base.head_attention(h);
                let a1 = out.head_attention(h);
                assert_eq!(a0.row_slice(i), a1.row_slice(i));
            }
        }
    }

    #[test]
    fn zero_layer_trl_is_identity_plus_positions() {
        let mut cfg = test_config(CausalMaskMode::LowerTriangular);
        cfg.n_trl_layers = 0;
        let params = seeded_params(4, &cfg);
        let frames = random_frames(3, 4, 1);
        let cde_out = cde_forward(&frames, &params, &cfg).unwrap();
        let h_t = trl_forward(&cde_out, &params, &cfg).unwrap();
        let pe = PositionalEncoding::sinusoidal(cfg.max_frames, cfg.d_model).rows(3);
        for i in 0..3 {
            for j in 0..cfg.d_model {
                assert_eq!(h_t.at(i, j), cde_out.embeddings.at(i, j) + pe.at(i, j));
            }
        }
    }

    #[test]
    fn zero_positions_and_zero_layers_make_trl_the_identity() {
        let mut cfg = test_config(CausalMaskMode::LowerTriangular);
        cfg.n_trl_layers = 0;
        let params = seeded_params(4, &cfg);
        let frames = random_frames(3, 4, 2);
        let cde_out = cde_forward(&frames, &params, &cfg).unwrap();
        // force P to zero by building against a zeroed table
        let zero_pe = PositionalEncoding::zeros(cfg.max_frames, cfg.d_model);
        let tape = Tape::new();
        let binding = ParamBinding::bind(&tape, &params);
        let h_c = tape.constant(cde_out.embeddings.clone());
        let h_t = build_trl(&tape, h_c, &binding, &cfg, &zero_pe).unwrap();
        assert_eq!(tape.value(h_t), cde_out.embeddings);
    }

    #[test]
    fn positional_encoding_matches_formula_and_bounds() {
        let pe = PositionalEncoding::sinusoidal(10, 6);
        for t in 0..10 {
            for i in 0..3 {
                let freq = 1.0 / 10000f64.powf((2 * i) as f64 / 6.0);
                let angle = t as f64 * freq;
                assert!((pe.table().at(t, 2 * i) - angle.sin()).abs() < 1e-15);
                assert!((pe.table().at(t, 2 * i + 1) - angle.cos()).abs() < 1e-15);
            }
        }
        assert!(pe.table().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn trl_is_position_sensitive() {
        let cfg = test_config(CausalMaskMode::Unmasked);
        let params = seeded_params(4, &cfg);
        let frames = random_frames(3, 4, 7);
        // swap frames 0 and 2, encode, swap the output rows back; a
        // position-sensitive encoder must not reproduce the original
        let mut swapped = frames.clone();
        for j in 0..4 {
            let a = swapped.at(0, j);
            swapped.set(0, j, swapped.at(2, j));
            swapped.set(2, j, a);
        }
        let ht_base =
            trl_forward(&cde_forward(&frames, &params, &cfg).unwrap(), &params, &cfg).unwrap();
        let ht_swap = trl_forward(
            &cde_forward(&swapped, &params, &cfg).unwrap(),
            &params,
            &cfg,
        )
        .unwrap();
        let mut unswapped = ht_swap.clone();
        for j in 0..cfg.d_model {
            let a = unswapped.at(0, j);
            unswapped.set(0, j, unswapped.at(2, j));
            unswapped.set(2, j, a);
        }
        assert!(ht_base.max_abs_diff(&unswapped) > 1e-6);
    }

    #[test]
    fn trl_single_layer_matches_loop_oracle() {
        // Loop-level re-computation of one pre-norm block over H_c + P.
        let cfg = test_config(CausalMaskMode::LowerTriangular);
        let params = seeded_params(4, &cfg);
        let frames = random_frames(2, 4, 0);
        let cde_out = cde_forward(&frames, &params, &cfg).unwrap();
        let got = trl_forward(&cde_out, &params, &cfg).unwrap();

        let d = cfg.d_model;
        let t = 2;
        let pe = PositionalEncoding::sinusoidal(cfg.max_frames, d).rows(t);
        let mut x = vec![vec![0.0; d]; t];
        for i in 0..t {
            for j in 0..d {
                x[i][j] = cde_out.embeddings.at(i, j) + pe.at(i, j);
            }
        }
        let layer_norm = |rows: &[Vec<f64>], gain: &Tensor, bias: &Tensor| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    let mean = r.iter().sum::<f64>() / d as f64;
                    let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    (0..d)
                        .map(|j| (r[j] - mean) * inv * gain.at(0, j) + bias.at(0, j))
                        .collect()
                })
                .collect()
        };
        let ln1 = layer_norm(
            &x,
            params.get("trl.0.ln1.gain").unwrap(),
            params.get("trl.0.ln1.bias").unwrap(),
        );
        let dh = cfg.head_dim();
        let mut attn_concat = vec![vec![0.0; d]; t];
        for h in 0..cfg.n_heads {
            let wq = params.get(&format!("trl.0.attn.head{h}.wq")).unwrap();
            let wk = params.get(&format!("trl.0.attn.head{h}.wk")).unwrap();
            let wv = params.get(&format!("trl.0.attn.head{h}.wv")).unwrap();
            let proj = |w: &Tensor| -> Vec<Vec<f64>> {
                ln1.iter()
                    .map(|r| {
                        (0..dh)
                            .map(|j| (0..d).map(|p| r[p] * w.at(p, j)).sum())
                            .collect()
                    })
                    .collect()
            };
            let (q, k, v) = (proj(wq), proj(wk), proj(wv));
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| (0..dh).map(|p| q[i][p] * k[j][p]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for p in 0..dh {
                    attn_concat[i][h * dh + p] = (0..t).map(|j| exps[j] / z * v[j][p]).sum::<f64>();
                }
            }
        }
        let w_out = params.get("trl.0.attn.w_out").unwrap();
        let b_out = params.get("trl.0.attn.b_out").unwrap();
        for i in 0..t {
            let row: Vec<f64> = (0..d)
                .map(|j| {
                    b_out.at(0, j)
                        + (0..d)
                            .map(|p| attn_concat[i][p] * w_out.at(p, j))
                            .sum::<f64>()
                })
                .collect();
            for j in 0..d {
                x[i][j] += row[j];
            }
        }
        let ln2 = layer_norm(
            &x,
            params.get("trl.0.ln2.gain").unwrap(),
            params.get("trl.0.ln2.bias").unwrap(),
        );
        let w1 = params.get("trl.0.ffn.w1").unwrap();
        let b1 = params.get("trl.0.ffn.b1").unwrap();
        let w2 = params.get("trl.0.ffn.w2").unwrap();
        let b2 = params.get("trl.0.ffn.b2").unwrap();
        for i in 0..t {
            let hidden: Vec<f64> = (0..cfg.ffn_dim)
                .map(|j| {
                    (b1.at(0, j) + (0..d).map(|p| ln2[i][p] * w1.at(p, j)).sum::<f64>()).max(0.0)
                })
                .collect();
            for j in 0..d {
                x[i][j] += b2.at(0, j)
                    + (0..cfg.ffn_dim)
                        .map(|p| hidden[p] * w2.at(p, j))
                        .sum::<f64>();
            }
        }
        for i in 0..t {
            for j in 0..d {
                assert!(
                    (got.at(i, j) - x[i][j]).abs() < 1e-10,
                    "mismatch at ({i},{j}): {} vs {}",
                    got.at(i, j),
                    x[i][j]
                );
            }
        }
    }

    #[test]
    fn too_many_frames_is_a_capacity_error() {
        let cfg = test_config(CausalMaskMode::LowerTriangular);
        let params = seeded_params(3, &cfg);
        let err = cde_forward(&random_frames(7, 3, 0), &params, &cfg).unwrap_err();
        assert!(matches!(err, CtrmError::Capacity { got: 7, max: 6 }));
    }

    #[test]
    fn wrong_feature_width_is_a_shape_error() {
        let cfg = test_config(CausalMaskMode::LowerTriangular);
        let params = seeded_params(3, &cfg);
        let err = cde_forward(&random_frames(2, 4, 0), &params, &cfg).unwrap_err();
        assert!(matches!(err, CtrmError::Numeric(_)));
    }

    #[test]
    fn frame_gradient_matches_finite_differences() {
        use crate::gradcheck::check_gradients;
        let cfg = test_config(CausalMaskMode::LowerTriangular);
        let d_v = 3;
        let params = seeded_params(d_v, &cfg);
        let pe = PositionalEncoding::sinusoidal(cfg.max_frames, cfg.d_model);

        let mut inputs = crate::gradcheck::Inputs::new();
        inputs.insert("frames".into(), random_frames(3, d_v, 11));
        for (name, t) in params.iter() {
            inputs.insert(name.clone(), t.clone());
        }
        let cfg2 = cfg.clone();
        let outcome = check_gradients(
            "ctrm_end_to_end",
            &inputs,
            &move |tape, vars| {
                let binding = rebind(vars);
                let nodes =
                    build_cde(tape, vars["frames"], &binding, &cfg2).map_err(|e| numeric(e))?;
                let h_t = build_trl(tape, nodes.embeddings, &binding, &cfg2, &pe)
                    .map_err(|e| numeric(e))?;
                let sq = tape.mul(h_t, h_t)?;
                Ok(tape.mean_all(sq))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(outcome.passed, "max rel err {}", outcome.max_rel_err);
    }

    fn numeric(e: CtrmError) -> NumericError {
        match e {
            CtrmError::Numeric(n) => n,
            other => NumericError::InvalidInput {
                op: "ctrm",
                reason: other.to_string(),
            },
        }
    }

    /// Rebuilds a `ParamBinding` view over gradcheck-bound variables.
    fn rebind(vars: &std::collections::BTreeMap<String, Value>) -> ParamBinding {
        ParamBinding::from_values(
            vars.iter()
                .filter(|(k, _)| k.as_str() != "frames")
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        )
    }
}
