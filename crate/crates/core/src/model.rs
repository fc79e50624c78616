//! Full captioning model: frame encoder (CDE + TRL), caption decoder,
//! and the alignment projections, assembled on a tape per sample.
//!
//! Ablation switches mirror the encoder variants compared in
//! evaluation: without the CDE the projected frames feed the TRL
//! directly; without the TRL the output is `H_c + P`; without the whole
//! CTRM the decoder sees `projected frames + P`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctrm::{
    build_cde, build_input_projection, build_trl, ctrm_param_specs, CtrmConfig, CtrmError,
    PositionalEncoding,
};
use crate::decoder::{
    build_decoder_logits, decoder_param_specs, DecoderConfig, DecoderError, TokenId, BOS, EOS,
};
use crate::graph::{Tape, Value};
use crate::losses::{
    caption_cross_entropy_node, causal_alignment_node, contrastive_node, temporal_consistency_node,
    CausalAnnotation,
};
use crate::params::{ModelParams, ParamBinding, ParamError, ParamSpec};
use crate::tensor::{NumericError, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ctrm(#[from] CtrmError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Which encoder stages are switched off for an ablation run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationSet {
    pub disable_cde: bool,
    pub disable_trl: bool,
    pub disable_ctrm: bool,
}

impl AblationSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn without_cde() -> Self {
        Self {
            disable_cde: true,
            ..Self::default()
        }
    }

    pub fn without_trl() -> Self {
        Self {
            disable_trl: true,
            ..Self::default()
        }
    }

    pub fn without_ctrm() -> Self {
        Self {
            disable_cde: true,
            disable_trl: true,
            disable_ctrm: true,
        }
    }

    /// `disable_ctrm` must imply both submodule switches.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.disable_ctrm && !(self.disable_cde && self.disable_trl) {
            return Err(ModelError::Config(
                "disable_ctrm implies disable_cde and disable_trl".into(),
            ));
        }
        Ok(())
    }

    pub fn cde_disabled(&self) -> bool {
        self.disable_cde || self.disable_ctrm
    }

    pub fn trl_disabled(&self) -> bool {
        self.disable_trl || self.disable_ctrm
    }

    pub fn flags(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.disable_cde {
            out.push("disable_cde");
        }
        if self.disable_trl {
            out.push("disable_trl");
        }
        if self.disable_ctrm {
            out.push("disable_ctrm");
        }
        out
    }

    pub fn from_flags<S: AsRef<str>>(flags: &[S]) -> Result<Self, ModelError> {
        let mut set = Self::default();
        for f in flags {
            match f.as_ref() {
                "disable_cde" => set.disable_cde = true,
                "disable_trl" => set.disable_trl = true,
                "disable_ctrm" => set.disable_ctrm = true,
                other => {
                    return Err(ModelError::Config(format!(
                        "unknown ablation flag {other:?}"
                    )))
                }
            }
        }
        set.validate()?;
        Ok(set)
    }
}

impl Serialize for AblationSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.flags().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AblationSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let flags: Vec<String> = Vec::deserialize(d)?;
        AblationSet::from_flags(&flags).map_err(serde::de::Error::custom)
    }
}

/// Dimensions and sub-configurations of the whole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_v: usize,
    pub vocab_size: usize,
    pub ctrm: CtrmConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.ctrm.validate()?;
        self.decoder.validate()?;
        if self.ctrm.d_model != self.decoder.d_model {
            return Err(ModelError::Config(format!(
                "encoder d_model {} must equal decoder d_model {}",
                self.ctrm.d_model, self.decoder.d_model
            )));
        }
        if self.d_v == 0 {
            return Err(ModelError::Config("d_v must be positive".into()));
        }
        if self.vocab_size <= 4 {
            return Err(ModelError::Config(
                "vocabulary must contain content tokens beyond the reserved four".into(),
            ));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.ctrm.d_model
    }

    /// Every trainable tensor of the model, in declaration order. The
    /// set is independent of ablation switches so checkpoints stay
    /// interchangeable across ablation runs.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_model();
        let mut specs = ctrm_param_specs(self.d_v, &self.ctrm);
        specs.extend(decoder_param_specs(self.vocab_size, &self.decoder));
        specs.push(ParamSpec::glorot("align.w_video", d, d));
        specs.push(ParamSpec::glorot("align.w_text", d, d));
        specs
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        ModelParams::init(&self.param_specs(), seed)
    }

    pub fn frame_positions(&self) -> PositionalEncoding {
        PositionalEncoding::sinusoidal(self.ctrm.max_frames, self.d_model())
    }

    pub fn token_positions(&self) -> PositionalEncoding {
        PositionalEncoding::sinusoidal(self.decoder.max_caption_len, self.d_model())
    }
}

/// Encoder output on a live tape: per-head CDE attention (empty when
/// the CDE is ablated) and the temporal embeddings `H_t`.
pub struct EncodeNodes {
    pub attention: Vec<Value>,
    pub h_t: Value,
}

/// Runs the ablation-aware encoder over a `[T×d_v]` frames value.
pub fn build_encode(
    tape: &Tape,
    frames: Value,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    ablation: &AblationSet,
    frame_pe: &PositionalEncoding,
) -> Result<EncodeNodes, ModelError> {
    ablation.validate()?;
    let t_frames = tape.shape_of(frames)[0];
    if t_frames > cfg.ctrm.max_frames {
        return Err(ModelError::Ctrm(CtrmError::Capacity {
            got: t_frames,
            max: cfg.ctrm.max_frames,
        }));
    }
    let (attention, h_c) = if ablation.cde_disabled() {
        (Vec::new(), build_input_projection(tape, frames, binding)?)
    } else {
        let nodes = build_cde(tape, frames, binding, &cfg.ctrm)?;
        (nodes.attention, nodes.embeddings)
    };
    let h_t = if ablation.trl_disabled() {
        let p = tape.constant(frame_pe.rows(t_frames));
        tape.add(h_c, p)?
    } else {
        build_trl(tape, h_c, binding, &cfg.ctrm, frame_pe)?
    };
    Ok(EncodeNodes { attention, h_t })
}

/// Plain-tensor encoder pass, returning stacked per-head attention
/// (empty shape when ablated) and `H_t`.
pub fn encode(
    frames: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
    ablation: &AblationSet,
) -> Result<(Vec<Tensor>, Tensor), ModelError> {
    let tape = Tape::new();
    let binding = ParamBinding::bind(&tape, params);
    let f = tape.constant(frames.clone());
    let pe = cfg.frame_positions();
    let nodes = build_encode(&tape, f, &binding, cfg, ablation, &pe)?;
    let attention = nodes.attention.iter().map(|&a| tape.value(a)).collect();
    Ok((attention, tape.value(nodes.h_t)))
}

/// One sample pushed through encoder and teacher-forced decoder: the
/// per-head attention, `H_t`, and the caption cross-entropy node.
pub struct SampleForward {
    pub attention: Vec<Value>,
    pub h_t: Value,
    pub caption_loss: Value,
}

/// Encodes the frames and scores the caption with teacher forcing.
pub fn build_caption_forward(
    tape: &Tape,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    ablation: &AblationSet,
    frames: Value,
    caption: &[TokenId],
    frame_pe: &PositionalEncoding,
    token_pe: &PositionalEncoding,
) -> Result<SampleForward, ModelError> {
    if caption.len() < 2 || caption[0] != BOS || *caption.last().unwrap() != EOS {
        return Err(ModelError::Decoder(DecoderError::BadTargets));
    }
    let encoded = build_encode(tape, frames, binding, cfg, ablation, frame_pe)?;
    let inputs = &caption[..caption.len() - 1];
    let targets = &caption[1..];
    let logits = build_decoder_logits(
        tape,
        inputs,
        encoded.h_t,
        binding,
        &cfg.decoder,
        cfg.vocab_size,
        token_pe,
    )?;
    let caption_loss = caption_cross_entropy_node(tape, logits, targets)?;
    Ok(SampleForward {
        attention: encoded.attention,
        h_t: encoded.h_t,
        caption_loss,
    })
}

/// Per-sample supervised loss components on a live tape.
pub struct SampleLossNodes {
    pub caption: Value,
    pub causal: Value,
    pub temporal: Value,
    pub h_t: Value,
}

/// Builds caption cross-entropy (teacher forcing over the caption),
/// causal alignment against the annotation, and temporal consistency
/// for one sample.
pub fn build_sample_losses(
    tape: &Tape,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    ablation: &AblationSet,
    frames: Value,
    caption: &[TokenId],
    annot: &CausalAnnotation,
    frame_pe: &PositionalEncoding,
    token_pe: &PositionalEncoding,
) -> Result<SampleLossNodes, ModelError> {
    let fwd = build_caption_forward(
        tape, binding, cfg, ablation, frames, caption, frame_pe, token_pe,
    )?;
    let causal = causal_alignment_node(tape, &fwd.attention, annot)?;
    let temporal = temporal_consistency_node(tape, fwd.h_t)?;
    Ok(SampleLossNodes {
        caption: fwd.caption_loss,
        causal,
        temporal,
        h_t: fwd.h_t,
    })
}

/// Pooled and projected video/text embedding rows for one sample:
/// mean-pooled `H_t` through `align.w_video`, and mean-pooled content
/// token embeddings through `align.w_text`.
pub fn build_pair_embeddings(
    tape: &Tape,
    binding: &ParamBinding,
    h_t: Value,
    caption: &[TokenId],
) -> Result<(Value, Value), ModelError> {
    let pooled_video = tape.mean_rows(h_t)?;
    let video = tape.matmul(pooled_video, binding.get("align.w_video")?)?;
    if caption.len() < 3 {
        return Err(ModelError::Config(
            "caption has no content tokens to embed".into(),
        ));
    }
    let content = &caption[1..caption.len() - 1];
    let embedded = tape.embedding_lookup(binding.get("dec.embed")?, content)?;
    let pooled_text = tape.mean_rows(embedded)?;
    let text = tape.matmul(pooled_text, binding.get("align.w_text")?)?;
    Ok((video, text))
}

/// In-batch contrastive loss over `(frames, caption)` pairs: encodes
/// every sample on the same tape, stacks the pair embeddings, and
/// applies the InfoNCE objective.
pub fn build_contrastive_batch(
    tape: &Tape,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    ablation: &AblationSet,
    batch: &[(&Tensor, &[TokenId])],
    tau: f64,
    frame_pe: &PositionalEncoding,
) -> Result<Value, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::Config("empty contrastive batch".into()));
    }
    let mut video_rows = Vec::with_capacity(batch.len());
    let mut text_rows = Vec::with_capacity(batch.len());
    for (frames, caption) in batch {
        let f = tape.constant((*frames).clone());
        let encoded = build_encode(tape, f, binding, cfg, ablation, frame_pe)?;
        let (video, text) = build_pair_embeddings(tape, binding, encoded.h_t, caption)?;
        video_rows.push(video);
        text_rows.push(text);
    }
    let video = tape.concat_rows(&video_rows)?;
    let text = tape.concat_rows(&text_rows)?;
    Ok(contrastive_node(tape, video, text, tau)?)
}

/// Smallest full model used by the finite-difference suite: every
/// architectural piece present at minimum width so whole-model checks
/// stay fast.
pub fn micro_model_config() -> ModelConfig {
    use crate::ctrm::CausalMaskMode;
    ModelConfig {
        d_v: 3,
        vocab_size: 9,
        ctrm: CtrmConfig {
            d_model: 4,
            n_heads: 2,
            n_trl_layers: 1,
            ffn_dim: 8,
            causal_mask_mode: CausalMaskMode::LowerTriangular,
            max_frames: 4,
        },
        decoder: DecoderConfig {
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            max_caption_len: 6,
            beam_width: 2,
        },
    }
}

/// Gradient checks for the composed training objectives: caption
/// cross-entropy, the fine-tuning composite, the contrastive loss, and
/// the full model loss over a micro-model's parameters and frames.
pub fn composed_loss_cases() -> Vec<crate::gradcheck::GradCheckCase> {
    use crate::gradcheck::{GradCheckCase, Inputs};
    use crate::losses::{caption_cross_entropy_node, contrastive_node, finetune_node, LossWeights};

    fn randn(rng: &mut crate::rng::Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    let to_numeric = |e: ModelError| match e {
        ModelError::Numeric(n) => n,
        other => NumericError::InvalidInput {
            op: "model",
            reason: other.to_string(),
        },
    };

    vec![
        GradCheckCase {
            name: "loss_caption_cross_entropy",
            gen: Box::new(|rng| {
                let mut m = Inputs::new();
                m.insert("logits".into(), randn(rng, vec![4, 6]));
                m
            }),
            forward: Box::new(|tape, v| {
                caption_cross_entropy_node(tape, v["logits"], &[2, 4, 5, 1])
            }),
        },
        GradCheckCase {
            name: "loss_finetune_composite",
            gen: Box::new(|rng| {
                let mut m = Inputs::new();
                m.insert("scores".into(), randn(rng, vec![3, 3]));
                m.insert("h".into(), randn(rng, vec![3, 4]));
                m.insert("logits".into(), randn(rng, vec![2, 6]));
                m
            }),
            forward: Box::new(|tape, v| {
                let weights = LossWeights {
                    lambda1: 0.7,
                    lambda2: 0.3,
                    ..LossWeights::default()
                };
                let attn = tape.causal_row_softmax(v["scores"])?;
                let mut annot = CausalAnnotation::empty(3);
                annot.add_edge(0, 1);
                annot.add_edge(1, 2);
                let causal = causal_alignment_node(tape, &[attn], &annot)?;
                let temporal = temporal_consistency_node(tape, v["h"])?;
                let caption = caption_cross_entropy_node(tape, v["logits"], &[3, 1])?;
                finetune_node(tape, caption, causal, temporal, &weights)
            }),
        },
        GradCheckCase {
            name: "loss_contrastive",
            gen: Box::new(|rng| {
                let mut m = Inputs::new();
                m.insert("v".into(), randn(rng, vec![3, 5]));
                m.insert("t".into(), randn(rng, vec![3, 5]));
                m
            }),
            forward: Box::new(|tape, vars| contrastive_node(tape, vars["v"], vars["t"], 0.07)),
        },
        GradCheckCase {
            name: "full_model_loss",
            gen: Box::new(|rng| {
                let cfg = micro_model_config();
                let seed = rng.next_u64();
                let params = cfg.init_params(seed);
                let mut inputs = Inputs::new();
                inputs.insert("frames".into(), randn(rng, vec![2, cfg.d_v]));
                for (name, t) in params.iter() {
                    inputs.insert(name.clone(), t.clone());
                }
                inputs
            }),
            forward: Box::new(move |tape, vars| {
                let cfg = micro_model_config();
                let frame_pe = cfg.frame_positions();
                let token_pe = cfg.token_positions();
                let caption: Vec<TokenId> = vec![BOS, 4, 6, EOS];
                let mut annot = CausalAnnotation::empty(2);
                annot.add_edge(0, 1);
                let weights = LossWeights {
                    lambda1: 0.4,
                    lambda2: 0.2,
                    tau: 0.1,
                    batch_size: 2,
                };
                let binding = ParamBinding::from_values(
                    vars.iter()
                        .filter(|(k, _)| k.as_str() != "frames")
                        .map(|(k, v)| (k.clone(), *v))
                        .collect(),
                );
                let parts = build_sample_losses(
                    tape,
                    &binding,
                    &cfg,
                    &AblationSet::none(),
                    vars["frames"],
                    &caption,
                    &annot,
                    &frame_pe,
                    &token_pe,
                )
                .map_err(to_numeric)?;
                let fine =
                    finetune_node(tape, parts.caption, parts.causal, parts.temporal, &weights)?;
                let (video, text) = build_pair_embeddings(tape, &binding, parts.h_t, &caption)
                    .map_err(to_numeric)?;
                let contrastive = contrastive_node(tape, video, text, weights.tau)?;
                tape.add(fine, contrastive)
            }),
        },
    ]
}

/// Every gradient check in one list: graph primitives first, then the
/// composed objectives.
pub fn full_gradcheck_suite() -> Vec<crate::gradcheck::GradCheckCase> {
    let mut cases = crate::gradcheck::primitive_cases();
    cases.extend(composed_loss_cases());
    cases
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossWeights;

    pub(crate) fn micro_config() -> ModelConfig {
        micro_model_config()
    }

    fn random_frames(t: usize, d_v: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::Rng::seeded(seed);
        Tensor::new(vec![t, d_v], (0..t * d_v).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn ablation_flags_validate_and_round_trip() {
        assert!(AblationSet::from_flags(&["disable_ctrm"]).is_err());
        let full =
            AblationSet::from_flags(&["disable_cde", "disable_trl", "disable_ctrm"]).unwrap();
        assert_eq!(full, AblationSet::without_ctrm());
        let json = serde_json::to_string(&AblationSet::without_cde()).unwrap();
        assert_eq!(json, r#"["disable_cde"]"#);
        let back: AblationSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, AblationSet::without_cde());
    }

    #[test]
    fn parameter_set_is_ablation_independent() {
        let cfg = micro_config();
        cfg.validate().unwrap();
        let params = cfg.init_params(0);
        // every ablation variant runs against the same parameter set
        for ablation in [
            AblationSet::none(),
            AblationSet::without_cde(),
            AblationSet::without_trl(),
            AblationSet::without_ctrm(),
        ] {
            let frames = random_frames(3, cfg.d_v, 1);
            let (attention, h_t) = encode(&frames, &params, &cfg, &ablation).unwrap();
            assert_eq!(h_t.shape(), &[3, 4]);
            assert_eq!(attention.is_empty(), ablation.cde_disabled());
        }
    }

    #[test]
    fn without_ctrm_is_projection_plus_positions() {
        let cfg = micro_config();
        let params = cfg.init_params(3);
        let frames = random_frames(2, cfg.d_v, 2);
        let (_, h_t) = encode(&frames, &params, &cfg, &AblationSet::without_ctrm()).unwrap();
        // by hand: frames·w_in + b_in + P
        let w = params.get("cde.w_in").unwrap();
        let b = params.get("cde.b_in").unwrap();
        let pe = cfg.frame_positions().rows(2);
        for i in 0..2 {
            for j in 0..cfg.d_model() {
                let mut acc = b.at(0, j) + pe.at(i, j);
                for p in 0..cfg.d_v {
                    acc += frames.at(i, p) * w.at(p, j);
                }
                assert!((h_t.at(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_model_loss_gradients_match_finite_differences() {
        use crate::gradcheck::{check_gradients, Inputs};
        let cfg = micro_config();
        let params = cfg.init_params(0);
        let frame_pe = cfg.frame_positions();
        let token_pe = cfg.token_positions();
        let caption: Vec<TokenId> = vec![BOS, 4, 6, EOS];
        let mut annot = CausalAnnotation::empty(2);
        annot.add_edge(0, 1);
        let weights = LossWeights {
            lambda1: 0.4,
            lambda2: 0.2,
            tau: 0.1,
            batch_size: 2,
        };

        let mut inputs = Inputs::new();
        inputs.insert("frames".into(), random_frames(2, cfg.d_v, 7));
        for (name, t) in params.iter() {
            inputs.insert(name.clone(), t.clone());
        }

        let outcome = check_gradients(
            "full_model_loss",
            &inputs,
            &move |tape, vars| {
                let binding = ParamBinding::from_values(
                    vars.iter()
                        .filter(|(k, _)| k.as_str() != "frames")
                        .map(|(k, v)| (k.clone(), *v))
                        .collect(),
                );
                let to_numeric = |e: ModelError| match e {
                    ModelError::Numeric(n) => n,
                    other => NumericError::InvalidInput {
                        op: "model",
                        reason: other.to_string(),
                    },
                };
                let parts = build_sample_losses(
                    tape,
                    &binding,
                    &cfg,
                    &AblationSet::none(),
                    vars["frames"],
                    &caption,
                    &annot,
                    &frame_pe,
                    &token_pe,
                )
                .map_err(to_numeric)?;
                let fine = crate::losses::finetune_node(
                    tape,
                    parts.caption,
                    parts.causal,
                    parts.temporal,
                    &weights,
                )?;
                // add the contrastive term so the alignment projections
                // also receive gradient signal
                let (video, text) = build_pair_embeddings(tape, &binding, parts.h_t, &caption)
                    .map_err(to_numeric)?;
                let contrastive = contrastive_node(tape, video, text, weights.tau)?;
                tape.add(fine, contrastive)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            outcome.passed,
            "max rel err {} at {:?}",
            outcome.max_rel_err, outcome.worst_at
        );
    }

    #[test]
    fn contrastive_batch_of_one_is_zero() {
        let cfg = micro_config();
        let params = cfg.init_params(0);
        let frames = random_frames(2, cfg.d_v, 4);
        let caption = vec![BOS, 5, EOS];
        let tape = Tape::new();
        let binding = ParamBinding::bind(&tape, &params);
        let pe = cfg.frame_positions();
        let loss = build_contrastive_batch(
            &tape,
            &binding,
            &cfg,
            &AblationSet::none(),
            &[(&frames, caption.as_slice())],
            0.07,
            &pe,
        )
        .unwrap();
        assert_eq!(tape.scalar_of(loss), 0.0);
    }
}
