//! Staged training, checkpointing, and evaluation.
//!
//! Training follows the three-stage strategy: pre-training on caption
//! cross-entropy alone, fine-tuning with the causal and temporal
//! auxiliaries, and contrastive alignment; a `joint` stage optimizes
//! the sum of all components in one objective. Every stage runs Adam
//! over seed-shuffled mini-batches. Per-sample gradients are evaluated
//! in parallel and reduced in index order, so runs are bit-reproducible
//! regardless of thread count.
//!
//! Checkpoints are versioned binary containers: a magic tag, a JSON
//! header describing the arrays, then raw little-endian `f64` data.
//! A save/load round trip restores parameters, optimizer moments, and
//! the step counter exactly, so training resumes bit-for-bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctrm::PositionalEncoding;
use crate::data::{VideoSample, BECAUSE, HAPPENS, SO};
use crate::decoder::{
    beam_decode_with, greedy_decode_with, DecoderError, ModelScorer, TokenId, Vocabulary, BOS, EOS,
    PAD,
};
use crate::graph::{GradientMap, Tape};
use crate::losses::LossWeights;
use crate::metrics::{score_corpus, EvalCorpus, EvalEntry, MetricError, MetricReport};
use crate::model::{
    build_caption_forward, build_contrastive_batch, build_pair_embeddings, build_sample_losses,
    encode, AblationSet, ModelConfig, ModelError,
};
use crate::parallel::map_samples;
use crate::params::{ModelParams, ParamBinding, ParamError};
use crate::tensor::{NumericError, Tensor};

const CHECKPOINT_MAGIC: &[u8; 8] = b"CTRMCKP1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("loss became non-finite at stage {stage:?}, epoch {epoch}, batch {batch_index}, step {step}")]
    NanLoss {
        stage: Stage,
        epoch: usize,
        batch_index: usize,
        step: u64,
    },
    #[error("checkpoint vocabulary does not match the dataset vocabulary")]
    VocabMismatch,
    #[error("invalid stage order: {0}")]
    StageOrder(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
    Contrastive,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: Option<f64>,
    pub loss_weights: LossWeights,
    pub ablation: AblationSet,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: Some(1.0),
            loss_weights: LossWeights::default(),
            ablation: AblationSet::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::Config(format!(
                "learning_rate must be a non-negative finite number, got {}",
                self.learning_rate
            )));
        }
        if let Some(clip) = self.grad_clip_norm {
            if !(clip > 0.0) {
                return Err(TrainError::Config(format!(
                    "grad_clip_norm must be positive when set, got {clip}"
                )));
            }
        }
        self.loss_weights.validate()?;
        self.ablation.validate()?;
        Ok(())
    }
}

// ----- Adam ------------------------------------------------------------------

/// Adam optimizer state: first and second moment per parameter plus the
/// step counter used for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = |p: &ModelParams| {
            p.iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        Self {
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }

    /// One Adam update with bias correction:
    /// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
    /// `θ ← θ − lr·m̂/(√v̂ + ε)`.
    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &GradientMap,
        cfg: &TrainConfig,
    ) -> Result<(), TrainError> {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.adam_beta1.powi(t);
        let bias2 = 1.0 - cfg.adam_beta2.powi(t);
        for (name, grad) in grads {
            let m = self
                .m
                .get_mut(name)
                .ok_or_else(|| ParamError::Unknown(name.clone()))?;
            let v = self
                .v
                .get_mut(name)
                .ok_or_else(|| ParamError::Unknown(name.clone()))?;
            let p = params.get_mut(name)?;
            for ((pv, mv), (vv, gv)) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(grad.data()))
            {
                *mv = cfg.adam_beta1 * *mv + (1.0 - cfg.adam_beta1) * gv;
                *vv = cfg.adam_beta2 * *vv + (1.0 - cfg.adam_beta2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_gradients(grads: &mut GradientMap, max_norm: f64) {
    let total: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_in_place(scale);
        }
    }
}

// ----- checkpoints -------------------------------------------------------------

/// Complete training state: parameters, optimizer moments, step
/// counter, configuration echo, and the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub stage: Option<Stage>,
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub ablation: AblationSet,
    pub vocab_tokens: Vec<String>,
    pub params: ModelParams,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Untrained checkpoint with seeded parameters.
    pub fn fresh(model_config: &ModelConfig, vocab: &Vocabulary, seed: u64) -> Self {
        let params = model_config.init_params(seed);
        let adam = AdamState::new(&params);
        Self {
            step: 0,
            stage: None,
            model_config: model_config.clone(),
            train_config: None,
            ablation: AblationSet::default(),
            vocab_tokens: vocab.tokens().to_vec(),
            params,
            adam_m: adam.m,
            adam_v: adam.v,
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary, TrainError> {
        Vocabulary::from_tokens(self.vocab_tokens.clone()).map_err(TrainError::from)
    }

    fn fnv1a_hex(bytes: &[u8]) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        #[derive(Serialize)]
        struct ArrayMeta<'a> {
            name: &'a str,
            shape: &'a [usize],
            role: &'a str,
        }
        #[derive(Serialize)]
        struct Header<'a> {
            version: u32,
            step: u64,
            stage: Option<Stage>,
            model_config: &'a ModelConfig,
            train_config: &'a Option<TrainConfig>,
            ablation: &'a AblationSet,
            vocab: &'a [String],
            config_hash: String,
            arrays: Vec<ArrayMeta<'a>>,
        }

        let mut arrays: Vec<(String, &Tensor, &'static str)> = Vec::new();
        for (name, t) in self.params.iter() {
            arrays.push((name.clone(), t, "param"));
        }
        for (name, t) in &self.adam_m {
            arrays.push((name.clone(), t, "adam_m"));
        }
        for (name, t) in &self.adam_v {
            arrays.push((name.clone(), t, "adam_v"));
        }

        let config_json = serde_json::to_vec(&(&self.model_config, &self.train_config))
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let header = Header {
            version: CHECKPOINT_VERSION,
            step: self.step,
            stage: self.stage,
            model_config: &self.model_config,
            train_config: &self.train_config,
            ablation: &self.ablation,
            vocab: &self.vocab_tokens,
            config_hash: Self::fnv1a_hex(&config_json),
            arrays: arrays
                .iter()
                .map(|(name, t, role)| ArrayMeta {
                    name,
                    shape: t.shape(),
                    role,
                })
                .collect(),
        };
        let header_bytes =
            serde_json::to_vec(&header).map_err(|e| TrainError::Checkpoint(e.to_string()))?;

        let mut file = File::create(path)?;
        file.write_all(CHECKPOINT_MAGIC)?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for (_, t, _) in &arrays {
            for &x in t.data() {
                file.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        #[derive(Deserialize)]
        struct ArrayMeta {
            name: String,
            shape: Vec<usize>,
            role: String,
        }
        #[derive(Deserialize)]
        struct Header {
            version: u32,
            step: u64,
            stage: Option<Stage>,
            model_config: ModelConfig,
            train_config: Option<TrainConfig>,
            ablation: AblationSet,
            vocab: Vec<String>,
            #[allow(dead_code)]
            config_hash: String,
            arrays: Vec<ArrayMeta>,
        }

        let mut file = File::open(path)?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)
            .map_err(|_| TrainError::Checkpoint("file too short for magic tag".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("bad magic tag".into()));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)
            .map_err(|_| TrainError::Checkpoint("missing header length".into()))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)
            .map_err(|_| TrainError::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| TrainError::Checkpoint(format!("header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported version {}",
                header.version
            )));
        }

        let mut params = BTreeMap::new();
        let mut adam_m = BTreeMap::new();
        let mut adam_v = BTreeMap::new();
        for meta in &header.arrays {
            let n: usize = meta.shape.iter().product();
            let mut data = vec![0.0f64; n];
            let mut buf = [0u8; 8];
            for slot in &mut data {
                file.read_exact(&mut buf)
                    .map_err(|_| TrainError::Checkpoint("truncated array data".into()))?;
                *slot = f64::from_le_bytes(buf);
            }
            let tensor = Tensor::new(meta.shape.clone(), data)
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            match meta.role.as_str() {
                "param" => params.insert(meta.name.clone(), tensor),
                "adam_m" => adam_m.insert(meta.name.clone(), tensor),
                "adam_v" => adam_v.insert(meta.name.clone(), tensor),
                other => {
                    return Err(TrainError::Checkpoint(format!(
                        "unknown array role {other}"
                    )))
                }
            };
        }

        let ckpt = Self {
            step: header.step,
            stage: header.stage,
            model_config: header.model_config,
            train_config: header.train_config,
            ablation: header.ablation,
            vocab_tokens: header.vocab,
            params: ModelParams::from_map(params),
            adam_m,
            adam_v,
        };
        ckpt.params
            .validate_against(&ckpt.model_config.param_specs())
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        Ok(ckpt)
    }
}

// ----- stage training -----------------------------------------------------------

/// Per-stage training trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epoch_mean_losses: Vec<f64>,
    pub steps: u64,
    pub wall_time_secs: f64,
}

struct SampleRefs<'a> {
    frames: &'a Tensor,
    caption: &'a [TokenId],
    sample: &'a VideoSample,
}

fn supervised_sample(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    refs: &SampleRefs<'_>,
    frame_pe: &PositionalEncoding,
    token_pe: &PositionalEncoding,
    params: &ModelParams,
) -> Result<(f64, GradientMap), TrainError> {
    let tape = Tape::new();
    let binding = ParamBinding::bind(&tape, params);
    let frames = tape.constant(refs.frames.clone());
    let fwd = build_caption_forward(
        &tape,
        &binding,
        model_cfg,
        &cfg.ablation,
        frames,
        refs.caption,
        frame_pe,
        token_pe,
    )?;
    let loss = match cfg.stage {
        // pre-training ignores annotations entirely
        Stage::Pretrain => fwd.caption_loss,
        Stage::Finetune => {
            let causal =
                crate::losses::causal_alignment_node(&tape, &fwd.attention, &refs.sample.causal)?;
            let temporal = crate::losses::temporal_consistency_node(&tape, fwd.h_t)?;
            crate::losses::finetune_node(
                &tape,
                fwd.caption_loss,
                causal,
                temporal,
                &cfg.loss_weights,
            )?
        }
        other => {
            return Err(TrainError::Config(format!(
                "supervised_sample called for stage {other:?}"
            )))
        }
    };
    let grads = tape.gradient(loss)?;
    Ok((tape.scalar_of(loss), grads))
}

fn merge_gradients(parts: Vec<(f64, GradientMap)>) -> Result<(f64, GradientMap), TrainError> {
    let n = parts.len() as f64;
    let mut iter = parts.into_iter();
    let (first_loss, mut acc) = iter
        .next()
        .ok_or_else(|| TrainError::Config("empty batch".into()))?;
    let mut loss_sum = first_loss;
    for (loss, grads) in iter {
        loss_sum += loss;
        for (name, g) in grads {
            acc.get_mut(&name)
                .ok_or_else(|| ParamError::Unknown(name.clone()))?
                .axpy(1.0, &g)?;
        }
    }
    for g in acc.values_mut() {
        g.scale_in_place(1.0 / n);
    }
    Ok((loss_sum / n, acc))
}

fn batch_supervised(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    batch: &[&VideoSample],
    frame_pe: &PositionalEncoding,
    token_pe: &PositionalEncoding,
    params: &ModelParams,
) -> Result<(f64, GradientMap), TrainError> {
    let results: Vec<Result<(f64, GradientMap), TrainError>> = map_samples(batch, |sample| {
        let refs = SampleRefs {
            frames: &sample.frames,
            caption: &sample.caption,
            sample,
        };
        supervised_sample(cfg, model_cfg, &refs, frame_pe, token_pe, params)
    });
    let mut parts = Vec::with_capacity(results.len());
    for r in results {
        parts.push(r?);
    }
    merge_gradients(parts)
}

fn batch_contrastive(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    batch: &[&VideoSample],
    frame_pe: &PositionalEncoding,
    params: &ModelParams,
) -> Result<(f64, GradientMap), TrainError> {
    let tape = Tape::new();
    let binding = ParamBinding::bind(&tape, params);
    let pairs: Vec<(&Tensor, &[TokenId])> = batch
        .iter()
        .map(|s| (&s.frames, s.caption.as_slice()))
        .collect();
    let loss = build_contrastive_batch(
        &tape,
        &binding,
        model_cfg,
        &cfg.ablation,
        &pairs,
        cfg.loss_weights.tau,
        frame_pe,
    )?;
    let grads = tape.gradient(loss)?;
    Ok((tape.scalar_of(loss), grads))
}

/// Component values of one joint-objective batch.
#[derive(Debug, Clone, Serialize)]
pub struct JointBreakdown {
    pub caption: f64,
    pub causal: f64,
    pub temporal: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Joint objective over one batch on a single tape: mean caption loss,
/// weighted mean auxiliaries, plus the in-batch contrastive term.
pub fn joint_batch(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    batch: &[&VideoSample],
    frame_pe: &PositionalEncoding,
    token_pe: &PositionalEncoding,
    params: &ModelParams,
) -> Result<(JointBreakdown, GradientMap), TrainError> {
    let tape = Tape::new();
    let binding = ParamBinding::bind(&tape, params);
    let mut captions = Vec::new();
    let mut causals = Vec::new();
    let mut temporals = Vec::new();
    let mut videos = Vec::new();
    let mut texts = Vec::new();
    for sample in batch {
        let frames = tape.constant(sample.frames.clone());
        let parts = build_sample_losses(
            &tape,
            &binding,
            model_cfg,
            &cfg.ablation,
            frames,
            &sample.caption,
            &sample.causal,
            frame_pe,
            token_pe,
        )?;
        let (video, text) = build_pair_embeddings(&tape, &binding, parts.h_t, &sample.caption)?;
        captions.push(parts.caption);
        causals.push(parts.causal);
        temporals.push(parts.temporal);
        videos.push(video);
        texts.push(text);
    }
    let mean_of = |vals: &[crate::graph::Value]| -> Result<crate::graph::Value, NumericError> {
        let stacked = tape.concat_rows(vals)?;
        Ok(tape.mean_all(stacked))
    };
    let caption_mean = mean_of(&captions)?;
    let causal_mean = mean_of(&causals)?;
    let temporal_mean = mean_of(&temporals)?;
    let video = tape.concat_rows(&videos)?;
    let text = tape.concat_rows(&texts)?;
    let contrastive = crate::losses::contrastive_node(&tape, video, text, cfg.loss_weights.tau)?;
    let fine = crate::losses::finetune_node(
        &tape,
        caption_mean,
        causal_mean,
        temporal_mean,
        &cfg.loss_weights,
    )?;
    let total = tape.add(fine, contrastive)?;
    let grads = tape.gradient(total)?;
    Ok((
        JointBreakdown {
            caption: tape.scalar_of(caption_mean),
            causal: tape.scalar_of(causal_mean),
            temporal: tape.scalar_of(temporal_mean),
            contrastive: tape.scalar_of(contrastive),
            total: tape.scalar_of(total),
        },
        grads,
    ))
}

fn validate_data(
    model_cfg: &ModelConfig,
    vocab: &Vocabulary,
    data: &[VideoSample],
) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    if vocab.len() != model_cfg.vocab_size {
        return Err(TrainError::Config(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model_cfg.vocab_size
        )));
    }
    for (i, s) in data.iter().enumerate() {
        if s.n_frames() > model_cfg.ctrm.max_frames {
            return Err(TrainError::Config(format!(
                "sample {i} has {} frames, max_frames is {}",
                s.n_frames(),
                model_cfg.ctrm.max_frames
            )));
        }
        if s.caption.len() - 1 > model_cfg.decoder.max_caption_len {
            return Err(TrainError::Config(format!(
                "sample {i} caption needs {} decoder positions, max_caption_len is {}",
                s.caption.len() - 1,
                model_cfg.decoder.max_caption_len
            )));
        }
        if s.frames.cols() != model_cfg.d_v {
            return Err(TrainError::Config(format!(
                "sample {i} has feature width {}, model expects {}",
                s.frames.cols(),
                model_cfg.d_v
            )));
        }
    }
    Ok(())
}

fn stage_tag(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "shuffle-pretrain",
        Stage::Finetune => "shuffle-finetune",
        Stage::Contrastive => "shuffle-contrastive",
        Stage::Joint => "shuffle-joint",
    }
}

/// Runs one training stage for `cfg.epochs` epochs, starting from
/// `init` (or a fresh seed-initialized model).
///
/// Resumption: a checkpoint produced by the same stage continues its
/// epoch numbering and optimizer moments, so splitting `epochs = a + b`
/// across two calls reproduces a single `a + b`-epoch run bit-for-bit.
/// A checkpoint from a different stage keeps only the parameters;
/// moments and the step counter start fresh.
pub fn run_stage(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    vocab: &Vocabulary,
    data: &[VideoSample],
    init: Option<&Checkpoint>,
) -> Result<(Checkpoint, StageReport), TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    validate_data(model_cfg, vocab, data)?;

    let started = Instant::now();
    let (mut params, mut adam, start_step) = match init {
        Some(ckpt) => {
            if ckpt.vocab_tokens != vocab.tokens() {
                return Err(TrainError::VocabMismatch);
            }
            if ckpt.model_config != *model_cfg {
                return Err(TrainError::Config(
                    "checkpoint model configuration differs from the requested one".into(),
                ));
            }
            ckpt.params
                .validate_against(&model_cfg.param_specs())
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            if ckpt.stage == Some(cfg.stage) {
                let adam = AdamState {
                    m: ckpt.adam_m.clone(),
                    v: ckpt.adam_v.clone(),
                    step: ckpt.step,
                };
                (ckpt.params.clone(), adam, ckpt.step)
            } else {
                let params = ckpt.params.clone();
                let adam = AdamState::new(&params);
                (params, adam, 0)
            }
        }
        None => {
            let params = model_cfg.init_params(cfg.seed);
            let adam = AdamState::new(&params);
            (params, adam, 0)
        }
    };

    let frame_pe = model_cfg.frame_positions();
    let token_pe = model_cfg.token_positions();
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let start_epoch = (start_step / batches_per_epoch as u64) as usize;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = start_step;
    for epoch in start_epoch..start_epoch + cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        crate::rng::Rng::stream(cfg.seed, stage_tag(cfg.stage), epoch as u64).shuffle(&mut order);

        let mut weighted_loss = 0.0;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&VideoSample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, mut grads) = match cfg.stage {
                Stage::Pretrain | Stage::Finetune => {
                    batch_supervised(cfg, model_cfg, &batch, &frame_pe, &token_pe, &params)?
                }
                Stage::Contrastive => {
                    batch_contrastive(cfg, model_cfg, &batch, &frame_pe, &params)?
                }
                Stage::Joint => {
                    let (breakdown, grads) =
                        joint_batch(cfg, model_cfg, &batch, &frame_pe, &token_pe, &params)?;
                    (breakdown.total, grads)
                }
            };
            if !loss.is_finite() {
                return Err(TrainError::NanLoss {
                    stage: cfg.stage,
                    epoch,
                    batch_index,
                    step,
                });
            }
            if let Some(max_norm) = cfg.grad_clip_norm {
                clip_gradients(&mut grads, max_norm);
            }
            adam.apply(&mut params, &grads, cfg)?;
            step += 1;
            weighted_loss += loss * batch.len() as f64;
        }
        epoch_losses.push(weighted_loss / data.len() as f64);
    }

    let checkpoint = Checkpoint {
        step,
        stage: Some(cfg.stage),
        model_config: model_cfg.clone(),
        train_config: Some(cfg.clone()),
        ablation: cfg.ablation,
        vocab_tokens: vocab.tokens().to_vec(),
        params,
        adam_m: adam.m,
        adam_v: adam.v,
    };
    let report = StageReport {
        stage: cfg.stage,
        epoch_mean_losses: epoch_losses,
        steps: step - start_step,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((checkpoint, report))
}

// ----- evaluation -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodingStrategy {
    Greedy,
    Beam,
}

/// Fraction of eligible samples (ground truth has a non-chain causal
/// edge) whose generated caption contains a causal connective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalityAnalysis {
    pub eligible: usize,
    pub with_connective: usize,
    pub fraction: Option<f64>,
}

/// Fraction of captions that mention every ground-truth event, in
/// ground-truth order (by first mention).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalAnalysis {
    pub total: usize,
    pub consistent: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub decoding: DecodingStrategy,
    pub metrics: MetricReport,
    pub causality: CausalityAnalysis,
    pub temporal: TemporalAnalysis,
}

fn strip_specials(tokens: &[TokenId]) -> Vec<TokenId> {
    tokens
        .iter()
        .copied()
        .filter(|&t| t != BOS && t != EOS && t != PAD)
        .collect()
}

fn to_words(tokens: &[TokenId], vocab: &Vocabulary) -> Vec<String> {
    tokens
        .iter()
        .filter_map(|&t| vocab.token(t).map(String::from))
        .collect()
}

/// Event names in narration order: every token directly followed by
/// "happens" names one event clause.
fn clause_heads(tokens: &[TokenId], vocab: &Vocabulary) -> Vec<TokenId> {
    let happens = vocab.id(HAPPENS);
    tokens
        .windows(2)
        .filter(|w| Some(w[1]) == happens)
        .map(|w| w[0])
        .collect()
}

fn mentions_in_order(generated: &[TokenId], gt_heads: &[TokenId]) -> bool {
    if gt_heads.is_empty() {
        return true;
    }
    let first_mention = |tok: TokenId| generated.iter().position(|&t| t == tok);
    let mut last = None;
    for &head in gt_heads {
        match first_mention(head) {
            None => return false,
            Some(pos) => {
                if let Some(prev) = last {
                    if pos <= prev {
                        return false;
                    }
                }
                last = Some(pos);
            }
        }
    }
    true
}

/// Decodes every sample under the given parameters, in parallel when
/// the `parallel` feature is enabled. Returns one token sequence per
/// sample, in input order.
pub fn decode_corpus(
    data: &[VideoSample],
    model_cfg: &ModelConfig,
    params: &ModelParams,
    ablation: &AblationSet,
    decoding: DecodingStrategy,
) -> Result<Vec<Vec<TokenId>>, TrainError> {
    let decoded: Vec<Result<Vec<TokenId>, TrainError>> = map_samples(data, |sample| {
        let (_, h_t) = encode(&sample.frames, params, model_cfg, ablation)?;
        let scorer = ModelScorer {
            h_t: &h_t,
            params,
            config: &model_cfg.decoder,
        };
        let max_new = model_cfg.decoder.max_caption_len;
        let seq = match decoding {
            DecodingStrategy::Greedy => greedy_decode_with(&scorer, max_new)?,
            DecodingStrategy::Beam => {
                beam_decode_with(&scorer, model_cfg.decoder.beam_width, max_new)?
            }
        };
        Ok(seq)
    });
    decoded.into_iter().collect()
}

/// Decodes every sample and scores the corpus, including the causality
/// and temporal-order analyses against the generator's ground truth.
pub fn evaluate(
    ckpt: &Checkpoint,
    data: &[VideoSample],
    vocab: &Vocabulary,
    decoding: DecodingStrategy,
) -> Result<EvalReport, TrainError> {
    if ckpt.vocab_tokens != vocab.tokens() {
        return Err(TrainError::VocabMismatch);
    }
    validate_data(&ckpt.model_config, vocab, data)?;
    let decoded = decode_corpus(
        data,
        &ckpt.model_config,
        &ckpt.params,
        &ckpt.ablation,
        decoding,
    )?;

    let mut entries = Vec::with_capacity(data.len());
    let mut eligible = 0;
    let mut with_connective = 0;
    let mut consistent = 0;
    let because = vocab.id(BECAUSE);
    let so = vocab.id(SO);
    for (i, (sample, generated)) in data.iter().zip(decoded).enumerate() {
        let hyp = strip_specials(&generated);
        let reference = strip_specials(&sample.caption);
        entries.push(EvalEntry {
            id: format!("s{i}"),
            hypothesis: to_words(&hyp, vocab),
            references: vec![to_words(&reference, vocab)],
        });
        if sample.has_non_chain_edge() {
            eligible += 1;
            if hyp.iter().any(|&t| Some(t) == because || Some(t) == so) {
                with_connective += 1;
            }
        }
        let gt_heads = clause_heads(&sample.caption, vocab);
        if mentions_in_order(&hyp, &gt_heads) {
            consistent += 1;
        }
    }

    let corpus = EvalCorpus::new(entries)?;
    let metrics = score_corpus(&corpus)?;
    Ok(EvalReport {
        n_samples: data.len(),
        decoding,
        metrics,
        causality: CausalityAnalysis {
            eligible,
            with_connective,
            fraction: if eligible > 0 {
                Some(with_connective as f64 / eligible as f64)
            } else {
                None
            },
        },
        temporal: TemporalAnalysis {
            total: data.len(),
            consistent,
            fraction: consistent as f64 / data.len() as f64,
        },
    })
}

// ----- pipeline --------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
    pub final_eval: Option<EvalReport>,
}

/// Validates the stage sequence: a single `joint` run, or a non-empty
/// in-order subsequence of pretrain → finetune → contrastive.
pub fn validate_stage_order(configs: &[TrainConfig]) -> Result<(), TrainError> {
    if configs.is_empty() {
        return Err(TrainError::StageOrder("no stages configured".into()));
    }
    let stages: Vec<Stage> = configs.iter().map(|c| c.stage).collect();
    if stages == [Stage::Joint] {
        return Ok(());
    }
    if stages.contains(&Stage::Joint) {
        return Err(TrainError::StageOrder(
            "joint must be the only stage when used".into(),
        ));
    }
    let rank = |s: Stage| match s {
        Stage::Pretrain => 0,
        Stage::Finetune => 1,
        Stage::Contrastive => 2,
        Stage::Joint => 3,
    };
    for pair in stages.windows(2) {
        if rank(pair[0]) >= rank(pair[1]) {
            return Err(TrainError::StageOrder(format!(
                "{:?} cannot follow {:?}",
                pair[1], pair[0]
            )));
        }
    }
    Ok(())
}

/// Chains training stages with checkpoint hand-off, evaluating at the
/// end when evaluation data is supplied. `on_stage_complete` runs after
/// each stage (the CLI uses it to persist per-stage checkpoints).
///
/// With `init` pointing at a checkpoint saved by one of the configured
/// stages, completed stages are skipped and the matching stage resumes
/// from its recorded epoch position.
pub fn run_pipeline(
    configs: &[TrainConfig],
    model_cfg: &ModelConfig,
    vocab: &Vocabulary,
    train_data: &[VideoSample],
    eval_data: Option<&[VideoSample]>,
    init: Option<Checkpoint>,
    mut on_stage_complete: impl FnMut(usize, &Checkpoint) -> Result<(), TrainError>,
) -> Result<(Checkpoint, PipelineReport), TrainError> {
    validate_stage_order(configs)?;
    let mut reports = Vec::new();
    let mut current = init;
    let mut start_index = 0;
    if let Some(ckpt) = &current {
        if let Some(stage) = ckpt.stage {
            let position = configs
                .iter()
                .position(|c| c.stage == stage)
                .ok_or_else(|| {
                    TrainError::StageOrder(format!(
                        "checkpoint stage {stage:?} is not part of the configured pipeline"
                    ))
                })?;
            let cfg = &configs[position];
            let batches = train_data.len().div_ceil(cfg.batch_size) as u64;
            let done_epochs = (ckpt.step / batches.max(1)) as usize;
            if done_epochs >= cfg.epochs {
                start_index = position + 1;
            } else {
                // resume inside this stage for the remaining epochs
                let mut remaining = cfg.clone();
                remaining.epochs = cfg.epochs - done_epochs;
                let (ckpt_out, report) =
                    run_stage(&remaining, model_cfg, vocab, train_data, current.as_ref())?;
                on_stage_complete(position, &ckpt_out)?;
                reports.push(report);
                current = Some(ckpt_out);
                start_index = position + 1;
            }
        }
    }
    for (i, cfg) in configs.iter().enumerate().skip(start_index) {
        let (ckpt, report) = run_stage(cfg, model_cfg, vocab, train_data, current.as_ref())?;
        on_stage_complete(i, &ckpt)?;
        reports.push(report);
        current = Some(ckpt);
    }
    let final_ckpt = current.ok_or_else(|| TrainError::StageOrder("nothing to run".into()))?;
    let final_eval = match eval_data {
        Some(data) => Some(evaluate(
            &final_ckpt,
            data,
            vocab,
            DecodingStrategy::Greedy,
        )?),
        None => None,
    };
    Ok((
        final_ckpt,
        PipelineReport {
            stages: reports,
            final_eval,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctrm::{CausalMaskMode, CtrmConfig};
    use crate::data::{dataset_vocabulary, generate_dataset, GeneratorConfig};
    use crate::decoder::DecoderConfig;

    pub(crate) fn tiny_model(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_v: 6,
            vocab_size,
            ctrm: CtrmConfig {
                d_model: 8,
                n_heads: 2,
                n_trl_layers: 1,
                ffn_dim: 16,
                causal_mask_mode: CausalMaskMode::LowerTriangular,
                max_frames: 12,
            },
            decoder: DecoderConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                max_caption_len: 20,
                beam_width: 2,
            },
        }
    }

    fn tiny_dataset(n: usize, seed: u64) -> Vec<VideoSample> {
        generate_dataset(
            &GeneratorConfig {
                n_event_types: 6,
                n_events_per_video: (2, 3),
                frames_per_event: (1, 2),
                d_v: 6,
                feature_noise_sigma: 0.05,
                causal_edge_prob: 0.5,
                seed,
            },
            n,
        )
        .unwrap()
    }

    #[test]
    fn adam_single_step_matches_hand_computation() {
        // quadratic bowl: loss = Σ (p − c)², gradient 2(p − c)
        let cfg = TrainConfig {
            learning_rate: 0.01,
            grad_clip_norm: None,
            ..TrainConfig::default()
        };
        let c = [0.5, -1.0];
        let p0 = [2.0, 3.0];
        let mut params = ModelParams::from_map(
            [(
                "p".to_string(),
                Tensor::new(vec![1, 2], p0.to_vec()).unwrap(),
            )]
            .into(),
        );
        let mut adam = AdamState::new(&params);

        let tape = Tape::new();
        let p = ParamBinding::bind(&tape, &params).get("p").unwrap();
        let target = tape.constant(Tensor::new(vec![1, 2], c.to_vec()).unwrap());
        let diff = tape.sub(p, target).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.gradient(loss).unwrap();
        adam.apply(&mut params, &grads, &cfg).unwrap();

        for i in 0..2 {
            let g = 2.0 * (p0[i] - c[i]);
            let m = (1.0 - cfg.adam_beta1) * g;
            let v = (1.0 - cfg.adam_beta2) * g * g;
            let m_hat = m / (1.0 - cfg.adam_beta1);
            let v_hat = v / (1.0 - cfg.adam_beta2);
            let expected = p0[i] - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            let got = params.get("p").unwrap().data()[i];
            assert!(
                (got - expected).abs() < 1e-12,
                "component {i}: {got} vs {expected}"
            );
            assert!((adam.m["p"].data()[i] - m).abs() < 1e-15);
            assert!((adam.v["p"].data()[i] - v).abs() < 1e-15);
        }
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let vocab = dataset_vocabulary();
        let model_cfg = tiny_model(vocab.len());
        let data = tiny_dataset(6, 3);
        let cfg = TrainConfig {
            stage: Stage::Pretrain,
            epochs: 2,
            batch_size: 3,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let initial = model_cfg.init_params(cfg.seed);
        let (ckpt, _) = run_stage(&cfg, &model_cfg, &vocab, &data, None).unwrap();
        assert_eq!(ckpt.params, initial);
    }

    #[test]
    fn same_seed_gives_identical_loss_traces() {
        let vocab = dataset_vocabulary();
        let model_cfg = tiny_model(vocab.len());
        let data = tiny_dataset(6, 3);
        let cfg = TrainConfig {
            stage: Stage::Finetune,
            epochs: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let (ck1, r1) = run_stage(&cfg, &model_cfg, &vocab, &data, None).unwrap();
        let (ck2, r2) = run_stage(&cfg, &model_cfg, &vocab, &data, None).unwrap();
        assert_eq!(r1.epoch_mean_losses, r2.epoch_mean_losses);
        assert_eq!(ck1.params, ck2.params);
    }

    #[test]
    fn checkpoint_round_trip_and_split_run_equivalence() {
        let vocab = dataset_vocabulary();
        let model_cfg = tiny_model(vocab.len());
        let data = tiny_dataset(6, 9);
        let full = TrainConfig {
            stage: Stage::Pretrain,
            epochs: 4,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let (uninterrupted, _) = run_stage(&full, &model_cfg, &vocab, &data, None).unwrap();

        let first = TrainConfig {
            epochs: 2,
            ..full.clone()
        };
        let (mid, _) = run_stage(&first, &model_cfg, &vocab, &data, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        mid.save(&path).unwrap();
        let restored = Checkpoint::load(&path).unwrap();
        assert_eq!(restored, mid);

        let rest = TrainConfig { epochs: 2, ..full };
        let (resumed, _) = run_stage(&rest, &model_cfg, &vocab, &data, Some(&restored)).unwrap();
        assert_eq!(resumed.params, uninterrupted.params);
        assert_eq!(resumed.adam_m, uninterrupted.adam_m);
        assert_eq!(resumed.adam_v, uninterrupted.adam_v);
        assert_eq!(resumed.step, uninterrupted.step);
    }

    #[test]
    fn later_stages_accept_pretrain_checkpoints_under_every_ablation() {
        let vocab = dataset_vocabulary();
        let model_cfg = tiny_model(vocab.len());
        let data = tiny_dataset(4, 1);
        let pre = TrainConfig {
            stage: Stage::Pretrain,
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        for ablation in [
            AblationSet::none(),
            AblationSet::without_cde(),
            AblationSet::without_trl(),
            AblationSet::without_ctrm(),
        ] {
            let cfg = TrainConfig {
                ablation,
                ..pre.clone()
            };
            let (ckpt, _) = run_stage(&cfg, &model_cfg, &vocab, &data, None).unwrap();
            for stage in [Stage::Finetune, Stage::Contrastive] {
                let next = TrainConfig {
                    stage,
                    epochs: 1,
                    batch_size: 2,
                    ablation,
                    ..TrainConfig::default()
                };
                run_stage(&next, &model_cfg, &vocab, &data, Some(&ckpt))
                    .unwrap_or_else(|e| panic!("{stage:?} with {ablation:?}: {e}"));
            }
        }
    }

    #[test]
    fn joint_total_equals_sum_of_components() {
        let vocab = dataset_vocabulary();
        let model_cfg = tiny_model(vocab.len());
        let data = tiny_dataset(4, 5);
        let cfg = TrainConfig {
            stage: Stage::Joint,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let params = model_cfg.init_params(0);
        let batch: Vec<&VideoSample> = data.iter().collect();
        let frame_pe = model_cfg.frame_positions();
        let token_pe = model_cfg.token_positions();
        let (breakdown, _) =
            joint_batch(&cfg, &model_cfg, &batch, &frame_pe, &token_pe, &params).unwrap();
        let expected = breakdown.caption
            + cfg.loss_weights.lambda1 * breakdown.causal
            + cfg.loss_weights.lambda2 * breakdown.temporal
            + breakdown.contrastive;
        assert!((breakdown.total - expected).abs() < 1e-10);
    }

    #[test]
    fn stage_order_is_validated() {
        let mk = |stage| TrainConfig {
            stage,
            ..TrainConfig::default()
        };
        assert!(validate_stage_order(&[mk(Stage::Pretrain)]).is_ok());
        assert!(validate_stage_order(&[
            mk(Stage::Pretrain),
            mk(Stage::Finetune),
            mk(Stage::Contrastive)
        ])
        .is_ok());
        assert!(validate_stage_order(&[mk(Stage::Joint)]).is_ok());
        assert!(validate_stage_order(&[mk(Stage::Finetune), mk(Stage::Pretrain)]).is_err());
        assert!(validate_stage_order(&[mk(Stage::Pretrain), mk(Stage::Joint)]).is_err());
        assert!(validate_stage_order(&[]).is_err());
    }

    #[test]
    fn evaluating_references_against_themselves_is_perfect() {
        let vocab = dataset_vocabulary();
        let model_cfg = tiny_model(vocab.len());
        let data = tiny_dataset(6, 7);
        // bypass the model: score the reference corpus directly
        let entries: Vec<EvalEntry> = data
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let reference = to_words(&strip_specials(&s.caption), &vocab);
                EvalEntry {
                    id: format!("s{i}"),
                    hypothesis: reference.clone(),
                    references: vec![reference],
                }
            })
            .collect();
        let report = score_corpus(&EvalCorpus::new(entries).unwrap()).unwrap();
        assert!((report.bleu4 - 1.0).abs() < 1e-12);
        assert!((report.rouge_l - 1.0).abs() < 1e-12);
        let _ = model_cfg;
    }

    #[test]
    fn untrained_model_eval_reports_proxies_in_range() {
        let vocab = dataset_vocabulary();
        let model_cfg = tiny_model(vocab.len());
        let data = tiny_dataset(10, 11);
        let ckpt = Checkpoint::fresh(&model_cfg, &vocab, 0);
        let report = evaluate(&ckpt, &data, &vocab, DecodingStrategy::Greedy).unwrap();
        println!(
            "untrained causality fraction: {:?}, temporal: {}",
            report.causality.fraction, report.temporal.fraction
        );
        if let Some(f) = report.causality.fraction {
            assert!((0.0..=1.0).contains(&f));
        }
        assert!((0.0..=1.0).contains(&report.temporal.fraction));
        assert!(report.metrics.bleu4 >= 0.0 && report.metrics.bleu4 <= 1.0);
    }

    #[test]
    fn vocabulary_mismatch_is_a_hard_error() {
        let vocab = dataset_vocabulary();
        let model_cfg = tiny_model(vocab.len());
        let data = tiny_dataset(3, 2);
        let mut ckpt = Checkpoint::fresh(&model_cfg, &vocab, 0);
        ckpt.vocab_tokens[5] = "tampered".into();
        assert!(matches!(
            evaluate(&ckpt, &data, &vocab, DecodingStrategy::Greedy),
            Err(TrainError::VocabMismatch)
        ));
    }

    #[test]
    fn single_stage_pipeline_equals_run_stage() {
        let vocab = dataset_vocabulary();
        let model_cfg = tiny_model(vocab.len());
        let data = tiny_dataset(6, 13);
        let cfg = TrainConfig {
            stage: Stage::Pretrain,
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let (direct, _) = run_stage(&cfg, &model_cfg, &vocab, &data, None).unwrap();
        let (piped, report) =
            run_pipeline(&[cfg], &model_cfg, &vocab, &data, None, None, |_, _| Ok(())).unwrap();
        assert_eq!(direct.params, piped.params);
        assert_eq!(report.stages.len(), 1);
    }

    #[test]
    fn nan_loss_aborts_with_location() {
        let vocab = dataset_vocabulary();
        let model_cfg = tiny_model(vocab.len());
        let data = tiny_dataset(4, 17);
        let cfg = TrainConfig {
            stage: Stage::Pretrain,
            epochs: 1,
            batch_size: 2,
            // absurd learning rate overflows the matmul chain in one step
            learning_rate: 1e300,
            grad_clip_norm: None,
            ..TrainConfig::default()
        };
        match run_stage(&cfg, &model_cfg, &vocab, &data, None) {
            Err(TrainError::NanLoss { stage, .. }) => assert_eq!(stage, Stage::Pretrain),
            other => panic!("expected NaN abort, got {other:?}"),
        }
    }
}
