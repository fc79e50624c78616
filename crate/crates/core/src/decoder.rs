//! Autoregressive caption decoder.
//!
//! A standard pre-norm transformer decoder conditioned on the temporal
//! embeddings `H_t`: masked self-attention over token embeddings,
//! cross-attention over `H_t`, a relu feed-forward block, and a final
//! projection to vocabulary logits. Logits row `i` is the next-token
//! distribution after consuming `targets[0..=i]`, so row `i` never
//! depends on `targets[j]` for `j > i`.
//!
//! Greedy and beam search are written against [`NextTokenScorer`] so
//! tests can drive them with hand-built table models.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{multi_head_attention, AttentionError, AttnMask};
use crate::ctrm::{PositionalEncoding, LAYER_NORM_EPS};
use crate::graph::{Tape, Value};
use crate::params::{ModelParams, ParamBinding, ParamError, ParamSpec};
use crate::tensor::{NumericError, Tensor};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Decoder feed-forward width as a multiple of `d_model`.
const FFN_MULTIPLE: usize = 2;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("invalid decoder configuration: {0}")]
    Config(String),
    #[error("unknown token id {id} for vocabulary of size {vocab}")]
    UnknownToken { id: TokenId, vocab: usize },
    #[error("targets must be non-empty and begin with <bos>")]
    BadTargets,
    #[error("sequence length {got} exceeds max_caption_len {max}")]
    TooLong { got: usize, max: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

impl From<AttentionError> for DecoderError {
    fn from(e: AttentionError) -> Self {
        match e {
            AttentionError::Numeric(n) => DecoderError::Numeric(n),
            AttentionError::Param(p) => DecoderError::Param(p),
        }
    }
}

/// Bidirectional token ↔ id map with fixed reserved ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from the reserved tokens plus `words`, in
    /// the order given. Duplicate or reserved-colliding words error.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Result<Self, DecoderError> {
        let mut tokens: Vec<String> = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for w in words {
            tokens.push(w.as_ref().to_string());
        }
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(DecoderError::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Restores a vocabulary from a full token list (as stored in a
    /// checkpoint); the first four entries must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, DecoderError> {
        let reserved = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];
        if tokens.len() < 4 || tokens[..4] != reserved.map(String::from) {
            return Err(DecoderError::Config(
                "vocabulary must start with <pad> <bos> <eos> <unk>".into(),
            ));
        }
        Self::with_words(&tokens[4..])
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK)
    }

    /// Joins the content tokens, skipping PAD/BOS/EOS.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Maximum decoder positions, i.e. the most tokens a decode may
    /// generate after BOS (teacher-forced inputs are bounded by the
    /// same count).
    pub max_caption_len: usize,
    pub beam_width: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(DecoderError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.max_caption_len == 0 || self.beam_width == 0 {
            return Err(DecoderError::Config(
                "n_layers, max_caption_len and beam_width must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        FFN_MULTIPLE * self.d_model
    }
}

/// Parameter declarations for the decoder and the output projection.
pub fn decoder_param_specs(vocab_size: usize, cfg: &DecoderConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let mut specs = vec![ParamSpec::glorot("dec.embed", vocab_size, d)];
    for l in 0..cfg.n_layers {
        specs.push(ParamSpec::ones(format!("dec.{l}.ln1.gain"), d));
        specs.push(ParamSpec::zeros(format!("dec.{l}.ln1.bias"), d));
        for h in 0..cfg.n_heads {
            specs.push(ParamSpec::glorot(format!("dec.{l}.self.head{h}.wq"), d, dh));
            specs.push(ParamSpec::glorot(format!("dec.{l}.self.head{h}.wk"), d, dh));
            specs.push(ParamSpec::glorot(format!("dec.{l}.self.head{h}.wv"), d, dh));
        }
        specs.push(ParamSpec::glorot(format!("dec.{l}.self.w_out"), d, d));
        specs.push(ParamSpec::zeros(format!("dec.{l}.self.b_out"), d));
        specs.push(ParamSpec::ones(format!("dec.{l}.ln2.gain"), d));
        specs.push(ParamSpec::zeros(format!("dec.{l}.ln2.bias"), d));
        for h in 0..cfg.n_heads {
            specs.push(ParamSpec::glorot(
                format!("dec.{l}.cross.head{h}.wq"),
                d,
                dh,
            ));
            specs.push(ParamSpec::glorot(
                format!("dec.{l}.cross.head{h}.wk"),
                d,
                dh,
            ));
            specs.push(ParamSpec::glorot(
                format!("dec.{l}.cross.head{h}.wv"),
                d,
                dh,
            ));
        }
        specs.push(ParamSpec::glorot(format!("dec.{l}.cross.w_out"), d, d));
        specs.push(ParamSpec::zeros(format!("dec.{l}.cross.b_out"), d));
        specs.push(ParamSpec::ones(format!("dec.{l}.ln3.gain"), d));
        specs.push(ParamSpec::zeros(format!("dec.{l}.ln3.bias"), d));
        specs.push(ParamSpec::glorot(
            format!("dec.{l}.ffn.w1"),
            d,
            cfg.ffn_dim(),
        ));
        specs.push(ParamSpec::zeros(format!("dec.{l}.ffn.b1"), cfg.ffn_dim()));
        specs.push(ParamSpec::glorot(
            format!("dec.{l}.ffn.w2"),
            cfg.ffn_dim(),
            d,
        ));
        specs.push(ParamSpec::zeros(format!("dec.{l}.ffn.b2"), d));
    }
    specs.push(ParamSpec::ones("dec.final_ln.gain", d));
    specs.push(ParamSpec::zeros("dec.final_ln.bias", d));
    specs.push(ParamSpec::glorot("dec.w_vocab", d, vocab_size));
    specs.push(ParamSpec::zeros("dec.b_vocab", vocab_size));
    specs
}

/// Teacher-forced decoder logits on a live tape.
///
/// `targets` must start with BOS; the returned value is `[N×|V|]` where
/// row `i` holds the logits for the token following `targets[0..=i]`.
pub fn build_decoder_logits(
    tape: &Tape,
    targets: &[TokenId],
    h_t: Value,
    binding: &ParamBinding,
    cfg: &DecoderConfig,
    vocab_size: usize,
    pe: &PositionalEncoding,
) -> Result<Value, DecoderError> {
    cfg.validate()?;
    if targets.is_empty() || targets[0] != BOS {
        return Err(DecoderError::BadTargets);
    }
    if targets.len() > cfg.max_caption_len {
        return Err(DecoderError::TooLong {
            got: targets.len(),
            max: cfg.max_caption_len,
        });
    }
    if let Some(&bad) = targets.iter().find(|&&id| id >= vocab_size) {
        return Err(DecoderError::UnknownToken {
            id: bad,
            vocab: vocab_size,
        });
    }

    let embedded = tape.embedding_lookup(binding.get("dec.embed")?, targets)?;
    let positions = tape.constant(pe.rows(targets.len()));
    let mut x = tape.add(embedded, positions)?;

    for l in 0..cfg.n_layers {
        let ln1 = tape.layer_norm(
            x,
            binding.get(&format!("dec.{l}.ln1.gain"))?,
            binding.get(&format!("dec.{l}.ln1.bias"))?,
            LAYER_NORM_EPS,
        )?;
        let (_, self_attn) = multi_head_attention(
            tape,
            ln1,
            ln1,
            binding,
            &format!("dec.{l}.self"),
            cfg.n_heads,
            AttnMask::Causal,
        )?;
        x = tape.add(x, self_attn)?;

        let ln2 = tape.layer_norm(
            x,
            binding.get(&format!("dec.{l}.ln2.gain"))?,
            binding.get(&format!("dec.{l}.ln2.bias"))?,
            LAYER_NORM_EPS,
        )?;
        let (_, cross_attn) = multi_head_attention(
            tape,
            ln2,
            h_t,
            binding,
            &format!("dec.{l}.cross"),
            cfg.n_heads,
            AttnMask::None,
        )?;
        x = tape.add(x, cross_attn)?;

        let ln3 = tape.layer_norm(
            x,
            binding.get(&format!("dec.{l}.ln3.gain"))?,
            binding.get(&format!("dec.{l}.ln3.bias"))?,
            LAYER_NORM_EPS,
        )?;
        let h1 = tape.matmul(ln3, binding.get(&format!("dec.{l}.ffn.w1"))?)?;
        let h1 = tape.add_row_bias(h1, binding.get(&format!("dec.{l}.ffn.b1"))?)?;
        let h1 = tape.relu(h1);
        let h2 = tape.matmul(h1, binding.get(&format!("dec.{l}.ffn.w2"))?)?;
        let h2 = tape.add_row_bias(h2, binding.get(&format!("dec.{l}.ffn.b2"))?)?;
        x = tape.add(x, h2)?;
    }

    let normed = tape.layer_norm(
        x,
        binding.get("dec.final_ln.gain")?,
        binding.get("dec.final_ln.bias")?,
        LAYER_NORM_EPS,
    )?;
    let logits = tape.matmul(normed, binding.get("dec.w_vocab")?)?;
    Ok(tape.add_row_bias(logits, binding.get("dec.b_vocab")?)?)
}

/// Teacher-forced logits over plain tensors.
pub fn decoder_logits(
    targets: &[TokenId],
    h_t: &Tensor,
    params: &ModelParams,
    cfg: &DecoderConfig,
) -> Result<Tensor, DecoderError> {
    let vocab_size = params.get("dec.w_vocab")?.cols();
    let pe = PositionalEncoding::sinusoidal(cfg.max_caption_len, cfg.d_model);
    let tape = Tape::new();
    let binding = ParamBinding::bind(&tape, params);
    let h = tape.constant(h_t.clone());
    let logits = build_decoder_logits(&tape, targets, h, &binding, cfg, vocab_size, &pe)?;
    Ok(tape.value(logits))
}

/// Anything that can score the next token given a prefix.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    /// Log-probabilities (log-softmax) of the next token after
    /// consuming `prefix`, which always starts with BOS.
    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>, DecoderError>;
}

/// Scores continuations with the transformer decoder and fixed `H_t`.
pub struct ModelScorer<'a> {
    pub h_t: &'a Tensor,
    pub params: &'a ModelParams,
    pub config: &'a DecoderConfig,
}

impl NextTokenScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.params
            .get("dec.w_vocab")
            .map(|t| t.cols())
            .unwrap_or(0)
    }

    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>, DecoderError> {
        let vocab_size = self.vocab_size();
        let pe = PositionalEncoding::sinusoidal(self.config.max_caption_len, self.config.d_model);
        let tape = Tape::new();
        let binding = ParamBinding::bind(&tape, self.params);
        let h = tape.constant(self.h_t.clone());
        let logits =
            build_decoder_logits(&tape, prefix, h, &binding, self.config, vocab_size, &pe)?;
        let log_probs = tape.row_log_softmax(logits)?;
        let all = tape.value(log_probs);
        Ok(all.row_slice(all.rows() - 1).to_vec())
    }
}

fn argmax_lowest_id(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding over any scorer: starting from BOS, repeatedly
/// append the argmax token (ties to the lowest id) until EOS or until
/// `max_new` tokens have been generated. The returned sequence includes
/// the leading BOS and the terminating EOS when one was emitted.
pub fn greedy_decode_with(
    scorer: &dyn NextTokenScorer,
    max_new: usize,
) -> Result<Vec<TokenId>, DecoderError> {
    let mut seq = vec![BOS];
    for _ in 0..max_new {
        let log_probs = scorer.next_log_probs(&seq)?;
        let next = argmax_lowest_id(&log_probs);
        seq.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(seq)
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    log_prob: f64,
}

impl Hypothesis {
    /// Total log-probability divided by generated length (tokens after
    /// BOS, including EOS).
    fn normalized(&self) -> f64 {
        self.log_prob / (self.tokens.len() - 1).max(1) as f64
    }
}

/// Length-normalized beam search over any scorer.
///
/// Keeps `beam_width` live prefixes ranked by cumulative log-probability
/// and collects every hypothesis that emits EOS; live prefixes are
/// force-finished at the length cap. Returns the finished hypothesis
/// with the best normalized score, breaking ties lexicographically by
/// token ids. `beam_width = 1` reduces to greedy decoding.
pub fn beam_decode_with(
    scorer: &dyn NextTokenScorer,
    beam_width: usize,
    max_new: usize,
) -> Result<Vec<TokenId>, DecoderError> {
    if beam_width == 0 {
        return Err(DecoderError::Config("beam_width must be at least 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_new {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let log_probs = scorer.next_log_probs(&hyp.tokens)?;
            for (tok, &lp) in log_probs.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + lp,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(beam_width);
        // EOS competes for beam slots like any token; winners finish
        live = Vec::new();
        for cand in candidates {
            if cand.tokens.last() == Some(&EOS) {
                finished.push(cand);
            } else {
                live.push(cand);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    // anything still live is force-finished at the cap
    finished.extend(live);

    finished.sort_by(|a, b| {
        b.normalized()
            .partial_cmp(&a.normalized())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    Ok(finished
        .into_iter()
        .next()
        .expect("beam is never empty")
        .tokens)
}

/// Greedy caption for a fixed `H_t` under the model decoder.
pub fn greedy_decode(
    h_t: &Tensor,
    params: &ModelParams,
    cfg: &DecoderConfig,
) -> Result<Vec<TokenId>, DecoderError> {
    let scorer = ModelScorer {
        h_t,
        params,
        config: cfg,
    };
    greedy_decode_with(&scorer, cfg.max_caption_len)
}

/// Beam-searched caption for a fixed `H_t` under the model decoder.
pub fn beam_decode(
    h_t: &Tensor,
    params: &ModelParams,
    cfg: &DecoderConfig,
) -> Result<Vec<TokenId>, DecoderError> {
    let scorer = ModelScorer {
        h_t,
        params,
        config: cfg,
    };
    beam_decode_with(&scorer, cfg.beam_width, cfg.max_caption_len)
}

/// Sum of per-step log-softmax scores of `sequence` (which must start
/// with BOS) under the scorer, plus the per-token breakdown.
pub fn sequence_log_prob(
    scorer: &dyn NextTokenScorer,
    sequence: &[TokenId],
) -> Result<(f64, Vec<f64>), DecoderError> {
    if sequence.is_empty() || sequence[0] != BOS {
        return Err(DecoderError::BadTargets);
    }
    let mut total = 0.0;
    let mut steps = Vec::new();
    for i in 1..sequence.len() {
        let log_probs = scorer.next_log_probs(&sequence[..i])?;
        let lp = log_probs[sequence[i]];
        total += lp;
        steps.push(lp);
    }
    Ok((total, steps))
}
