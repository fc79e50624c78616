//! Synthetic causal-temporal video dataset.
//!
//! Each sample is a chain of latent events. Every event type has a
//! fixed prototype feature vector; a frame is its event's prototype
//! plus Gaussian noise. Consecutive events are linked by temporal
//! chain edges; in addition, an ordered pair of event *types* `(a, b)`
//! is causally linked when the cosine similarity of their prototypes
//! exceeds the `(1 − causal_edge_prob)` quantile of the cosine
//! distribution for random prototypes, so a random pair is causal with
//! probability `causal_edge_prob`. Grounding causality in feature
//! geometry (rather than an independent coin per pair) keeps the
//! relation consistent between training and held-out samples and makes
//! it recoverable from the frames themselves.
//!
//! Captions follow a fixed template grammar over the event names:
//!
//! ```text
//! caption   := <bos> clause₀ (conn_k clause_k because_k*)* <eos>
//! clause_k  := name_k "happens"
//! conn_k    := "so"   if the adjacent pair (k−1, k) is causal
//!              "then" otherwise
//! because_k := "because" name_i   for each causal edge (i, k), i < k−1
//! ```
//!
//! A one-event caption is the bare clause. Causal connectives
//! ("so"/"because") appear exactly for sampled causal edges, which
//! makes the causality analysis in evaluation machine-checkable.
//!
//! Frame-level annotations anchor each event at its first frame: the
//! adjacency records `cause anchor → effect anchor` for chain and
//! causal edges alike.
//!
//! The on-disk format is JSONL, one object per line with fields
//! `frames`, `caption` (string tokens including `<bos>`/`<eos>`),
//! `causal_edges` (`[from_frame, to_frame]` pairs), and `event_ids`.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{TokenId, Vocabulary, BOS, EOS, PAD};
use crate::losses::CausalAnnotation;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Closed table of event names; `n_event_types` indexes a prefix.
pub const EVENT_NAMES: [&str; 24] = [
    "alarm", "bell", "crash", "dance", "door", "engine", "fall", "fire", "glass", "horn", "jump",
    "kick", "light", "music", "push", "rain", "run", "shout", "siren", "slide", "spark", "splash",
    "whistle", "wind",
];

pub const HAPPENS: &str = "happens";
pub const THEN: &str = "then";
pub const SO: &str = "so";
pub const BECAUSE: &str = "because";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error("vocabulary overflow: {needed} event types requested, name table holds {available}")]
    VocabularyOverflow { needed: usize, available: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("schema error: {0}")]
    Schema(String),
}

/// The canonical vocabulary shared by every generated dataset: the
/// four reserved tokens, the structural words, then the full event
/// name table. Fixed so that checkpoints and datasets generated under
/// any configuration agree on token ids.
pub fn dataset_vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = vec![HAPPENS, THEN, SO, BECAUSE];
    words.extend_from_slice(&EVENT_NAMES);
    Vocabulary::with_words(&words).expect("canonical vocabulary is well-formed")
}

/// One annotated video: per-frame features, the tokenized caption
/// (BOS … EOS), frame-level causal adjacency, and the index of the
/// latent event each frame belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub frames: Tensor,
    pub caption: Vec<TokenId>,
    pub causal: CausalAnnotation,
    pub event_ids: Vec<usize>,
}

impl VideoSample {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    /// True when some annotated edge skips at least one event, i.e. it
    /// cannot be a temporal chain edge.
    pub fn has_non_chain_edge(&self) -> bool {
        self.causal
            .edges()
            .iter()
            .any(|&(cause, effect)| self.event_ids[effect] > self.event_ids[cause] + 1)
    }
}

/// Inclusive integer range, serialized as `[min, max]`.
pub type IntRange = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_event_types: usize,
    pub n_events_per_video: IntRange,
    pub frames_per_event: IntRange,
    pub d_v: usize,
    pub feature_noise_sigma: f64,
    pub causal_edge_prob: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_event_types: 8,
            n_events_per_video: (2, 3),
            frames_per_event: (2, 3),
            d_v: 16,
            feature_noise_sigma: 0.1,
            causal_edge_prob: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_event_types == 0 {
            return Err(DataError::Config("n_event_types must be positive".into()));
        }
        if self.n_event_types > EVENT_NAMES.len() {
            return Err(DataError::VocabularyOverflow {
                needed: self.n_event_types,
                available: EVENT_NAMES.len(),
            });
        }
        let (emin, emax) = self.n_events_per_video;
        let (fmin, fmax) = self.frames_per_event;
        if emin == 0 || emin > emax {
            return Err(DataError::Config(format!(
                "n_events_per_video range [{emin}, {emax}] is empty or zero"
            )));
        }
        if fmin == 0 || fmin > fmax {
            return Err(DataError::Config(format!(
                "frames_per_event range [{fmin}, {fmax}] is empty or zero"
            )));
        }
        if emax > self.n_event_types {
            return Err(DataError::Config(format!(
                "up to {emax} events per video need {emax} distinct types, only {} available",
                self.n_event_types
            )));
        }
        if !(0.0..=1.0).contains(&self.causal_edge_prob) {
            return Err(DataError::Config(format!(
                "causal_edge_prob {} outside [0, 1]",
                self.causal_edge_prob
            )));
        }
        if self.feature_noise_sigma < 0.0 {
            return Err(DataError::Config("feature_noise_sigma must be ≥ 0".into()));
        }
        if self.d_v == 0 {
            return Err(DataError::Config("d_v must be positive".into()));
        }
        Ok(())
    }

    /// Longest caption the grammar can emit under this configuration
    /// (including BOS and EOS).
    pub fn max_caption_tokens(&self) -> usize {
        let k = self.n_events_per_video.1;
        let non_adjacent = if k >= 2 { (k - 1) * (k - 2) / 2 } else { 0 };
        2 + 2 * k + k.saturating_sub(1) + 2 * non_adjacent
    }

    /// Largest frame count a sample can have.
    pub fn max_total_frames(&self) -> usize {
        self.n_events_per_video.1 * self.frames_per_event.1
    }
}

/// Abramowitz-Stegun style rational approximation of the standard
/// normal quantile (Acklam's coefficients, |error| < 1.2e-9).
fn normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}

/// The seed-derived generator state: event-type prototypes and the
/// cosine threshold defining the causal relation between types.
pub struct GeneratorTables {
    pub prototypes: Vec<Vec<f64>>,
    pub cosine_threshold: f64,
}

impl GeneratorTables {
    pub fn build(config: &GeneratorConfig) -> Self {
        let mut rng = Rng::stream(config.seed, "prototypes", 0);
        let prototypes: Vec<Vec<f64>> = (0..config.n_event_types)
            .map(|_| (0..config.d_v).map(|_| rng.normal()).collect())
            .collect();
        // cos of two isotropic Gaussian vectors is ≈ N(0, 1/d_v), so
        // the (1 − p) quantile gives a marginal edge rate of p
        let cosine_threshold = if config.causal_edge_prob <= 0.0 {
            f64::INFINITY
        } else if config.causal_edge_prob >= 1.0 {
            f64::NEG_INFINITY
        } else {
            normal_quantile(1.0 - config.causal_edge_prob) / (config.d_v as f64).sqrt()
        };
        Self {
            prototypes,
            cosine_threshold,
        }
    }

    /// Whether ordered event types `(a, b)` are causally linked:
    /// cosine similarity of their prototypes above the threshold.
    pub fn types_causally_linked(&self, a: usize, b: usize) -> bool {
        if a == b {
            return false;
        }
        let pa = &self.prototypes[a];
        let pb = &self.prototypes[b];
        let dot: f64 = pa.iter().zip(pb).map(|(x, y)| x * y).sum();
        let na: f64 = pa.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = pb.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb) > self.cosine_threshold
    }
}

fn generate_sample(
    config: &GeneratorConfig,
    tables: &GeneratorTables,
    vocab: &Vocabulary,
    index: u64,
) -> VideoSample {
    let mut rng = Rng::stream(config.seed, "sample", index);
    let k = rng.range_inclusive(config.n_events_per_video.0, config.n_events_per_video.1);
    let types = rng.sample_distinct(config.n_event_types, k);
    let frames_per: Vec<usize> = (0..k)
        .map(|_| rng.range_inclusive(config.frames_per_event.0, config.frames_per_event.1))
        .collect();

    let mut anchors = Vec::with_capacity(k);
    let mut event_ids = Vec::new();
    let mut offset = 0;
    for (e, &n) in frames_per.iter().enumerate() {
        anchors.push(offset);
        event_ids.extend(std::iter::repeat(e).take(n));
        offset += n;
    }
    let t_total = offset;

    let mut frame_data = Vec::with_capacity(t_total * config.d_v);
    for &e in &event_ids {
        let proto = &tables.prototypes[types[e]];
        for &base in proto {
            frame_data.push(base + config.feature_noise_sigma * rng.normal());
        }
    }
    let frames = Tensor::new(vec![t_total, config.d_v], frame_data).expect("frame shape");

    let causal_pair = |i: usize, j: usize| tables.types_causally_linked(types[i], types[j]);

    let mut annot = CausalAnnotation::empty(t_total);
    for e in 0..k.saturating_sub(1) {
        annot.add_edge(anchors[e], anchors[e + 1]);
    }
    for i in 0..k {
        for j in (i + 1)..k {
            if causal_pair(i, j) {
                annot.add_edge(anchors[i], anchors[j]);
            }
        }
    }

    let name_id = |e: usize| vocab.id(EVENT_NAMES[types[e]]).expect("name in vocab");
    let happens = vocab.id(HAPPENS).expect("happens");
    let then = vocab.id(THEN).expect("then");
    let so = vocab.id(SO).expect("so");
    let because = vocab.id(BECAUSE).expect("because");

    let mut caption = vec![BOS];
    for e in 0..k {
        if e > 0 {
            caption.push(if causal_pair(e - 1, e) { so } else { then });
        }
        caption.push(name_id(e));
        caption.push(happens);
        for i in 0..e.saturating_sub(1) {
            if causal_pair(i, e) {
                caption.push(because);
                caption.push(name_id(i));
            }
        }
    }
    caption.push(EOS);

    VideoSample {
        frames,
        caption,
        causal: annot,
        event_ids,
    }
}

/// Generates `n_samples` videos deterministically from the config seed.
pub fn generate_dataset(
    config: &GeneratorConfig,
    n_samples: usize,
) -> Result<Vec<VideoSample>, DataError> {
    generate_dataset_range(config, 0, n_samples)
}

/// Generates samples `start .. start + n_samples` of the corpus
/// stream. Every sample draws from its own indexed stream, so ranges
/// of the same configuration tile the same corpus: a training file and
/// a held-out file generated with disjoint ranges share prototypes and
/// the causal relation but no samples.
pub fn generate_dataset_range(
    config: &GeneratorConfig,
    start: usize,
    n_samples: usize,
) -> Result<Vec<VideoSample>, DataError> {
    config.validate()?;
    if n_samples == 0 {
        return Err(DataError::Config("n_samples must be at least 1".into()));
    }
    let tables = GeneratorTables::build(config);
    let vocab = dataset_vocabulary();
    Ok((start..start + n_samples)
        .map(|s| generate_sample(config, &tables, &vocab, s as u64))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    frames: Vec<Vec<f64>>,
    caption: Vec<String>,
    causal_edges: Vec<(usize, usize)>,
    event_ids: Vec<usize>,
}

/// Writes samples as UTF-8 JSONL with LF line endings; floats keep
/// full round-trip precision.
pub fn write_dataset(samples: &[VideoSample], path: impl AsRef<Path>) -> Result<(), DataError> {
    let vocab = dataset_vocabulary();
    let mut file = File::create(path)?;
    for sample in samples {
        let line = SampleLine {
            frames: (0..sample.frames.rows())
                .map(|i| sample.frames.row_slice(i).to_vec())
                .collect(),
            caption: sample
                .caption
                .iter()
                .map(|&id| vocab.token(id).unwrap_or("<unk>").to_string())
                .collect(),
            causal_edges: sample.causal.edges(),
            event_ids: sample.event_ids.clone(),
        };
        let json = serde_json::to_string(&line)
            .map_err(|e| DataError::Schema(format!("serialization failed: {e}")))?;
        file.write_all(json.as_bytes())?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSONL dataset, validating structure line by line. Tokens
/// outside the canonical vocabulary map to `<unk>`.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<VideoSample>, DataError> {
    let vocab = dataset_vocabulary();
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut d_v: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SampleLine = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
        let sample = decode_line(parsed, &vocab).map_err(|reason| DataError::Parse {
            line: line_no,
            reason,
        })?;
        match d_v {
            None => d_v = Some(sample.frames.cols()),
            Some(d) if d != sample.frames.cols() => {
                return Err(DataError::Schema(format!(
                    "feature dimension changed from {d} to {} at line {line_no}",
                    sample.frames.cols()
                )));
            }
            _ => {}
        }
        samples.push(sample);
    }
    Ok(samples)
}

fn decode_line(line: SampleLine, vocab: &Vocabulary) -> Result<VideoSample, String> {
    let t = line.frames.len();
    if t == 0 {
        return Err("sample has no frames".into());
    }
    let width = line.frames[0].len();
    if width == 0 || line.frames.iter().any(|r| r.len() != width) {
        return Err("frames must be a non-empty rectangular matrix".into());
    }
    let frames = Tensor::new(vec![t, width], line.frames.into_iter().flatten().collect())
        .map_err(|e| e.to_string())?;

    if line.caption.len() < 2 {
        return Err("caption must contain at least <bos> and <eos>".into());
    }
    let caption: Vec<TokenId> = line.caption.iter().map(|w| vocab.id_or_unk(w)).collect();
    if caption[0] != BOS || *caption.last().unwrap() != EOS {
        return Err("caption must start with <bos> and end with <eos>".into());
    }
    if caption[1..caption.len() - 1]
        .iter()
        .any(|&t| t == BOS || t == EOS || t == PAD)
    {
        return Err("caption contains reserved tokens in its interior".into());
    }

    if line.event_ids.len() != t {
        return Err(format!(
            "event_ids has {} entries for {t} frames",
            line.event_ids.len()
        ));
    }

    let mut annot = CausalAnnotation::empty(t);
    for (from, to) in line.causal_edges {
        if from >= t || to >= t {
            return Err(format!("edge [{from}, {to}] outside {t} frames"));
        }
        if from == to {
            return Err(format!("self-edge [{from}, {to}] is not allowed"));
        }
        annot.add_edge(from, to);
    }

    Ok(VideoSample {
        frames,
        caption,
        causal: annot,
        event_ids: line.event_ids,
    })
}

/// Corpus statistics reported by dataset generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_samples: usize,
    pub vocab_size: usize,
    pub mean_caption_len: f64,
    pub mean_frames: f64,
}

impl DatasetStats {
    pub fn compute(samples: &[VideoSample]) -> Self {
        let n = samples.len().max(1);
        Self {
            n_samples: samples.len(),
            vocab_size: dataset_vocabulary().len(),
            mean_caption_len: samples.iter().map(|s| s.caption.len()).sum::<usize>() as f64
                / n as f64,
            mean_frames: samples.iter().map(|s| s.n_frames()).sum::<usize>() as f64 / n as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::UNK;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            n_event_types: 6,
            n_events_per_video: (2, 3),
            frames_per_event: (1, 2),
            d_v: 4,
            feature_noise_sigma: 0.05,
            causal_edge_prob: 0.5,
            seed: 42,
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let cfg = small_config();
        let a = generate_dataset(&cfg, 20).unwrap();
        let b = generate_dataset(&cfg, 20).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.jsonl");
        let pb = dir.path().join("b.jsonl");
        write_dataset(&a, &pa).unwrap();
        write_dataset(&b, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn zero_causal_prob_two_events_has_then_and_only_chain_edge() {
        let cfg = GeneratorConfig {
            n_events_per_video: (2, 2),
            causal_edge_prob: 0.0,
            ..small_config()
        };
        let vocab = dataset_vocabulary();
        let then = vocab.id(THEN).unwrap();
        let so = vocab.id(SO).unwrap();
        let because = vocab.id(BECAUSE).unwrap();
        for sample in generate_dataset(&cfg, 30).unwrap() {
            assert!(sample.caption.contains(&then));
            assert!(!sample.caption.contains(&so));
            assert!(!sample.caption.contains(&because));
            let edges = sample.causal.edges();
            assert_eq!(edges.len(), 1);
            let (cause, effect) = edges[0];
            assert_eq!(sample.event_ids[cause], 0);
            assert_eq!(sample.event_ids[effect], 1);
            // the chain edge links the first frames of the two events
            assert!(cause < effect);
        }
    }

    #[test]
    fn single_event_sample_is_degenerate() {
        let cfg = GeneratorConfig {
            n_events_per_video: (1, 1),
            ..small_config()
        };
        let vocab = dataset_vocabulary();
        for sample in generate_dataset(&cfg, 10).unwrap() {
            assert!(sample.causal.edges().is_empty());
            // BOS <name> happens EOS
            assert_eq!(sample.caption.len(), 4);
            assert_eq!(sample.caption[0], BOS);
            assert_eq!(sample.caption[2], vocab.id(HAPPENS).unwrap());
            assert_eq!(*sample.caption.last().unwrap(), EOS);
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let cfg = small_config();
        let samples = generate_dataset(&cfg, 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        write_dataset(&samples, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(samples, back);
    }

    #[test]
    fn truncated_file_names_the_offending_line() {
        let cfg = small_config();
        let samples = generate_dataset(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        write_dataset(&samples, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let truncated: String = text[..text.len() / 2].to_string();
        let path2 = dir.path().join("broken.jsonl");
        std::fs::write(&path2, truncated).unwrap();
        let err = read_dataset(&path2).unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn hand_written_fixture_parses_to_expected_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"frames": [[0.5, -1.0], [2.0, 3.5], [0.0, 1.0]],"#,
                r#" "caption": ["<bos>", "fire", "happens", "so", "alarm", "happens", "<eos>"],"#,
                r#" "causal_edges": [[0, 2]], "event_ids": [0, 0, 1]}"#,
                "\n"
            ),
        )
        .unwrap();
        let samples = read_dataset(&path).unwrap();
        assert_eq!(samples.len(), 1);
        let s = &samples[0];
        let vocab = dataset_vocabulary();
        assert_eq!(s.frames.shape(), &[3, 2]);
        assert_eq!(s.frames.at(1, 1), 3.5);
        assert_eq!(
            s.caption,
            vec![
                BOS,
                vocab.id("fire").unwrap(),
                vocab.id(HAPPENS).unwrap(),
                vocab.id(SO).unwrap(),
                vocab.id("alarm").unwrap(),
                vocab.id(HAPPENS).unwrap(),
                EOS
            ]
        );
        assert_eq!(s.causal.edges(), vec![(0, 2)]);
        assert_eq!(s.event_ids, vec![0, 0, 1]);
    }

    #[test]
    fn feature_dimension_mismatch_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixed.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"frames": [[1.0, 2.0]], "caption": ["<bos>", "fire", "happens", "<eos>"], "causal_edges": [], "event_ids": [0]}"#,
                "\n",
                r#"{"frames": [[1.0, 2.0, 3.0]], "caption": ["<bos>", "fire", "happens", "<eos>"], "causal_edges": [], "event_ids": [0]}"#,
                "\n"
            ),
        )
        .unwrap();
        assert!(matches!(read_dataset(&path), Err(DataError::Schema(_))));
    }

    #[test]
    fn event_adjacency_is_acyclic_and_forward_pointing() {
        let cfg = GeneratorConfig {
            causal_edge_prob: 1.0,
            ..small_config()
        };
        for sample in generate_dataset(&cfg, 40).unwrap() {
            for (cause, effect) in sample.causal.edges() {
                assert!(
                    sample.event_ids[cause] < sample.event_ids[effect],
                    "edge must point from an earlier event to a later one"
                );
            }
        }
    }

    #[test]
    fn no_unk_in_generated_captions_and_zero_sigma_repeats_prototypes() {
        let cfg = GeneratorConfig {
            feature_noise_sigma: 0.0,
            ..small_config()
        };
        let samples = generate_dataset(&cfg, 40).unwrap();
        for s in &samples {
            assert!(!s.caption.contains(&UNK));
        }
        // collect one frame row per event type across the corpus and
        // check later occurrences are identical
        let mut seen: std::collections::HashMap<String, Vec<f64>> = Default::default();
        let vocab = dataset_vocabulary();
        for s in &samples {
            // event e has type given by its clause-head name
            let heads: Vec<&str> = s
                .caption
                .windows(2)
                .filter(|w| vocab.token(w[1]) == Some(HAPPENS))
                .map(|w| vocab.token(w[0]).unwrap())
                .collect();
            for (frame, &event) in s.event_ids.iter().enumerate() {
                let name = heads[event].to_string();
                let row = s.frames.row_slice(frame).to_vec();
                match seen.get(&name) {
                    Some(existing) => assert_eq!(existing, &row, "type {name} drifted"),
                    None => {
                        seen.insert(name, row);
                    }
                }
            }
        }
        assert!(seen.len() > 1);
    }

    #[test]
    fn corpus_statistics_reproduce_across_runs() {
        let cfg = small_config();
        let a = DatasetStats::compute(&generate_dataset(&cfg, 50).unwrap());
        let b = DatasetStats::compute(&generate_dataset(&cfg, 50).unwrap());
        assert_eq!(a, b);
        assert!(a.mean_caption_len >= 4.0);
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let mut cfg = small_config();
        cfg.n_event_types = 100;
        assert!(matches!(
            cfg.validate(),
            Err(DataError::VocabularyOverflow { .. })
        ));
        let mut cfg = small_config();
        cfg.n_events_per_video = (3, 2);
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.causal_edge_prob = 1.5;
        assert!(cfg.validate().is_err());
        let cfg = small_config();
        assert!(generate_dataset(&cfg, 0).is_err());
    }
}
