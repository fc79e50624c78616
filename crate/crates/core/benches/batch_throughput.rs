//! Compares the rayon-parallel batch paths against their sequential
//! twins. The reductions are order-fixed, so both paths produce
//! bit-identical results; only throughput differs.
//!
//! Run with `cargo bench -p ctrm-core`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use ctrm_core::ctrm::{CausalMaskMode, CtrmConfig};
use ctrm_core::data::{dataset_vocabulary, generate_dataset, GeneratorConfig, VideoSample};
use ctrm_core::decoder::{greedy_decode_with, DecoderConfig, ModelScorer};
use ctrm_core::graph::{GradientMap, Tape};
use ctrm_core::model::{build_caption_forward, encode, AblationSet, ModelConfig};
use ctrm_core::parallel::{map_samples, map_samples_seq};
use ctrm_core::params::{ModelParams, ParamBinding};
use ctrm_core::training::{decode_corpus, DecodingStrategy};

fn bench_model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_v: 16,
        vocab_size,
        ctrm: CtrmConfig {
            d_model: 32,
            n_heads: 4,
            n_trl_layers: 1,
            ffn_dim: 64,
            causal_mask_mode: CausalMaskMode::LowerTriangular,
            max_frames: 12,
        },
        decoder: DecoderConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            max_caption_len: 16,
            beam_width: 3,
        },
    }
}

fn make_batch(n: usize) -> (Vec<VideoSample>, ModelConfig, ModelParams) {
    let gen = GeneratorConfig {
        n_events_per_video: (2, 3),
        frames_per_event: (2, 3),
        seed: 7,
        ..GeneratorConfig::default()
    };
    let data = generate_dataset(&gen, n).unwrap();
    let cfg = bench_model(dataset_vocabulary().len());
    let params = cfg.init_params(0);
    (data, cfg, params)
}

fn sample_grads(
    sample: &VideoSample,
    cfg: &ModelConfig,
    params: &ModelParams,
) -> (f64, GradientMap) {
    let tape = Tape::new();
    let binding = ParamBinding::bind(&tape, params);
    let frames = tape.constant(sample.frames.clone());
    let fwd = build_caption_forward(
        &tape,
        &binding,
        cfg,
        &AblationSet::none(),
        frames,
        &sample.caption,
        &cfg.frame_positions(),
        &cfg.token_positions(),
    )
    .unwrap();
    let grads = tape.gradient(fwd.caption_loss).unwrap();
    (tape.scalar_of(fwd.caption_loss), grads)
}

fn bench_batch_gradients(c: &mut Criterion) {
    let (data, cfg, params) = make_batch(32);
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    group.throughput(Throughput::Elements(data.len() as u64));
    group.bench_with_input(
        BenchmarkId::new("parallel", data.len()),
        &data,
        |b, data| b.iter(|| map_samples(data, |s| sample_grads(s, &cfg, &params))),
    );
    group.bench_with_input(
        BenchmarkId::new("sequential", data.len()),
        &data,
        |b, data| b.iter(|| map_samples_seq(data, |s| sample_grads(s, &cfg, &params))),
    );
    group.finish();
}

fn bench_corpus_decode(c: &mut Criterion) {
    let (data, cfg, params) = make_batch(16);
    let mut group = c.benchmark_group("corpus_decode");
    group.sample_size(10);
    group.throughput(Throughput::Elements(data.len() as u64));
    group.bench_function("parallel", |b| {
        b.iter(|| {
            decode_corpus(
                &data,
                &cfg,
                &params,
                &AblationSet::none(),
                DecodingStrategy::Greedy,
            )
            .unwrap()
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            map_samples_seq(&data, |s| {
                let (_, h_t) = encode(&s.frames, &params, &cfg, &AblationSet::none()).unwrap();
                let scorer = ModelScorer {
                    h_t: &h_t,
                    params: &params,
                    config: &cfg.decoder,
                };
                greedy_decode_with(&scorer, cfg.decoder.max_caption_len).unwrap()
            })
        })
    });
    group.finish();
}

criterion_group!(benches, bench_batch_gradients, bench_corpus_decode);
criterion_main!(benches);
