//! Command-line workbench for the causal-temporal captioning model:
//! dataset generation, staged training, pipelines, evaluation, single
//! caption inspection, and the gradient-check suite.
//!
//! Exit codes: 0 success, 1 runtime/IO failure, 2 configuration error.
//! Diagnostics (including the effective-config echo) go to stderr;
//! data and reports go to stdout or the requested output files.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{AppConfig, ConfigError};
use ctrm_core::data::{
    dataset_vocabulary, generate_dataset_range, read_dataset, write_dataset, DataError,
    DatasetStats,
};
use ctrm_core::decoder::{sequence_log_prob, ModelScorer};
use ctrm_core::metrics::{load_eval_corpus, score_corpus};
use ctrm_core::model::{encode, full_gradcheck_suite};
use ctrm_core::training::{
    evaluate, run_pipeline, run_stage, Checkpoint, DecodingStrategy, TrainError,
};

#[derive(Parser)]
#[command(
    name = "ctrm",
    about = "Causal-temporal video captioning workbench",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override config keys, e.g. --set seed=7 --set model.d_model=16
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file and print corpus statistics
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output JSONL path
        #[arg(long)]
        out: PathBuf,
        /// Skip this many samples of the corpus stream first (carve
        /// held-out files out of the same corpus as a training file)
        #[arg(long, default_value_t = 0)]
        skip: usize,
    },
    /// Train a single stage and write the final checkpoint
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training dataset (JSONL)
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to start from
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Run the staged pipeline with checkpoint hand-off
    Pipeline {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training dataset (JSONL)
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset for the final evaluation
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Directory for per-stage checkpoints
        #[arg(long)]
        out_dir: PathBuf,
        /// Resume from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write the consolidated report to this file
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset, or score a hypothesis file
    Eval {
        /// Checkpoint to evaluate
        #[arg(long, required_unless_present = "corpus")]
        ckpt: Option<PathBuf>,
        /// Dataset to decode and score against
        #[arg(long, required_unless_present = "corpus")]
        data: Option<PathBuf>,
        /// Score a JSONL corpus of {"id", "hypothesis", "references"} directly
        #[arg(long, conflicts_with_all = ["ckpt", "data"])]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = DecodingArg::Greedy)]
        decoding: DecodingArg,
        /// Also write the report to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode one sample and print the caption with per-token log-probs
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample index within the dataset
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value_t = DecodingArg::Greedy)]
        decoding: DecodingArg,
    },
    /// Run the finite-difference gradient suite and report per-op errors
    GradCheck {
        /// Seed for the random check points
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodingArg {
    Greedy,
    Beam,
}

impl From<DecodingArg> for DecodingStrategy {
    fn from(d: DecodingArg) -> Self {
        match d {
            DecodingArg::Greedy => DecodingStrategy::Greedy,
            DecodingArg::Beam => DecodingStrategy::Beam,
        }
    }
}

/// Failures carrying their process exit code.
enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match &e {
            DataError::Config(_) | DataError::VocabularyOverflow { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Config(_) | TrainError::StageOrder(_) | TrainError::VocabMismatch => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("io error: {e}"))
    }
}

fn echo_effective_config(cfg: &AppConfig) {
    let pretty = serde_json::to_string_pretty(&cfg.effective)
        .unwrap_or_else(|_| "<unprintable>".to_string());
    eprintln!("effective config: {pretty}");
}

fn print_or_write(json: &serde_json::Value, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(json)
        .map_err(|e| CliError::Runtime(format!("report serialization: {e}")))?;
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(value).map_err(|e| CliError::Runtime(format!("serialization: {e}")))
}

fn cmd_gen_data(config: &ConfigArgs, out: &Path, skip: usize) -> Result<(), CliError> {
    let cfg = AppConfig::load(config.config.as_deref(), &config.overrides)?;
    echo_effective_config(&cfg);
    if cfg.n_samples == 0 {
        return Err(CliError::Config(
            "n_samples must be at least 1 (field: n_samples)".into(),
        ));
    }
    eprintln!(
        "sample range: {skip}..{} of the seed-{} corpus stream",
        skip + cfg.n_samples,
        cfg.generator.seed
    );
    let samples = generate_dataset_range(&cfg.generator, skip, cfg.n_samples)?;
    write_dataset(&samples, out)?;
    let stats = DatasetStats::compute(&samples);
    print_or_write(&to_json(&stats)?, None)
}

fn cmd_train(
    config: &ConfigArgs,
    data: &Path,
    out: &Path,
    init: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = AppConfig::load(config.config.as_deref(), &config.overrides)?;
    echo_effective_config(&cfg);
    let samples = read_dataset(data)?;
    let vocab = dataset_vocabulary();
    let model_cfg = cfg.model.to_model_config();
    let init_ckpt = init.map(Checkpoint::load).transpose()?;
    let (ckpt, report) = run_stage(&cfg.train, &model_cfg, &vocab, &samples, init_ckpt.as_ref())?;
    ckpt.save(out)?;
    print_or_write(&to_json(&report)?, None)
}

fn cmd_pipeline(
    config: &ConfigArgs,
    data: &Path,
    eval_data: Option<&Path>,
    out_dir: &Path,
    resume: Option<&Path>,
    report_path: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = AppConfig::load(config.config.as_deref(), &config.overrides)?;
    echo_effective_config(&cfg);
    let stages = cfg.stages.clone().ok_or_else(|| {
        CliError::Config("pipeline requires a `stages` array in the config".into())
    })?;
    let samples = read_dataset(data)?;
    let eval_samples = eval_data.map(read_dataset).transpose()?;
    let vocab = dataset_vocabulary();
    let model_cfg = cfg.model.to_model_config();
    std::fs::create_dir_all(out_dir)?;
    let init = resume.map(Checkpoint::load).transpose()?;

    let (final_ckpt, report) = run_pipeline(
        &stages,
        &model_cfg,
        &vocab,
        &samples,
        eval_samples.as_deref(),
        init,
        |i, ckpt| {
            let stage_name = format!("{:?}", stages[i].stage).to_lowercase();
            ckpt.save(out_dir.join(format!("stage_{i}_{stage_name}.ckpt")))?;
            Ok(())
        },
    )?;
    final_ckpt.save(out_dir.join("final.ckpt"))?;
    print_or_write(&to_json(&report)?, report_path)
}

fn cmd_eval(
    ckpt: Option<&Path>,
    data: Option<&Path>,
    corpus: Option<&Path>,
    decoding: DecodingArg,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if let Some(corpus_path) = corpus {
        let corpus = load_eval_corpus(corpus_path).map_err(|e| CliError::Runtime(e.to_string()))?;
        let report = score_corpus(&corpus).map_err(|e| CliError::Runtime(e.to_string()))?;
        return print_or_write(&to_json(&report)?, out);
    }
    let ckpt = Checkpoint::load(ckpt.expect("clap enforces ckpt"))?;
    let samples = read_dataset(data.expect("clap enforces data"))?;
    let vocab = dataset_vocabulary();
    let report = evaluate(&ckpt, &samples, &vocab, decoding.into())?;
    print_or_write(&to_json(&report)?, out)
}

fn cmd_caption(
    ckpt_path: &Path,
    data: &Path,
    index: usize,
    decoding: DecodingArg,
) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let samples = read_dataset(data)?;
    let sample = samples.get(index).ok_or_else(|| {
        CliError::Config(format!(
            "index {index} out of range for dataset with {} samples",
            samples.len()
        ))
    })?;
    let vocab = ckpt.vocabulary()?;
    let (_, h_t) = encode(
        &sample.frames,
        &ckpt.params,
        &ckpt.model_config,
        &ckpt.ablation,
    )
    .map_err(TrainError::from)?;
    let scorer = ModelScorer {
        h_t: &h_t,
        params: &ckpt.params,
        config: &ckpt.model_config.decoder,
    };
    let max_new = ckpt.model_config.decoder.max_caption_len;
    let tokens = match decoding {
        DecodingArg::Greedy => {
            ctrm_core::decoder::greedy_decode_with(&scorer, max_new).map_err(TrainError::from)?
        }
        DecodingArg::Beam => ctrm_core::decoder::beam_decode_with(
            &scorer,
            ckpt.model_config.decoder.beam_width,
            max_new,
        )
        .map_err(TrainError::from)?,
    };
    let (total, steps) = sequence_log_prob(&scorer, &tokens).map_err(TrainError::from)?;
    let words: Vec<&str> = tokens.iter().filter_map(|&t| vocab.token(t)).collect();
    let report = serde_json::json!({
        "index": index,
        "caption": vocab.detokenize(&tokens),
        "tokens": words,
        "token_ids": tokens,
        "step_log_probs": steps,
        "total_log_prob": total,
        "normalized_log_prob": total / (tokens.len() - 1).max(1) as f64,
    });
    print_or_write(&report, None)
}

fn cmd_grad_check(seed: u64) -> Result<(), CliError> {
    let suite = full_gradcheck_suite();
    let outcomes = ctrm_core::gradcheck::run_cases(&suite, seed, None)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut all_passed = true;
    println!("gradient check (seed {seed}, h = 1e-5, tolerance = 1e-4)");
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!(
            "  {status}  {:<28} max rel err {:.3e}",
            o.name, o.max_rel_err
        );
        all_passed &= o.passed;
    }
    let worst = outcomes
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("non-empty suite");
    println!(
        "{}: worst {} at {:.3e}",
        if all_passed {
            "ALL PASS"
        } else {
            "FAILURES PRESENT"
        },
        worst.name,
        worst.max_rel_err
    );
    if all_passed {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData { config, out, skip } => cmd_gen_data(config, out, *skip),
        Command::Train {
            config,
            data,
            out,
            init,
        } => cmd_train(config, data, out, init.as_deref()),
        Command::Pipeline {
            config,
            data,
            eval_data,
            out_dir,
            resume,
            report,
        } => cmd_pipeline(
            config,
            data,
            eval_data.as_deref(),
            out_dir,
            resume.as_deref(),
            report.as_deref(),
        ),
        Command::Eval {
            ckpt,
            data,
            corpus,
            decoding,
            out,
        } => cmd_eval(
            ckpt.as_deref(),
            data.as_deref(),
            corpus.as_deref(),
            *decoding,
            out.as_deref(),
        ),
        Command::Caption {
            ckpt,
            data,
            index,
            decoding,
        } => cmd_caption(ckpt, data, *index, *decoding),
        Command::GradCheck { seed } => cmd_grad_check(*seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
