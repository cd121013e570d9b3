//! Subcommands of the `alignflow` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use alignflow_core::alignment::{mas_search, LogProbGrid};
use alignflow_core::flows::{conv_receptive_radius, stack_attention};
use alignflow_core::gradsuite;
use alignflow_core::harness::{
    duration_batches_from, eval_alignment, generate_corpus, train_duration_phase, train_toy,
    ExperimentConfig, Instance, ToyModel,
};
use alignflow_core::numerics::Rng;
use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::{checkpoint, io, pgm};

#[derive(Debug, Parser)]
#[command(
    name = "alignflow",
    version,
    about = "Monotonic alignment search, flows and duration models on toy corpora"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a toy corpus, train both phases and write every artifact to a directory.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replaces the seed in the configuration file.
        #[arg(long)]
        seed: u64,
    },
    /// Score noise-free alignments of a checkpoint against a corpus CSV.
    EvalAlign {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Monotonic alignment search on a token-by-frame log-probability grid.
    Mas {
        /// Headerless CSV, one row per token, one column per frame.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        noise_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Durations CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the duration networks alone on the durations stored in a corpus CSV.
    TrainDuration {
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        corpus: PathBuf,
        /// Per-step loss CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Take the encoder from this checkpoint instead of a fresh one.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Model and optimizer settings when no checkpoint is given.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of every op and module.
    CheckGrad {
        #[arg(long, default_value_t = gradsuite::SEEDS)]
        seeds: u64,
        /// Optional CSV copy of the report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write every flow layer's attention map as CSV and PGM.
    DumpAttention {
        #[arg(long)]
        ckpt: PathBuf,
        /// Headerless CSV of frames, one row per channel, one column per frame.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        speaker: usize,
    },
}

/// Runs one subcommand, printing its summary to `stdout`. Returns the
/// process exit code.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::TrainToy { config, out, seed } => train_toy_cmd(&config, &out, seed, stdout),
        Command::EvalAlign { ckpt, corpus } => {
            let (_, model) = checkpoint::load(&ckpt)?;
            let instances = io::read_instances(&corpus)?;
            let score = eval_alignment(&model, &instances)?;
            writeln!(stdout, "exact_match,mae,tokens")?;
            writeln!(
                stdout,
                "{},{},{}",
                score.exact_match, score.mae, score.tokens
            )?;
            Ok(0)
        }
        Command::Mas {
            grid,
            noise_scale,
            seed,
            out,
        } => {
            let grid = LogProbGrid::new(io::read_matrix(&grid)?)?;
            let (alignment, best) = mas_search(&grid, noise_scale, &mut Rng::new(seed))?;
            io::write_durations(&out, alignment.durations())?;
            writeln!(stdout, "{best:?}")?;
            Ok(0)
        }
        Command::TrainDuration {
            steps,
            seed,
            corpus,
            out,
            ckpt,
            config,
        } => train_duration_cmd(
            steps,
            seed,
            &corpus,
            &out,
            ckpt.as_deref(),
            config.as_deref(),
            stdout,
        ),
        Command::CheckGrad { seeds, out } => {
            let reports = gradsuite::run_all(seeds)?;
            let mut text = String::from("check,worst_error,status\n");
            for r in &reports {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                text.push_str(&format!("{},{:e},{status}\n", r.name, r.worst));
            }
            stdout.write_all(text.as_bytes())?;
            if let Some(path) = out {
                fs::write(path, &text)?;
            }
            Ok(if reports.iter().all(|r| r.passed()) {
                0
            } else {
                1
            })
        }
        Command::DumpAttention {
            ckpt,
            input,
            out,
            speaker,
        } => {
            let (_, model) = checkpoint::load(&ckpt)?;
            let frames = io::read_matrix(&input)?;
            let condition = if model.flows_conditioned() {
                model.speaker_value(speaker)?
            } else {
                None
            };
            let maps = stack_attention(&model.flows, &model.store, &frames, condition.as_ref())?;
            fs::create_dir_all(&out)?;
            let mut written = 0;
            for (k, (map, layer)) in maps.iter().zip(model.flows.layers()).enumerate() {
                let Some(map) = map else { continue };
                io::write_matrix(&out.join(format!("layer{k}.csv")), map)?;
                fs::write(
                    out.join(format!("layer{k}.pgm")),
                    pgm::render(map, conv_receptive_radius(layer)),
                )?;
                written += 1;
            }
            writeln!(
                stdout,
                "{written} attention maps written to {}",
                out.display()
            )?;
            Ok(0)
        }
    }
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::from_text(&fs::read_to_string(path)?)?)
}

fn train_toy_cmd(config: &Path, out: &Path, seed: u64, stdout: &mut dyn Write) -> Result<i32> {
    let mut config = read_config(config)?;
    config.train.seed = seed;
    config.validate()?;
    let corpus = generate_corpus(&config.corpus, &Rng::new(seed))?;
    let mut model = ToyModel::new(&config)?;
    let history = train_toy(&mut model, &config.train, &corpus)?;
    let score = eval_alignment(&model, &corpus.held_out)?;

    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), config.to_text())?;
    io::write_instances(&out.join("corpus.csv"), &corpus.instances)?;
    io::write_instances(&out.join("heldout.csv"), &corpus.held_out)?;
    io::write_main_metrics(&out.join("main.csv"), &history.main)?;
    io::write_duration_metrics(&out.join("duration.csv"), &history.duration)?;
    checkpoint::save(&out.join("model.ckpt"), &config, &model)?;
    let eval = format!(
        "exact_match,mae,tokens\n{},{},{}\n",
        score.exact_match, score.mae, score.tokens
    );
    fs::write(out.join("eval.csv"), &eval)?;
    stdout.write_all(eval.as_bytes())?;
    Ok(0)
}

/// Without a checkpoint the encoder is freshly initialized; it stays frozen
/// either way, and the targets are the durations stored in the corpus.
fn train_duration_cmd(
    steps: usize,
    seed: u64,
    corpus: &Path,
    out: &Path,
    ckpt: Option<&Path>,
    config: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<i32> {
    let instances = io::read_instances(corpus)?;
    let (mut config, mut model) = match ckpt {
        Some(path) => {
            if config.is_some() {
                return Err(Error::Format(
                    "--config and --ckpt are mutually exclusive".into(),
                ));
            }
            checkpoint::load(path)?
        }
        None => {
            let mut c = match config {
                Some(p) => read_config(p)?,
                None => ExperimentConfig::default(),
            };
            fit_corpus(&mut c, &instances);
            c.train.seed = seed;
            let m = ToyModel::new(&c)?;
            (c, m)
        }
    };
    if let Some(bad) = instances.iter().find(|i| {
        i.tokens.iter().any(|t| *t >= config.corpus.vocab) || i.speaker >= config.corpus.speakers
    }) {
        return Err(Error::Format(format!(
            "corpus instance with tokens {:?}, speaker {} lies outside the model",
            bad.tokens, bad.speaker
        )));
    }
    config.train.seed = seed;
    config.train.steps_duration = steps;
    config.train.steps_main = config.train.steps_main.max(steps);
    config.train.validate()?;
    let targets: Vec<Vec<usize>> = instances.iter().map(|i| i.durations.clone()).collect();
    let batches = duration_batches_from(&model, &instances, &targets, config.train.batch_size)?;
    let records = train_duration_phase(&mut model, &config.train, &batches)?;
    io::write_duration_metrics(out, &records)?;
    if let Some(last) = records.last() {
        writeln!(
            stdout,
            "step {}: loss_d {} loss_g_adv {} loss_g_mse {}",
            last.step, last.loss_d, last.loss_g_adv, last.loss_g_mse
        )?;
    }
    Ok(0)
}

/// Sizes vocabulary, speakers and channels to cover `instances`. Channels
/// only shape the unused flows, so an odd count is rounded up.
fn fit_corpus(config: &mut ExperimentConfig, instances: &[Instance]) {
    let c = &mut config.corpus;
    let vocab = instances
        .iter()
        .flat_map(|i| i.tokens.iter())
        .max()
        .map_or(0, |t| t + 1);
    let speakers = instances
        .iter()
        .map(|i| i.speaker)
        .max()
        .map_or(0, |s| s + 1);
    c.vocab = c.vocab.max(vocab);
    c.speakers = c.speakers.max(speakers);
    let channels = instances.first().map_or(c.channels, |i| i.frames.rows());
    c.channels = channels + channels % 2;
    c.laws.clear();
}
