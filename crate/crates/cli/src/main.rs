//! Command-line front end. Exit codes are a scripting contract:
//! 0 success, 1 usage error, 2 data/configuration error, 3 training
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use persim_cli::experiment::{
    build_experiment_corpus, default_experiment_toml, run_experiment, train_base_model,
    ExperimentConfig, StageError,
};
use persim_cli::reports;
use persim_core::checkpoints::{load_checkpoint, save_checkpoint, CheckpointMeta};
use persim_core::error::Error;
use persim_core::evaluation::{atsr, corpus_wer};
use persim_core::grammar::Grammar;
use persim_core::synthcorpus::{Corpus, Split};
use persim_core::training::{build_seed_model, consecutive_personalize, server_personalize};

#[derive(Parser)]
#[command(
    name = "persim",
    about = "Desk-scale simulator of on-device ASR personalization for disordered speech",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus utilities.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Model training stages.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Per-speaker personalization recipes.
    #[command(subcommand)]
    Personalize(PersonalizeCmd),
    /// Score hypothesis transcripts against references.
    Eval(EvalArgs),
    /// Re-emit the report bundle from a saved results file.
    Report(ReportArgs),
    /// Run the full experiment pipeline.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Build the synthetic corpus and write its manifest.
    Build(CorpusBuildArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        match &self.config {
            Some(path) => ExperimentConfig::load(path),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Args)]
struct CorpusBuildArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Manifest output path.
    #[arg(long, default_value = "manifest.tsv")]
    output: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Train the speaker-independent base model on the TYPICAL pool.
    Base(TrainBaseArgs),
    /// Fine-tune a leave-one-out seed model for one speaker.
    Seed(TrainSeedArgs),
}

#[derive(Args)]
struct TrainBaseArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Checkpoint output path.
    #[arg(long, default_value = "base.ckpt")]
    output: PathBuf,
}

#[derive(Args)]
struct TrainSeedArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Base-model checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// Speaker to leave out (the personalization target).
    #[arg(long)]
    speaker: String,
    /// Checkpoint output path.
    #[arg(long, default_value = "seed.ckpt")]
    output: PathBuf,
}

#[derive(Subcommand)]
enum PersonalizeCmd {
    /// Server-side fine-tuning with dev-WER early stopping.
    Server(PersonalizeServerArgs),
    /// On-device consecutive training rounds.
    Ondevice(PersonalizeOndeviceArgs),
}

#[derive(Args)]
struct PersonalizeServerArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Seed-model checkpoint to start from.
    #[arg(long)]
    seed_model: PathBuf,
    /// Target speaker id.
    #[arg(long)]
    speaker: String,
    /// Train on the 50-utterance subsample instead of the full split.
    #[arg(long)]
    subsample: bool,
    /// Checkpoint output path.
    #[arg(long, default_value = "personalized.ckpt")]
    output: PathBuf,
}

#[derive(Args)]
struct PersonalizeOndeviceArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Seed-model checkpoint to start from.
    #[arg(long)]
    seed_model: PathBuf,
    /// Target speaker id.
    #[arg(long)]
    speaker: String,
    /// Number of consecutive training rounds.
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    /// Utterances recorded per round.
    #[arg(long, short = 'n', default_value_t = 5)]
    n: usize,
    /// Epochs per round.
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Directory for the final and per-round checkpoints.
    #[arg(long, default_value = "ondevice")]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Metric to compute.
    #[arg(long, value_parser = ["wer", "atsr"])]
    metric: String,
    /// Hypothesis transcripts, one per line.
    #[arg(long)]
    hyp: PathBuf,
    /// Reference transcripts, one per line.
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// results.toml from a finished run.
    #[arg(long)]
    results: PathBuf,
    /// Where to write the report files (defaults to the results file's
    /// directory).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Also emit the SVG chart.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Override the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the default experiment config as TOML and exit.
    #[arg(long)]
    write_default_config: bool,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::NonFinite(_) | Error::StreamExhausted { .. } => 3,
        _ => 2,
    }
}

fn load_corpus_for(config: &ExperimentConfig) -> Result<Corpus, Error> {
    build_experiment_corpus(config, &Grammar::default_ha())
}

fn read_lines(path: &Path) -> Result<Vec<String>, Error> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(|l| l.to_string())
        .collect())
}

fn cmd_corpus_build(args: CorpusBuildArgs) -> Result<(), Error> {
    let mut config = args.config.load()?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let corpus = load_corpus_for(&config)?;
    std::fs::write(&args.output, corpus.manifest_tsv())?;
    println!(
        "wrote {} ({} speakers, {} utterances, digest {:016x})",
        args.output.display(),
        corpus.speakers.len(),
        corpus.utterances.len(),
        corpus.digest()
    );
    Ok(())
}

fn cmd_train_base(args: TrainBaseArgs) -> Result<(), Error> {
    let config = args.config.load()?;
    config.validate()?;
    let corpus = load_corpus_for(&config)?;
    let (run, pretrain_losses) = train_base_model(&config, &corpus)?;
    save_checkpoint(
        &args.output,
        &run.model,
        None,
        &CheckpointMeta {
            recipe: "base".into(),
            round: None,
        },
    )?;
    println!(
        "wrote {} ({} pretrain epochs, best epoch {}, dev WER {:.2})",
        args.output.display(),
        pretrain_losses.len(),
        run.best_epoch,
        run.best_dev_wer
    );
    Ok(())
}

fn cmd_train_seed(args: TrainSeedArgs) -> Result<(), Error> {
    let config = args.config.load()?;
    config.validate()?;
    let corpus = load_corpus_for(&config)?;
    let (base, _, _) = load_checkpoint(&args.base)?;
    let mut seed_cfg = config.seed_build.server_config()?;
    seed_cfg.seed = config.seed;
    let run = build_seed_model(&base, &corpus, &args.speaker, &seed_cfg)?;
    save_checkpoint(
        &args.output,
        &run.model,
        None,
        &CheckpointMeta {
            recipe: "seed-build".into(),
            round: None,
        },
    )?;
    println!(
        "wrote {} (left out {}, best epoch {}, dev WER {:.2})",
        args.output.display(),
        args.speaker,
        run.best_epoch,
        run.best_dev_wer
    );
    Ok(())
}

fn cmd_personalize_server(args: PersonalizeServerArgs) -> Result<(), Error> {
    let config = args.config.load()?;
    config.validate()?;
    let corpus = load_corpus_for(&config)?;
    let (seed_model, _, _) = load_checkpoint(&args.seed_model)?;
    let train = if args.subsample {
        corpus.subsample(&args.speaker)?
    } else {
        corpus.utts(&args.speaker, Split::Train)
    };
    if train.is_empty() {
        return Err(Error::UnknownSpeaker(args.speaker.clone()));
    }
    let dev = corpus.utts(&args.speaker, Split::Dev);
    let mut cfg = config.server.server_config()?;
    cfg.seed = config.seed;
    let run = server_personalize(&seed_model, &train, &dev, &cfg)?;
    save_checkpoint(
        &args.output,
        &run.model,
        None,
        &CheckpointMeta {
            recipe: if args.subsample { "server-50".into() } else { "server-all".into() },
            round: None,
        },
    )?;
    println!(
        "wrote {} ({} train utterances, best epoch {}, dev WER {:.2})",
        args.output.display(),
        train.len(),
        run.best_epoch,
        run.best_dev_wer
    );
    Ok(())
}

fn cmd_personalize_ondevice(args: PersonalizeOndeviceArgs) -> Result<(), Error> {
    let config = args.config.load()?;
    config.validate()?;
    let corpus = load_corpus_for(&config)?;
    let (seed_model, _, _) = load_checkpoint(&args.seed_model)?;
    let subsample = corpus.subsample(&args.speaker)?;
    let mut cfg = config.ondevice.round_config()?;
    cfg.utterances_per_round = args.n;
    cfg.epochs_per_round = args.epochs;
    cfg.learning_rate = args.lr;
    cfg.validate()?;
    std::fs::create_dir_all(&args.output)?;
    let stream = subsample.iter().map(|u| (*u).clone());
    let run = consecutive_personalize(&seed_model, stream, args.rounds, &cfg, Some(&args.output))?;
    let final_path = args.output.join("final.ckpt");
    save_checkpoint(
        &final_path,
        &run.model,
        None,
        &CheckpointMeta {
            recipe: "ondevice-consecutive".into(),
            round: Some(args.rounds as u64),
        },
    )?;
    println!(
        "wrote {} ({} rounds, {} utterances consumed, peak buffer {})",
        final_path.display(),
        args.rounds,
        run.utterances_consumed,
        run.max_buffer_len
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let hyps = read_lines(&args.hyp)?;
    let refs = read_lines(&args.reference)?;
    let value = match args.metric.as_str() {
        "wer" => corpus_wer(&refs, &hyps)?.wer,
        "atsr" => atsr(&hyps, &refs, &Grammar::default_ha())?,
        other => return Err(Error::Config(format!("unknown metric {other}"))),
    };
    println!("{value:.1}");
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Error> {
    let result = reports::load_results(&args.results)?;
    let out = match args.output_dir {
        Some(dir) => dir,
        None => args
            .results
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&out)?;
    reports::emit_all(&result, &out, args.svg)?;
    println!("wrote report bundle to {}", out.display());
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), StageError> {
    if args.write_default_config {
        print!("{}", default_experiment_toml());
        return Ok(());
    }
    let mut config = args.config.load().map_err(|source| StageError {
        stage: "setup",
        source,
    })?;
    if let Some(dir) = args.output_dir {
        config.output_dir = dir;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let result = run_experiment(&config)?;
    println!(
        "experiment complete: {} speakers personalized, reports in {}",
        result.outcomes.len(),
        config.output_dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    // Clap's default error exit code is 2; the scripting contract reserves
    // 2 for data errors, so usage problems are remapped to 1.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };

    let outcome: Result<(), (String, u8)> = match cli.command {
        Command::Corpus(CorpusCmd::Build(args)) => {
            cmd_corpus_build(args).map_err(|e| (e.to_string(), exit_code_for(&e)))
        }
        Command::Train(TrainCmd::Base(args)) => {
            cmd_train_base(args).map_err(|e| (e.to_string(), exit_code_for(&e)))
        }
        Command::Train(TrainCmd::Seed(args)) => {
            cmd_train_seed(args).map_err(|e| (e.to_string(), exit_code_for(&e)))
        }
        Command::Personalize(PersonalizeCmd::Server(args)) => {
            cmd_personalize_server(args).map_err(|e| (e.to_string(), exit_code_for(&e)))
        }
        Command::Personalize(PersonalizeCmd::Ondevice(args)) => {
            cmd_personalize_ondevice(args).map_err(|e| (e.to_string(), exit_code_for(&e)))
        }
        Command::Eval(args) => cmd_eval(args).map_err(|e| (e.to_string(), exit_code_for(&e))),
        Command::Report(args) => cmd_report(args).map_err(|e| (e.to_string(), exit_code_for(&e))),
        Command::Run(args) => {
            cmd_run(args).map_err(|e| (e.to_string(), exit_code_for(&e.source)))
        }
    };

    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err((msg, code)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
