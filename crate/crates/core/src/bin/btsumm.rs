use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use btsumm::config::PipelineConfig;
use btsumm::pipeline::{self, GenerateMode};
use btsumm::seq2seq::Direction;
use btsumm::Error;

#[derive(Parser)]
#[command(name = "btsumm", version, about = "Unsupervised sentence summarization by back-translation")]
struct Cli {
    /// Configuration file (`key = value` lines under `[section]` headers).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set seq2seq.hidden=128`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Worker thread cap (same as `run.jobs`).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Beam,
    Sample,
}

#[derive(Subcommand)]
enum Command {
    /// Split the paired source into unaligned sides and build vocabularies.
    Prepare,
    /// Train per-side and shared skipgram embeddings.
    TrainEmbeddings,
    /// Align the full-text embedding space with the summary space.
    Align,
    /// Build the thresholded-projection initializer.
    InitPrthr,
    /// Train the denoising bag-of-words autoencoder initializer.
    InitDbae,
    /// Train the moment-matching initializer.
    InitMoments,
    /// Apply a model to one sequence per line.
    Generate {
        /// `PrThr`, `DBAE`, `Mu1` or a seq2seq checkpoint path.
        #[arg(long)]
        model: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "beam")]
        mode: Mode,
    },
    /// Train one seq2seq model on a `fulltext<TAB>summary` file.
    TrainSeq2seq {
        #[arg(long)]
        data: PathBuf,
        /// `F2S` or `S2F`.
        #[arg(long, default_value = "F2S")]
        direction: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run (or resume) the back-translation loop.
    Loop {
        /// Overrides `loop.max_iteration`.
        #[arg(long)]
        max_iteration: Option<usize>,
    },
    /// Score the baseline, initializers and summarizers on the test pairs.
    Evaluate,
    /// Print the comparison table of an evaluated run.
    Report,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::MissingArtifact(_) => 4,
        Error::Divergence { .. } | Error::NonFinite(_) => 5,
        _ => 1,
    }
}

fn run(cli: Cli) -> btsumm::Result<()> {
    let mut overrides = cli.overrides;
    if let Some(j) = cli.jobs {
        overrides.push(format!("run.jobs={j}"));
    }
    if let Command::Loop {
        max_iteration: Some(m),
    } = &cli.command
    {
        overrides.push(format!("loop.max_iteration={m}"));
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Prepare => pipeline::prepare(&cfg),
        Command::TrainEmbeddings => pipeline::train_embeddings(&cfg),
        Command::Align => pipeline::align(&cfg),
        Command::InitPrthr => pipeline::init_prthr(&cfg),
        Command::InitDbae => pipeline::init_dbae(&cfg),
        Command::InitMoments => pipeline::init_moments(&cfg),
        Command::Generate {
            model,
            input,
            output,
            mode,
        } => {
            let mode = match mode {
                Mode::Beam => GenerateMode::Beam,
                Mode::Sample => GenerateMode::Sample,
            };
            pipeline::generate(&cfg, &model, &input, &output, mode)
        }
        Command::TrainSeq2seq {
            data,
            direction,
            output,
        } => {
            let d: Direction = direction.parse()?;
            pipeline::train_seq2seq(&cfg, &data, d, &output).map(|_| ())
        }
        Command::Loop { .. } => pipeline::bt_loop(&cfg).map(|_| ()),
        Command::Evaluate => {
            let r = pipeline::evaluate(&cfg)?;
            print!("{}", r.to_text());
            Ok(())
        }
        Command::Report => {
            print!("{}", pipeline::report(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("BTSUMM_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
