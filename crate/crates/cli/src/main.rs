//! `itgan`: train, inspect and serve iterative GAN models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use itgan_core::eval::Judge;
use itgan_core::pipeline::Edit;

use config::RunFlags;

/// A command line or configuration mistake; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "itgan", version, about = "Iterative GAN for face generation and attribute transformation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_edit(s: &str) -> Result<Edit, String> {
    s.parse().map_err(|e: itgan_core::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing a checkpoint, a JSON-lines loss log and sample grids.
    Train {
        #[command(flatten)]
        run: RunFlags,
        /// Run directory.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write a sample grid every this many iterations (0 disables).
        #[arg(long, default_value_t = 500)]
        sample_every: u64,
        /// Also checkpoint every this many iterations.
        #[arg(long)]
        save_every: Option<u64>,
    },
    /// Reconstruct images through the encoder and generator.
    Rebuild {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Images to rebuild; without them the first held-out images are used.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Contact sheet: targets on the first row, reconstructions below.
        #[arg(long, default_value = "rebuild.png")]
        out: PathBuf,
    },
    /// Sample faces with chosen attributes.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `name=0|1`; unassigned attributes are 0.
        #[arg(long = "set", value_parser = parse_edit)]
        assignment: Vec<Edit>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "generated.png")]
        out: PathBuf,
    },
    /// Edit the attributes of one image.
    Transform {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// `name=0|1|flip`, repeatable.
        #[arg(long = "edit", value_parser = parse_edit)]
        edits: Vec<Edit>,
        #[arg(long, default_value = "transformed.png")]
        out: PathBuf,
    },
    /// Held-out recognition, reconstruction and identity metrics.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunFlags,
        /// JSON report path.
        #[arg(long, default_value = "eval.json")]
        out: PathBuf,
    },
    /// Train one model per loss setting from a shared warm-up and compare them.
    Ablate {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
        /// Embedding used for identity scores.
        #[arg(long, value_enum, default_value = "warmup")]
        judge: JudgeArg,
    },
    /// Start the HTTP inference service.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: std::net::IpAddr,
        /// Allowed browser origin, repeatable; any origin when omitted.
        #[arg(long = "cors-origin")]
        cors_origins: Vec<String>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum JudgeArg {
    Warmup,
    Own,
}

impl From<JudgeArg> for Judge {
    fn from(j: JudgeArg) -> Self {
        match j {
            JudgeArg::Warmup => Judge::Warmup,
            JudgeArg::Own => Judge::OwnModel,
        }
    }
}

/// 2 usage, 3 numerical failure, 4 I/O, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use itgan_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Argument(_) | E::UnknownAttribute { .. } => 2,
                E::NonFinite { .. } => 3,
                E::Io { .. } | E::Checkpoint(_) | E::Image(_) | E::Parse { .. } | E::Format(_) => 4,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            run,
            out,
            checkpoint,
            sample_every,
            save_every,
        } => commands::train(&run, &out, checkpoint.as_deref(), sample_every, save_every),
        Command::Rebuild {
            checkpoint,
            inputs,
            run,
            count,
            out,
        } => commands::rebuild(&checkpoint, &inputs, &run, count, &out),
        Command::Generate {
            checkpoint,
            assignment,
            count,
            seed,
            out,
        } => commands::generate(&checkpoint, &assignment, count, seed, &out),
        Command::Transform {
            checkpoint,
            input,
            edits,
            out,
        } => commands::transform(&checkpoint, &input, &edits, &out),
        Command::Evaluate { checkpoint, run, out } => commands::evaluate(&checkpoint, &run, &out),
        Command::Ablate { run, out, judge } => commands::ablate(&run, &out, judge.into()),
        Command::Serve {
            checkpoint,
            port,
            bind,
            cors_origins,
        } => commands::serve(checkpoint.as_deref(), bind, port, cors_origins),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
