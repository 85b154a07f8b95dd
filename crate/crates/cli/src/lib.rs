//! Pipeline driver: every stage is a subcommand that reads and writes
//! manifests and files under one work directory.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors (bad flags,
//! bad configuration, missing inputs), 2 for failures while a stage runs.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod config;
pub mod stages;

pub use config::{Metric, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Invalid(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Invalid(m) => write!(f, "invalid configuration: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<usfg_core::Error> for CliError {
    fn from(e: usfg_core::Error) -> Self {
        match e {
            usfg_core::Error::Config(m) => CliError::Invalid(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "usfg",
    version,
    about = "Unsupervised foreground segmentation: video teacher, single-image student",
    after_help = "Any configuration key can be overridden as --section.key VALUE (for example --train.steps 500)."
)]
struct Cli {
    /// Configuration file (`key = value` lines under `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Work directory holding manifests, masks, checkpoints and reports.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Worker threads for teach, augment, infer, boxes and eval.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic video corpus with ground truth.
    Synth,
    /// Run the video teacher over every video of the input manifests.
    Teach {
        #[arg(long)]
        input: Vec<PathBuf>,
    },
    /// Score teacher masks and keep the top fraction.
    Select {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        keep_fraction: Option<f64>,
    },
    /// Expand selected frames into scaled random crops.
    Augment {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Fit the student on augmented crops.
    Train {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Predict a soft mask for every image of the input manifest.
    Infer {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fit bounding boxes to soft masks.
    Boxes {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score masks or boxes against ground truth.
    Eval {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        metric: Option<Metric>,
    },
    /// Run every stage in order.
    Pipeline,
}

/// Splits `--section.key value` and `--section.key=value` overrides from
/// the arguments clap understands.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?,
        };
        overrides.push((name.to_string(), value));
    }
    Ok((rest, overrides))
}

fn parse(args: Vec<String>) -> Result<(Cli, RunConfig), Result<i32, CliError>> {
    let (rest, mut overrides) = split_overrides(args).map_err(Err)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    Err(Ok(0))
                }
                _ => {
                    eprint!("{}", e.render());
                    Err(Ok(1))
                }
            };
        }
    };
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(dir) = &cli.workdir {
        overrides.push(("paths.workdir".into(), dir.to_string_lossy().into_owned()));
    }
    match &cli.command {
        Command::Select {
            keep_fraction: Some(k),
            ..
        } => overrides.push(("select.keep_fraction".into(), format!("{k:?}"))),
        Command::Eval { metric: Some(m), .. } => overrides.push(("eval.metric".into(), m.name().into())),
        _ => {}
    }
    if cli.workers == 0 {
        return Err(Err(CliError::Invalid("--workers must be at least 1".into())));
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides).map_err(Err)?;
    Ok((cli, config))
}

fn dispatch(cli: Cli, config: RunConfig) -> Result<(), CliError> {
    let ctx = stages::Context::new(config, cli.workers)?;
    match cli.command {
        Command::Synth => ctx.synth().map(drop),
        Command::Teach { input } => ctx.teach(&input).map(drop),
        Command::Select { input, .. } => ctx.select(input.as_deref()).map(drop),
        Command::Augment { input } => ctx.augment(input.as_deref()).map(drop),
        Command::Train { input } => ctx.train(input.as_deref()).map(drop),
        Command::Infer { input, checkpoint } => ctx.infer(input.as_deref(), checkpoint.as_deref()).map(drop),
        Command::Boxes { input } => ctx.boxes(input.as_deref()).map(drop),
        Command::Eval { input, .. } => ctx.eval(input.as_deref(), ctx.config.eval.metric).map(drop),
        Command::Pipeline => ctx.pipeline().map(drop),
    }
}

/// Runs one command line (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<String> = argv
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let (cli, config) = match parse(args) {
        Ok(parsed) => parsed,
        Err(Ok(code)) => return code,
        Err(Err(e)) => {
            eprintln!("{e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("run `usfg --help` for usage");
            }
            return e.exit_code();
        }
    };
    match dispatch(cli, config) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
