//! `hardapt`: synthesize, prepare, train, evaluate and sweep.
//!
//! Exit codes: 0 success, 1 I/O, 2 usage, 3 malformed input, 4 config,
//! 5 contract or numeric failure, 6 unreadable checkpoint or stored format.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CliError, Split, SweepKind};
use hardapt::data::Domain;
use hardapt::trainer::{AblationMode, Grid, WindowParams};
use hardapt::Error;

#[derive(Parser)]
#[command(name = "hardapt", version, about = "Unsupervised domain adaptation for wearable sensor windows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired source/target corpus with a controllable shift.
    Synth {
        /// Output directory (default: $HARDAPT_OUT_DIR or ./out).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Target rotation angle in degrees; 0 gives a no-shift corpus.
        #[arg(long)]
        rotation_shift: Option<f64>,
        #[arg(long)]
        samples_per_class: Option<usize>,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        window_len: Option<usize>,
    },
    /// Filter, window, split and normalize raw recording CSVs.
    Prepare {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        /// Per-row target labels, kept for evaluation only.
        #[arg(long)]
        hidden_labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Treat every row as this domain.
        #[arg(long, value_parser = parse_domain)]
        domain: Option<Domain>,
        #[arg(long, conflicts_with = "window_len")]
        window_ms: Option<f64>,
        #[arg(long)]
        window_len: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        #[arg(long, default_value_t = 3)]
        median_kernel: usize,
        /// Inferred from timestamps when omitted.
        #[arg(long)]
        sample_rate: Option<f64>,
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// Write a complete default run config.
    InitConfig {
        /// Destination file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model and write its checkpoint and per-epoch report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        ablation: Option<AblationMode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Prepared data directory, overriding [data].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Take the config of a grid sweep entry: `best` or a rank.
        #[arg(long)]
        from_sweep: Option<String>,
        /// Sweep output directory (default: <out>/sweep).
        #[arg(long)]
        sweep_dir: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Also write the per-epoch ensemble predictions.
        #[arg(long)]
        dump_ensemble: bool,
    },
    /// Score a checkpoint on a prepared split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Target)]
        split: Split,
        /// Window labels (`window,label`), overriding the stored ones.
        #[arg(long)]
        hidden_labels: Option<PathBuf>,
        /// Ignore any labels and report entropy only.
        #[arg(long)]
        no_labels: bool,
        #[arg(long)]
        embeddings: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid search over α, λ, learning rate and windowing, or an α-vs-entropy sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = SweepKind::Grid)]
        kind: SweepKind,
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        lambda: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        learning_rate: Vec<f64>,
        /// `LEN:OVERLAP`, e.g. `50:0.5`.
        #[arg(long, value_delimiter = ',', value_parser = parse_window)]
        window: Vec<WindowParams>,
        /// Parallel runs (default: $HARDAPT_WORKERS or 1).
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_domain(s: &str) -> Result<Domain, String> {
    s.parse().map_err(|_| format!("unknown domain {s:?}"))
}

fn parse_mode(s: &str) -> Result<AblationMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_window(s: &str) -> Result<WindowParams, String> {
    let (len, ov) = s.split_once(':').ok_or("expected LEN:OVERLAP")?;
    Ok(WindowParams {
        window_len: len.trim().parse().map_err(|_| format!("bad window length {len:?}"))?,
        overlap: ov.trim().parse().map_err(|_| format!("bad overlap {ov:?}"))?,
    })
}

fn out_dir(flag: Option<PathBuf>, sub: &str) -> PathBuf {
    flag.unwrap_or_else(|| {
        std::env::var_os("HARDAPT_OUT_DIR")
            .map_or_else(|| PathBuf::from("out"), PathBuf::from)
            .join(sub)
    })
}

fn workers(flag: Option<usize>) -> usize {
    flag.or_else(|| std::env::var("HARDAPT_WORKERS").ok()?.parse().ok())
        .unwrap_or(1)
        .max(1)
}

fn run(cli: Cli) -> commands::CmdResult {
    match cli.command {
        Command::Synth {
            out,
            seed,
            rotation_shift,
            samples_per_class,
            subjects,
            classes,
            window_len,
        } => commands::synth(commands::SynthArgs {
            out: out_dir(out, "synth"),
            seed,
            rotation_shift,
            samples_per_class,
            subjects,
            classes,
            window_len,
        }),
        Command::Prepare {
            inputs,
            hidden_labels,
            out,
            domain,
            window_ms,
            window_len,
            overlap,
            median_kernel,
            sample_rate,
            num_classes,
            split_seed,
        } => commands::prepare_cmd(commands::PrepareArgs {
            inputs,
            hidden_labels,
            out: out_dir(out, "prepared"),
            domain,
            window_ms,
            window_len,
            overlap,
            median_kernel,
            sample_rate,
            num_classes,
            split_seed,
        }),
        Command::InitConfig { out } => commands::init_config(out),
        Command::Train {
            config,
            out,
            ablation,
            seed,
            data,
            from_sweep,
            sweep_dir,
            max_epochs,
            dump_ensemble,
        } => commands::train(commands::TrainArgs {
            config,
            out: out_dir(out, "train"),
            ablation,
            seed,
            data,
            from_sweep,
            sweep_dir,
            max_epochs,
            dump_ensemble,
        }),
        Command::Eval {
            checkpoint,
            data,
            split,
            hidden_labels,
            no_labels,
            embeddings,
            out,
        } => commands::eval(commands::EvalArgs {
            checkpoint,
            data,
            split,
            hidden_labels,
            no_labels,
            embeddings,
            out: out_dir(out, "eval"),
        }),
        Command::Sweep {
            config,
            kind,
            alpha,
            lambda,
            learning_rate,
            window,
            workers: w,
            out,
        } => commands::sweep(commands::SweepArgs {
            config,
            kind,
            grid: Grid {
                alpha,
                lambda,
                learning_rate,
                window,
            },
            workers: workers(w),
            out: out_dir(out, "sweep"),
        }),
    }
}

fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Usage(_) => 2,
        CliError::Core(e) => match e {
            Error::Io(_) => 1,
            Error::Parse { .. } => 3,
            Error::Config(_) => 4,
            Error::Shape { .. } | Error::NonFinite { .. } | Error::Contract(_) => 5,
            Error::Format { .. } => 6,
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            match e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                CliError::Core(err) => eprintln!("error: {err}"),
            }
            ExitCode::from(code)
        }
    }
}
