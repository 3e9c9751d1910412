use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(
    name = "qatlab",
    about = "Quantization-aware-training laboratory for a micro LLaMA-style transformer",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Minmax,
    Mse,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the full-precision teacher on the corpus train split.
    PretrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Attach and calibrate weight quantizers on a teacher checkpoint,
    /// producing a PTQ student checkpoint and a reconstruction report.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
    },
    /// Run KD-QAT: full-precision teacher distills into the quantized
    /// student under the chosen freeze plan.
    Kdqat {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// PTQ student checkpoint; calibrated from the teacher when absent.
        #[arg(long)]
        ptq: Option<PathBuf>,
        /// Freeze preset: none | o | v | ov | qkv | oqkv.
        #[arg(long)]
        freeze: Option<String>,
        /// Train a full-precision student (quantizers disabled).
        #[arg(long)]
        fp: bool,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate perplexity of a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Quantize activation outputs (16-bit per-tensor asymmetric)
        /// during evaluation; calibrates them first if absent.
        #[arg(long)]
        w4a16: bool,
        /// Corpus split: held_out | train.
        #[arg(long, default_value = "held_out")]
        split: String,
        /// Also write the JSON record here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// With --w4a16: persist the checkpoint enriched with the
        /// calibrated activation quantizers to this path.
        #[arg(long)]
        save_act: Option<PathBuf>,
    },
    /// Summarize a trace CSV: per-layer series files plus median
    /// grad-norm ratios across projections.
    TraceReport {
        #[arg(long)]
        trace: PathBuf,
        /// Output directory (default: <trace dir>/report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::PretrainTeacher { config } => commands::pretrain_teacher(&config),
        Cmd::Calibrate { config, teacher, method } => {
            commands::calibrate(&config, &teacher, method)
        }
        Cmd::Kdqat { config, teacher, ptq, freeze, fp, force } => {
            commands::kdqat(&config, &teacher, ptq.as_deref(), freeze.as_deref(), fp, force)
        }
        Cmd::Eval { config, ckpt, w4a16, split, out, save_act } => {
            commands::eval(&config, &ckpt, w4a16, &split, out.as_deref(), save_act.as_deref())
        }
        Cmd::TraceReport { trace, out } => commands::trace_report(&trace, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
