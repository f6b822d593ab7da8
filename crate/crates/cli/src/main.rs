use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mpsclip::backbone::{CorpusConfig, Split};
use mpsclip::trainer::TrainConfig;
use mpsclip::Error;

mod commands;
mod config;
mod manifest;
mod plot;

use config::Preset;

/// Train and evaluate gated-adapter retrieval models on a synthetic corpus.
#[derive(Debug, Parser)]
#[command(name = "mpsclip", version)]
struct Cli {
    /// JSON config file with optional `preset`, `seed`, `corpus` and `train`
    /// sections. Flags override file values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for corpus and training. Falls back to the file, then MPS_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving all outputs and the run manifest.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write it as a feature file.
    GenData(CorpusArgs),
    /// Train adapters and perspective heads, writing a checkpoint and history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Compare analytic gradients of every module with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train one model per row of an ablation grid and tabulate test recalls.
    Ablate(AblateArgs),
    /// Render CSV outputs of earlier runs as markdown tables and SVG plots.
    Report(ReportArgs),
}

#[derive(Debug, Default, Args)]
struct CorpusArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    images: Option<usize>,
    /// Sub-perspectives per image.
    #[arg(long)]
    k: Option<usize>,
    /// Token width.
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

impl CorpusArgs {
    fn apply(&self, c: &mut CorpusConfig) {
        if let Some(v) = self.classes {
            c.n_classes = v;
        }
        if let Some(v) = self.images {
            c.n_images = v;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.d_in {
            c.d_in = v;
        }
        if let Some(v) = self.noise {
            c.noise_level = v;
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Corpus feature file; generated from the resolved config when absent.
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    corpus_overrides: CorpusArgs,
    /// Base hyperparameters before file and flag overrides [default: desk].
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lambda_mpc: Option<f64>,
    #[arg(long)]
    lambda_mpt: Option<f64>,
    #[arg(long)]
    no_attn: bool,
    #[arg(long)]
    no_gate: bool,
    #[arg(long)]
    no_mpr: bool,
    /// Pool by token mean instead of the class token.
    #[arg(long)]
    mean_pooling: bool,
    #[arg(long)]
    no_mpc: bool,
    #[arg(long)]
    no_mpt: bool,
}

impl TrainArgs {
    fn apply(&self, c: &mut CorpusConfig, t: &mut TrainConfig) {
        self.corpus_overrides.apply(c);
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut t.lr, self.lr);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.temperature, self.temperature);
        set(&mut t.lambda_mpc, self.lambda_mpc);
        set(&mut t.lambda_mpt, self.lambda_mpt);
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        let f = &mut t.flags;
        f.attn &= !self.no_attn;
        f.gate &= !self.no_gate;
        f.mpr &= !self.no_mpr;
        f.cls_pooling &= !self.mean_pooling;
        f.use_mpc &= !self.no_mpc;
        f.use_mpt &= !self.no_mpt;
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    /// Use the best-validation parameters instead of the final ones.
    #[arg(long)]
    best: bool,
    /// Corpus feature file; regenerated from the checkpoint's config when absent.
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Random instances per module, starting at --seed.
    #[arg(long, default_value_t = 100)]
    seeds: u64,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// adapter, losses, mpr or cls.
    #[arg(long)]
    grid: String,
    /// Rows trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory holding CSV outputs [default: --out].
    #[arg(long, value_name = "DIR")]
    input: Option<PathBuf>,
}

/// 1 for invalid configuration or arguments, 2 for everything that fails
/// while running.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
