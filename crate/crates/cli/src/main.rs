//! `iqvq`: command-line driver for corpus generation, two-stage training,
//! restoration and the quality-optimization experiments.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use iqvq::config::{RunConfig, KEY_DOCS};

#[derive(Parser, Debug)]
#[command(name = "iqvq", version, about = "Quality-prior guided dual-codebook VQ restoration")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Config file of `key = value` lines (`#` comments). Unset keys keep
    /// their defaults; unknown keys are an error.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run directory holding every artifact [config key run.dir, default runs/default].
    #[arg(long, global = true, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    /// Override one config key; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic HQ corpus as PGM files plus manifest.csv.
    GenCorpus {
        /// Number of images [corpus.count, default 512].
        #[arg(long)]
        count: Option<usize>,
        /// Corpus seed [corpus.seed, default 7].
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory [default <run-dir>/corpus].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a PGM directory with the three proxies and write scores.csv.
    Score {
        /// Directory with manifest.csv [default <run-dir>/corpus].
        #[arg(long)]
        images: Option<PathBuf>,
        /// Output CSV [default <run-dir>/scores.csv].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Degrade every corpus image and write LQ PGMs plus pairs.csv.
    GenPairs {
        /// Pair synthesis seed [degrade.seed, default 7].
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory [default <run-dir>/pairs].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train encoder, codebooks, decoder and discriminator (stage I).
    TrainStage1 {
        /// Training steps [stage1.steps, default 2000].
        #[arg(long)]
        steps: Option<usize>,
        /// Stage-I seed [stage1.seed, default 7].
        #[arg(long)]
        seed: Option<u64>,
        /// Train without the HQ+ codebook [stage1.dual_codebook = false].
        #[arg(long)]
        single_codebook: bool,
        /// Output directory [default <run-dir>/stage1].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the score-conditioned code predictor on LQ/HQ pairs (stage II).
    TrainStage2 {
        /// Stage-I checkpoint [default <run-dir>/stage1/final.ckpt].
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// Training steps [stage2.steps, default 6000].
        #[arg(long)]
        steps: Option<usize>,
        /// Stage-II seed [stage2.seed, default 7].
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory [default <run-dir>/stage2].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Restore one LQ image at a quality bin.
    Restore {
        #[command(flatten)]
        model: ModelArg,
        /// LQ input PGM.
        #[arg(long = "in")]
        input: PathBuf,
        /// Conditioning bin in 0..=9 [default 9].
        #[arg(long, default_value_t = 9)]
        bin: usize,
        /// Output PGM.
        #[arg(long)]
        out: PathBuf,
    },
    /// Push one restoration toward a higher quality score.
    OptimizeQuality {
        #[command(flatten)]
        model: ModelArg,
        /// LQ input PGM.
        #[arg(long = "in")]
        input: PathBuf,
        /// Conditioning bin in 0..=9 [default 9].
        #[arg(long, default_value_t = 9)]
        bin: usize,
        /// Search space [default continuous].
        #[arg(long, value_enum, default_value_t = Mode::Continuous)]
        mode: Mode,
        /// Ascent steps or sweep limit [opt.steps, default 200].
        #[arg(long)]
        steps: Option<usize>,
        /// Initial continuous step size [opt.step_size, default 0.1].
        #[arg(long)]
        step_size: Option<f64>,
        /// Output PGM; the score trace goes to the same path with .csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a stage-II checkpoint on the held-out pairs, per bin.
    Eval {
        #[command(flatten)]
        model: ModelArg,
        /// Comma-separated bins [default 0,1,...,9].
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
        bins: Vec<usize>,
        /// Output CSV [default <run-dir>/eval/eval.csv].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continuous vs discrete quality optimization on the same inputs.
    OveroptExperiment {
        #[command(flatten)]
        model: ModelArg,
        /// Number of held-out inputs [default 16].
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Output directory [default <run-dir>/overopt].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Four-row ablation: baseline, +condition, +dual codebook, +quality loss.
    Ablate {
        /// Seed for both training stages [stage1.seed and stage2.seed, default 7].
        #[arg(long)]
        seed: Option<u64>,
        /// Dual-codebook stage-I checkpoint; trained when absent
        /// [default <run-dir>/stage1/final.ckpt if it exists].
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// Output directory [default <run-dir>/ablation].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct ModelArg {
    /// Stage-II checkpoint [default <run-dir>/stage2/final.ckpt].
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Continuous,
    Discrete,
}

fn config_help() -> String {
    let defaults = RunConfig::default().entries();
    let width = KEY_DOCS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (--config file or --set KEY=VALUE), with defaults:\n");
    for ((key, doc), (_, value)) in KEY_DOCS.iter().zip(defaults) {
        out.push_str(&format!("  {key:<width$}  {doc} [default {value}]\n"));
    }
    out
}

fn main() -> ExitCode {
    let help = config_help();
    let cmd = Cli::command().after_long_help(help.clone()).mut_subcommands(|s| s.after_long_help(help.clone()));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
