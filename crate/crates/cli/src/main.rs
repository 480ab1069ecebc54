//! `maskdiff`: command-line experiments for mask-diffusion parallel-generation
//! analysis. One subcommand per lifecycle stage; every run writes a manifest
//! from which `rerun` reproduces byte-identical outputs.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskdiff_core::Error;

use crate::manifest::ResolvedCommand;

#[derive(Parser)]
#[command(name = "maskdiff", version, about = "Mask-diffusion decoding and analysis experiments")]
struct Cli {
    /// Output directory; created if missing. Overrides MASKDIFF_OUT.
    #[arg(long, global = true)]
    out: Option<std::path::PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a corpus file.
    Corpus(CorpusArgs),
    /// Train the neural denoiser and write a checkpoint plus loss trace.
    Train(TrainArgs),
    /// Decode from a prompt and write the trace as JSON lines.
    Decode(DecodeArgs),
    /// Analysis reports: PPL tables, bound curves, profiles, homogenization.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Golden-path bundles reproducing the headline experiments.
    #[command(subcommand)]
    Reproduce(ReproduceCommand),
    /// Re-run a previous invocation from its manifest.
    Rerun(RerunArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// The 100-sequence first-pair corpus.
    #[arg(long, conflicts_with = "chain")]
    toy: bool,
    /// A Zipf-profile Markov-chain corpus.
    #[arg(long)]
    chain: bool,
    #[arg(long, default_value_t = 8)]
    states: usize,
    #[arg(long, default_value_t = 1.05)]
    s: f64,
    /// Zipf support used to shape the transition profile.
    #[arg(long, default_value_t = 150_000)]
    zipf_n: usize,
    /// Sequence length.
    #[arg(long, default_value_t = 6)]
    len: usize,
    /// Seed for the random-permutation chain; omit for the cyclic chain.
    #[arg(long)]
    seed: Option<u64>,
    /// Keep only the K most probable paths instead of full enumeration.
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus file; defaults to the built-in toy corpus.
    #[arg(long)]
    corpus: Option<std::path::PathBuf>,
    #[arg(long, default_value = "standard", value_parser = ["standard", "blockwise"])]
    regime: String,
    /// Block size for the blockwise regime.
    #[arg(long, default_value_t = 4)]
    block: usize,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Cosine-decay floor as a fraction of --lr; 1.0 keeps the rate constant
    #[arg(long, default_value_t = 1.0)]
    lr_floor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "linear")]
    schedule: String,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    d_ff: usize,
    #[arg(long, default_value_t = 0)]
    param_seed: u64,
}

#[derive(Args)]
struct DecodeArgs {
    /// Corpus file backing the tabular denoiser and the oracle annotations.
    #[arg(long)]
    corpus: Option<std::path::PathBuf>,
    /// Neural checkpoint; replaces the tabular denoiser when given.
    #[arg(long)]
    checkpoint: Option<std::path::PathBuf>,
    #[arg(long, default_value = "confidence",
          value_parser = ["confidence", "ar_order", "reverse_order", "random_order", "parallel_k", "semi_ar", "random_init"])]
    strategy: String,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    block: usize,
    /// Inner strategy for semi_ar blocks.
    #[arg(long, default_value = "confidence",
          value_parser = ["confidence", "ar_order", "reverse_order", "random_order", "parallel_k"])]
    inner: String,
    #[arg(long, default_value_t = 0.1)]
    ratio: f64,
    #[arg(long, default_value_t = 5)]
    rounds: usize,
    /// Sampling temperature; omit for greedy.
    #[arg(long)]
    temperature: Option<f64>,
    /// Comma-separated tokens with `M` for masked positions, e.g. `M,M,4,5,M`.
    /// Defaults to all-MASK at corpus length.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    stop_on_eot: bool,
    /// Also run semi_ar with B=1 and report whether it matches ar_order.
    #[arg(long)]
    compare_semi_ar_b1: bool,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Metric-2 PPL of the bound products (the paper's headline table).
    PplTable {
        #[arg(long, default_value_t = 1.05)]
        s: f64,
        #[arg(long = "N", default_value_t = 150_000)]
        n_support: usize,
        #[arg(long, default_value_t = 8)]
        max: usize,
    },
    /// The marginal upper-bound curve.
    Bound {
        #[arg(long, default_value_t = 1.05)]
        s: f64,
        #[arg(long = "N", default_value_t = 150_000)]
        n_support: usize,
        #[arg(long, default_value_t = 64)]
        n: usize,
    },
    /// Mean max-probability profile of a corpus, with the bound overlay.
    Profile {
        #[arg(long)]
        corpus: std::path::PathBuf,
        /// Number of random prompts; 0 keeps only the all-MASK prompt.
        #[arg(long, default_value_t = 0)]
        prompts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// One-shot argmax homogenization report for a corpus.
    Homogenization {
        #[arg(long)]
        corpus: std::path::PathBuf,
    },
}

#[derive(Subcommand)]
enum ReproduceCommand {
    /// The first-pair toy experiment: oracle marginals, AR chain, parallel
    /// failure case.
    Toy,
    /// The Zipf-bound PPL table at s = 1.05, N = 150000.
    Table2,
}

#[derive(Args)]
struct RerunArgs {
    /// Manifest written by a previous run.
    #[arg(long)]
    manifest: std::path::PathBuf,
}

fn resolve(command: Command) -> Result<ResolvedCommand, Error> {
    Ok(match command {
        Command::Corpus(a) => {
            if !a.toy && !a.chain {
                return Err(Error::invalid("corpus", "choose --toy or --chain"));
            }
            if a.toy {
                ResolvedCommand::CorpusToy
            } else {
                ResolvedCommand::CorpusChain {
                    states: a.states,
                    s: a.s,
                    zipf_n: a.zipf_n,
                    len: a.len,
                    seed: a.seed,
                    top_k: a.top_k,
                }
            }
        }
        Command::Train(a) => ResolvedCommand::Train {
            corpus: a.corpus,
            regime: a.regime,
            block: a.block,
            steps: a.steps,
            batch: a.batch,
            lr: a.lr,
            lr_floor: a.lr_floor,
            seed: a.seed,
            schedule: a.schedule,
            d_model: a.d_model,
            layers: a.layers,
            heads: a.heads,
            d_ff: a.d_ff,
            param_seed: a.param_seed,
        },
        Command::Decode(a) => ResolvedCommand::Decode {
            corpus: a.corpus,
            checkpoint: a.checkpoint,
            strategy: a.strategy,
            k: a.k,
            block: a.block,
            inner: a.inner,
            ratio: a.ratio,
            rounds: a.rounds,
            temperature: a.temperature,
            prompt: a.prompt,
            seed: a.seed,
            stop_on_eot: a.stop_on_eot,
            compare_semi_ar_b1: a.compare_semi_ar_b1,
        },
        Command::Analyze(AnalyzeCommand::PplTable { s, n_support, max }) => {
            ResolvedCommand::AnalyzePplTable { s, n_support, max }
        }
        Command::Analyze(AnalyzeCommand::Bound { s, n_support, n }) => {
            ResolvedCommand::AnalyzeBound { s, n_support, n }
        }
        Command::Analyze(AnalyzeCommand::Profile { corpus, prompts, seed }) => {
            ResolvedCommand::AnalyzeProfile { corpus, prompts, seed }
        }
        Command::Analyze(AnalyzeCommand::Homogenization { corpus }) => {
            ResolvedCommand::AnalyzeHomogenization { corpus }
        }
        Command::Reproduce(ReproduceCommand::Toy) => ResolvedCommand::ReproduceToy,
        Command::Reproduce(ReproduceCommand::Table2) => ResolvedCommand::ReproduceTable2,
        Command::Rerun(_) => unreachable!("rerun is handled before resolution"),
    })
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::DivergedLoss(_)
        | Error::ZeroProbability
        | Error::DegenerateSchedule(_)
        | Error::DegenerateWeight => 3,
        Error::NoConsistentEntry => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out_dir = cli
        .out
        .or_else(|| std::env::var_os("MASKDIFF_OUT").map(Into::into))
        .unwrap_or_else(|| "out".into());

    let result = match cli.command {
        Command::Rerun(args) => manifest::load(&args.manifest)
            .and_then(|cmd| commands::run(&cmd, &out_dir, false)),
        other => resolve(other).and_then(|cmd| commands::run(&cmd, &out_dir, true)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
