use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ttt_ucdr::cli::{
    cmd_compare, cmd_eval, cmd_gen, cmd_pretrain, cmd_ttt, error_line, exit_code, parse_overrides, ExperimentConfig,
    PRETRAINED_CHECKPOINT,
};
use ttt_ucdr::Result;

/// Test-time training for cross-domain retrieval on a synthetic benchmark.
///
/// Any config leaf can be overridden after the subcommand with a dotted
/// flag, e.g. `--ttt.head_lr 1e-5` or `--eval.k=50`.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// JSON experiment config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for dataset, initial weights, pretraining and test-time training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--SECTION.KEY VALUE")]
    rest: Vec<String>,
}

#[derive(Args)]
struct WithCheckpoint {
    /// Model checkpoint; defaults to the pretrained checkpoint in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic multi-domain dataset.
    Gen(Overrides),
    /// Train the encoder with a classifier on the training split.
    Pretrain(Overrides),
    /// Adapt a checkpoint to the unlabeled query split.
    Ttt(WithCheckpoint),
    /// Score a checkpoint under every configured retrieval protocol.
    Eval(WithCheckpoint),
    /// Run every adaptation variant from one checkpoint and tabulate the changes.
    Compare(WithCheckpoint),
}

fn resolve(cli: &Cli, rest: &[String]) -> Result<ExperimentConfig> {
    ExperimentConfig::resolve(cli.config.as_deref(), cli.seed, cli.out.as_deref(), &parse_overrides(rest)?)
}

fn checkpoint(cfg: &ExperimentConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.out.join(PRETRAINED_CHECKPOINT))
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(o) => {
            let cfg = resolve(cli, &o.rest)?;
            let manifest = cmd_gen(&cfg)?;
            println!("wrote {} samples to {}", manifest.samples.len(), show(&cfg.dataset_dir()));
        }
        Command::Pretrain(o) => {
            let cfg = resolve(cli, &o.rest)?;
            println!("wrote {}", show(&cmd_pretrain(&cfg)?));
        }
        Command::Ttt(w) => {
            let cfg = resolve(cli, &w.overrides.rest)?;
            let out = cmd_ttt(&cfg, &checkpoint(&cfg, &w.checkpoint))?;
            if let Some((first, last)) = out.trace.quarter_means() {
                println!("loss first quarter {first:.6} last quarter {last:.6}");
            }
            println!("wrote {} and {}", show(&out.checkpoint), show(&out.trace_csv));
        }
        Command::Eval(w) => {
            let cfg = resolve(cli, &w.overrides.rest)?;
            let report = cmd_eval(&cfg, &checkpoint(&cfg, &w.checkpoint))?;
            for (name, r) in &report.reports {
                println!("{name}: mAP@{} {:.4} Prec@{} {:.4}", r.k, r.map_at_k, r.k, r.prec_at_k);
            }
        }
        Command::Compare(w) => {
            let cfg = resolve(cli, &w.overrides.rest)?;
            print!("{}", cmd_compare(&cfg, &checkpoint(&cfg, &w.checkpoint))?.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
