// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unlearn_core::pipeline::{render_reports, Outcome, Pipeline, RunConfig, Stage};
use unlearn_core::Error;

#[derive(Parser)]
#[command(name = "unlearn", version, about = "Capsule-based subject erasure on a toy transformer")]
struct Cli {
    /// TOML run configuration. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `heal.weights.lambda_ntul=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Sets every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the fact corpus (synthetic, or from `paths.triples`).
    Synth,
    /// Train the toy model to memorise the corpus.
    Train,
    /// Capture pooled MLP activations for every probe prompt.
    Probe,
    /// Mine subject signatures and validate them per layer.
    Mine,
    /// Turn the best signatures into capsules.
    Forge,
    /// Collect preference tuples and train the adapter.
    Heal,
    /// Score the healed model without capsules.
    Eval,
    /// Every stage in order.
    All,
    /// Render eval reports from several runs as one table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn stages(c: &Command) -> Vec<Stage> {
    match c {
        Command::Synth => vec![Stage::Synth],
        Command::Train => vec![Stage::Train],
        Command::Probe => vec![Stage::Probe],
        Command::Mine => vec![Stage::Mine],
        Command::Forge => vec![Stage::Forge],
        Command::Heal => vec![Stage::Heal],
        Command::Eval => vec![Stage::Eval],
        Command::All => Stage::ALL.to_vec(),
        Command::Report { .. } => vec![],
    }
}

fn run(cli: &Cli) -> unlearn_core::Result<()> {
    if let Command::Report { reports } = &cli.command {
        print!("{}", render_reports(reports)?);
        return Ok(());
    }
    let mut overrides = cli.overrides.clone();
    if let Some(w) = cli.workers {
        overrides.push(format!("workers={w}"));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    let pipeline = Pipeline::new(cfg);
    for stage in stages(&cli.command) {
        match pipeline.run(stage)? {
            Outcome::Ran => eprintln!("{stage}: done"),
            Outcome::Skipped => eprintln!("{stage}: up to date"),
        }
    }
    if matches!(cli.command, Command::Eval | Command::All) {
        let text = pipeline.config().path(&pipeline.config().paths.reports, "eval.txt");
        if let Ok(t) = std::fs::read_to_string(text) {
            print!("{t}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
