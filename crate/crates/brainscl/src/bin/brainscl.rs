use std::path::PathBuf;
use std::process::ExitCode;

use brainscl::stages::{self, Context};
use brainscl::{AppError, AppResult, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "brainscl", version, about = "Subtype-guided contrastive learning on brain connectivity")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides paths.workdir.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Recompute stages even when their outputs are current.
    #[arg(long, global = true)]
    force: bool,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    single_thread: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate the cohort manifest and write the cohort cache.
    Ingest,
    /// Generate the synthetic cohort described by [synth].
    Synth,
    /// Fit the structure learner per fold.
    Structures,
    /// Per-class structure and text similarity views.
    Views,
    /// Fuse the views per class.
    Fuse,
    /// Spectral subtype discovery.
    Subtype,
    /// Subtype prototype graphs.
    Prototype,
    /// Contrastive training per fold.
    Train,
    /// Score held-out subjects and write metrics.csv.
    Evaluate,
    /// Every stage from ingest to evaluate.
    Pipeline,
    /// Variant grid over seeds, written to ablation/table.csv.
    Ablate,
    /// Top regions, 2-D exports and loss traces.
    Report,
    /// Validate and print the resolved config.
    Config {
        /// Print the full default config instead.
        #[arg(long)]
        print_defaults: bool,
    },
}

fn load_config(cli: &Cli) -> AppResult<RunConfig> {
    let path = cli.config.as_ref().ok_or_else(|| AppError::Usage("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> AppResult<()> {
    if let Command::Config { print_defaults } = cli.command {
        if print_defaults {
            print!("{}", RunConfig::default().to_toml());
        } else {
            let cfg = load_config(&cli)?;
            cfg.validate()?;
            print!("{}", cfg.to_toml());
        }
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    let ctx = Context::new(cfg, cli.workdir.clone(), cli.force, cli.single_thread)?;
    match cli.command {
        Command::Ingest => stages::cmd_ingest(&ctx)?,
        Command::Synth => {
            let p = stages::cmd_synth(&ctx)?;
            println!("{}", p.display());
        }
        Command::Structures => stages::cmd_structures(&ctx)?,
        Command::Views => stages::cmd_views(&ctx)?,
        Command::Fuse => stages::cmd_fuse(&ctx)?,
        Command::Subtype => stages::cmd_subtype(&ctx)?,
        Command::Prototype => stages::cmd_prototype(&ctx)?,
        Command::Train => stages::cmd_train(&ctx)?,
        Command::Evaluate => stages::cmd_evaluate(&ctx)?,
        Command::Pipeline => {
            let p = stages::cmd_pipeline(&ctx)?;
            println!("{}", p.display());
        }
        Command::Ablate => {
            stages::cmd_ablate(&ctx)?;
            println!("{}", ctx.wd.path("ablation/table.csv").display());
        }
        Command::Report => {
            let p = stages::cmd_report(&ctx)?;
            println!("{}", p.display());
        }
        Command::Config { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
