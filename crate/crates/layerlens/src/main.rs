use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use layerlens::config::RunConfig;
use layerlens::pipeline;
use layerlens::Result;

/// Tokenwise-map decomposition of layer updates with resume-from-layer interventions.
#[derive(Parser)]
#[command(name = "layerlens", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides such as `--ranks=8,16` or `--toy.train_sequences=32`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dump of the bundled toy model's hidden states.
    Toygen(ConfigArgs),
    /// Fit maps, measure geometry, intervene and write reports.
    Run(ConfigArgs),
    /// Repeat the run over ranks or neighborhood sizes.
    Sweep(ConfigArgs),
    /// Summarize a dump directory or a map file.
    Inspect { path: PathBuf },
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Toygen(a) => {
            let cfg = RunConfig::load(a.config.as_deref(), &a.overrides)?;
            let out = pipeline::cmd_toygen(&cfg)?;
            println!("wrote dump to {}", out.display());
        }
        Command::Run(a) => {
            let cfg = RunConfig::load(a.config.as_deref(), &a.overrides)?;
            let outcome = pipeline::cmd_run(&cfg)?;
            for w in &outcome.report.warnings {
                eprintln!("warning: {w}");
            }
            for s in &outcome.report.sets {
                match &s.model {
                    Some(m) => println!(
                        "{}: mean Spearman rho {:.4} over {} layers",
                        s.tag, m.mean_rho, m.layers_used
                    ),
                    None => println!("{}: Spearman rho undefined on every layer", s.tag),
                }
            }
            println!("wrote report to {}", cfg.out.display());
        }
        Command::Sweep(a) => {
            let cfg = RunConfig::load(a.config.as_deref(), &a.overrides)?;
            let report = pipeline::cmd_sweep(&cfg)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {} sweep rows to {}", report.rows.len(), cfg.out.display());
        }
        Command::Inspect { path } => print!("{}", pipeline::inspect(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
