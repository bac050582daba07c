use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fastslow::config::{ExperimentConfig, ExperimentKind};
use fastslow::harness::{self, RunOptions, Summary};
use fastslow::Error;

/// Run a fast-slow particle experiment from a TOML config.
#[derive(Debug, Parser)]
#[command(name = "fastslow", version)]
struct Cli {
    /// simulate-multiscale | estimate-coefficients | simulate-sde | converge | eof | centering-check
    kind: String,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report directory; defaults to `output.dir`, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all available cores.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(cli: &Cli) -> Result<String, Error> {
    let requested = ExperimentKind::parse(&cli.kind)?;
    let cfg = ExperimentConfig::load(&cli.config)?;
    let kind = cfg.resolve_kind(Some(requested))?;
    let opts = RunOptions {
        seed: cli.seed,
        out_dir: cli.out.clone(),
        threads: cli.threads,
    };
    let (outcome, dir) = harness::run_experiment(&cfg, kind, &opts)?;
    Ok(format!(
        "{}: {} -> {}",
        kind.as_str(),
        headline(&outcome.summary),
        dir.display()
    ))
}

fn headline(summary: &Summary) -> String {
    match summary {
        Summary::Multiscale(s) => format!("{} members", s.stats.n),
        Summary::Coefficients(c) => format!("{} probes, truncation lag {}", c.table.probes.len(), c.truncation_lag),
        Summary::Sde(s) => format!("{} members", s.stats.n),
        Summary::Converge(r) => {
            let ks: Vec<String> = r.rows.iter().map(|row| format!("{:.4}", row.ks)).collect();
            format!("KS [{}], monotone", ks.join(", "))
        }
        Summary::Eof(e) => format!("principal angle {:.4} rad", e.principal_angle),
        Summary::Centering(c) => format!("residual {:.4e} <= threshold {:.4e}", c.residual, c.threshold),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let category = e.category();
            eprintln!("error[{category}]: {e}");
            ExitCode::from(category.exit_code() as u8)
        }
    }
}
