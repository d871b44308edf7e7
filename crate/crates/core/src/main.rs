use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use llmnet_core::cli::{self, emit_plotdata, run_experiment, ExperimentConfig, ExperimentKind};
use llmnet_core::Error;

/// Truthfulness dynamics in networks of language-model agents.
///
/// Every flag can also be set through an `LLMNET_*` environment variable.
/// Flags win over the environment, which wins over the config file.
/// Exit codes: 0 ok, 2 config error, 3 runtime error.
#[derive(Parser, Debug)]
#[command(name = "llmnet", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML experiment config.
    #[arg(long, global = true, env = "LLMNET_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true, env = "LLMNET_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "LLMNET_OUT")]
    out: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, env = "LLMNET_JOBS")]
    jobs: Option<usize>,
    /// Only log errors.
    #[arg(long, global = true, env = "LLMNET_QUIET")]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Agent-based simulation on a generated or loaded network.
    Simulate,
    /// Fast mean-field ODE.
    Meanfield,
    /// Reduced slow system next to a coupled two-scale run.
    Reduce,
    /// Coupled vs reduced error over a list of ε.
    EpsilonScan,
    /// Algorithm 1 vs static vs random rewiring.
    ReconfigBench,
    /// Monte Carlo check of the truthful in-link guarantee.
    Prop1,
    /// ρ_T, ρ_H and token cost over a control grid.
    Sweep,
    /// SPSA on the control.
    Optimize,
    /// Simulation vs mean-field deviation across network sizes.
    Concentration,
    /// Tidy plot tables from a finished run directory.
    Plotdata { run_dir: PathBuf },
    /// Print the default config for an experiment kind.
    Defaults { kind: String },
}

impl Command {
    fn kind(&self) -> Option<ExperimentKind> {
        Some(match self {
            Command::Simulate => ExperimentKind::Simulate,
            Command::Meanfield => ExperimentKind::Meanfield,
            Command::Reduce => ExperimentKind::Reduce,
            Command::EpsilonScan => ExperimentKind::EpsilonScan,
            Command::ReconfigBench => ExperimentKind::ReconfigBench,
            Command::Prop1 => ExperimentKind::Prop1,
            Command::Sweep => ExperimentKind::Sweep,
            Command::Optimize => ExperimentKind::Optimize,
            Command::Concentration => ExperimentKind::Concentration,
            Command::Plotdata { .. } | Command::Defaults { .. } => return None,
        })
    }
}

fn effective_config(kind: ExperimentKind, g: &Global) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &g.config {
        Some(p) => {
            let cfg = ExperimentConfig::load(p)?;
            if cfg.kind != kind {
                return Err(Error::Config(format!(
                    "{} declares kind {:?} but the subcommand is {:?}",
                    p.display(),
                    cfg.kind.name(),
                    kind.name()
                )));
            }
            cfg
        }
        None => ExperimentConfig::new(kind),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = Some(o.clone());
    }
    if let Some(j) = g.jobs {
        cfg.jobs = Some(j);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.cmd {
        Command::Plotdata { run_dir } => {
            for p in emit_plotdata(run_dir)? {
                if !cli.global.quiet {
                    println!("{}", p.display());
                }
            }
        }
        Command::Defaults { kind } => print!("{}", ExperimentConfig::defaults_toml(kind.parse()?)),
        cmd => {
            let kind = cmd.kind().expect("experiment subcommand");
            let cfg = effective_config(kind, &cli.global)?;
            let m = run_experiment(&cfg)?;
            if !cli.global.quiet {
                println!("{} done in {:.1}s -> {}", kind, m.wall_time_secs, cfg.out_dir().display());
                println!("{}", m.summary);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
