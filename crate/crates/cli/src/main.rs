use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use glowq::select::Metric;
use glowq_cli::config::SolveMode;
use glowq_cli::error::CliError;
use glowq_cli::pipeline::{self, RunLayout};
use glowq_cli::verify::run_suites;
use glowq_cli::{Overrides, PipelineConfig};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "glowq", version, about = "Group-shared low-rank correction of quantization error")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline config (JSON)
    #[arg(long, global = true, default_value = "configs/default.json")]
    config: PathBuf,

    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,

    #[arg(long, global = true, value_enum)]
    whiten: Option<Switch>,

    #[arg(long, global = true, value_enum)]
    metric: Option<MetricArg>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic weights and population covariances
    Gen,
    /// Group-wise integer quantization of every weight
    Quantize,
    /// Shrunk covariance estimate per input site
    Calibrate,
    /// Shared factors for every correction unit
    Solve,
    /// Selective-restore sweeps
    Sweep,
    /// Cost ledgers for layerwise, cached and selective correction
    Simulate,
    /// Energy curves, spectrum fits and alignment heatmaps
    Analyze,
    /// Runs the invariant suites; nonzero exit on any failure
    Verify {
        /// Also check the factor files in this directory
        #[arg(long)]
        factors: Option<PathBuf>,
    },
    /// gen, quantize, calibrate, solve, sweep, simulate and analyze in turn
    Run,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Exact,
    Rsvd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Ec,
    Ner,
    Fro,
    Cos,
    Order,
    All,
}

impl MetricArg {
    fn metrics(self) -> Vec<Metric> {
        match self {
            Self::Ec => vec![Metric::EnergyCapture],
            Self::Ner => vec![Metric::Ner],
            Self::Fro => vec![Metric::Frobenius],
            Self::Cos => vec![Metric::Cosine],
            Self::Order => vec![Metric::LayerOrder],
            Self::All => Metric::ALL.to_vec(),
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn thread_pool() {
    let Some(n) = std::env::var("GLOWQ_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) else {
        return;
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
        log::warn!("GLOWQ_THREADS ignored: {e}");
    }
}

fn verify(cfg: &PipelineConfig, factors: Option<&Path>) -> Result<(), CliError> {
    let report = run_suites(cfg, factors)?;
    let layout = RunLayout::new(&cfg.output_dir);
    glowq::io::write_json(&layout.verify_report(), &report)
        .map_err(|source| CliError::Core { context: "writing verify report".into(), source })?;
    for s in &report.suites {
        let mark = if s.passed { "PASS" } else { "FAIL" };
        println!("{mark} {:<38} measured {:.3e} tol {:.1e}  {}", s.name, s.measured, s.tolerance, s.detail);
    }
    if report.passed {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|s| s.name.as_str()).collect();
        Err(CliError::Invariant(names.join(", ")))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        mode: cli.mode.map(|m| match m {
            ModeArg::Exact => SolveMode::Exact,
            ModeArg::Rsvd => SolveMode::Rsvd,
        }),
        whiten: cli.whiten.map(|w| matches!(w, Switch::On)),
        metrics: cli.metric.map(MetricArg::metrics),
    };
    let cfg = PipelineConfig::load(&cli.config)?.apply(&overrides);
    cfg.validate()?;
    log::info!("config {} seed {} -> {}", cli.config.display(), cfg.seed, cfg.output_dir.display());
    match cli.command {
        Command::Gen => print_json(&pipeline::cmd_gen(&cfg)?),
        Command::Quantize => print_json(&pipeline::cmd_quantize(&cfg)?),
        Command::Calibrate => print_json(&pipeline::cmd_calibrate(&cfg)?),
        Command::Solve => print_json(&pipeline::cmd_solve(&cfg)?),
        Command::Sweep => {
            for c in pipeline::cmd_sweep(&cfg)? {
                let elbow = c.elbow_fraction.map_or("-".to_string(), |f| f.to_string());
                println!("{:<6} auc {:.6e} elbow {elbow}", c.metric.as_str(), c.auc);
            }
            Ok(())
        }
        Command::Simulate => print_json(&pipeline::cmd_simulate(&cfg)?.totals),
        Command::Analyze => {
            let s = pipeline::cmd_analyze(&cfg)?;
            println!("whitening beats unweighted factors on {} of {} units", s.whitening_wins, s.units);
            Ok(())
        }
        Command::Verify { factors } => verify(&cfg, factors.as_deref()),
        Command::Run => {
            pipeline::cmd_gen(&cfg)?;
            pipeline::cmd_quantize(&cfg)?;
            pipeline::cmd_calibrate(&cfg)?;
            pipeline::cmd_solve(&cfg)?;
            pipeline::cmd_sweep(&cfg)?;
            pipeline::cmd_simulate(&cfg)?;
            pipeline::cmd_analyze(&cfg)?;
            println!("run written to {}", cfg.output_dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    thread_pool();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
