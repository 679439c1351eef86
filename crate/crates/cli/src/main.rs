use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use hbeacon_core::analysis::{curves_to_csv, border_sweep, SweepParams};
use hbeacon_core::protocol::optimal_tc;
use hbeacon_core::sim::{metrics_csv, run_scenario, RunOptions, ScenarioConfig};

#[derive(Parser)]
#[command(name = "hbeacon", version, about = "Batteryless beacon simulator and analysis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its metrics.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario seed and the SEED environment variable.
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-event trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Closed-form trade-off curves.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Power-optimal ADC poll period, s.
    OptimalTc {
        /// Beacon period, s.
        #[arg(long)]
        tm: f64,
        /// ADC sample duration, s.
        #[arg(long)]
        td: f64,
        /// ADC power, W.
        #[arg(long)]
        pd: f64,
        /// Receive power, W.
        #[arg(long)]
        prx: f64,
    },
    /// Check a scenario file and list every problem.
    Validate { scenario: PathBuf },
}

#[derive(Subcommand)]
enum Analysis {
    /// Accuracy and normalized charging period for each border choice on a
    /// line of `r` anchors.
    #[command(alias = "fig9")]
    BorderSweep {
        #[arg(long)]
        r: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    /// Bad flags, paths or scenario contents; exit 2.
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

use Failure::{Runtime, Usage};

fn load(path: &Path) -> std::result::Result<ScenarioConfig, Failure> {
    let cfg = ScenarioConfig::from_path(path).map_err(|e| Usage(anyhow::Error::new(e)))?;
    cfg.validate().map_err(|e| Usage(anyhow::Error::new(e).context(format!("in {}", path.display()))))?;
    Ok(cfg)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("SEED") {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("SEED={s:?} is not an integer"))?)),
        Err(_) => Ok(None),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("undefined".to_string(), |x| format!("{x:.4}"))
}

fn run(cmd: Cmd) -> std::result::Result<(), Failure> {
    match cmd {
        Cmd::Run { scenario, seed, out, trace } => {
            let mut cfg = load(&scenario)?;
            if let Some(s) = seed.or(env_seed().map_err(Usage)?) {
                cfg.seed = s;
            }
            let res = run_scenario(&cfg, RunOptions { trace: trace.is_some() }).map_err(|e| Runtime(e.into()))?;
            write_out(out.as_deref(), &metrics_csv(&res.metrics, &res.rounds, &res.nodes)).map_err(Usage)?;
            if let (Some(p), Some(t)) = (trace.as_deref(), res.trace.as_deref()) {
                write_out(Some(p), t).map_err(Usage)?;
            }
            let s = &res.metrics.summary;
            let name = if cfg.name.is_empty() { scenario.display().to_string() } else { cfg.name.clone() };
            eprintln!(
                "{name}: rounds={} prr={:.4} pda={} le_m={} mean_cp_s={}",
                s.rounds,
                s.prr,
                fmt_opt(s.pda),
                fmt_opt(s.le_m),
                fmt_opt(s.mean_cp_s)
            );
            Ok(())
        }
        Cmd::Analyze { what: Analysis::BorderSweep { r, out } } => {
            if r < 2 {
                return Err(Usage(anyhow!("--r must be at least 2")));
            }
            let pts = border_sweep(r, &SweepParams::line_default()).map_err(|e| Runtime(e.into()))?;
            write_out(out.as_deref(), &curves_to_csv(&pts)).map_err(Usage)
        }
        Cmd::OptimalTc { tm, td, pd, prx } => {
            let t = optimal_tc(tm, td, pd, prx).map_err(|e| Usage(e.into()))?;
            println!("{t}");
            Ok(())
        }
        Cmd::Validate { scenario } => {
            load(&scenario)?;
            println!("{}: ok", scenario.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
