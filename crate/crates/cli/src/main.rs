use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use sandwich_core::config::{parse_config, Mode};
use sandwich_core::harness::{emit_traces, refinement_study, run_scenario, validate_scenario};

#[derive(Parser)]
#[command(name = "sandwich", version, about = "Safe boundary control of a sandwiched hyperbolic PDE system")]
struct Cli {
    /// Log progress (-v) or everything (-vv).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its traces.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// open-loop, nominal or adaptive; defaults to the file's mode.
        #[arg(long)]
        mode: Option<Mode>,
        /// Output directory; defaults to the file's `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rerun with the grid halved per level and report self-convergence.
    Refine {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Check the standing assumptions and gain thresholds.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Simulate { config, mode, out, nx, dt, horizon, seed } => {
            let mut cfg = parse_config(&config)?;
            if let Some(m) = mode {
                cfg.run.mode = m;
            }
            if let Some(v) = nx {
                cfg.grid.nx = v;
            }
            if let Some(v) = dt {
                cfg.grid.dt = v;
            }
            if let Some(v) = horizon {
                cfg.run.horizon = v;
            }
            if let Some(v) = seed {
                cfg.run.seed = v;
            }
            if out.is_some() {
                cfg.output.dir = out;
            }
            let Some(dir) = cfg.output.dir.clone() else {
                bail!("no output directory: pass --out or set output.dir");
            };
            cfg.check()?;
            let start = Instant::now();
            let result = run_scenario(&cfg)?;
            emit_traces(&result, &dir).with_context(|| format!("writing traces to {}", dir.display()))?;
            let s = &result.summary;
            println!("mode {} nx {} dt {} steps {} ({:.1} s)", s.mode, s.nx, s.dt, s.steps, start.elapsed().as_secs_f64());
            if let Some(tf) = s.t_f {
                println!("parameters identified at t = {tf:.4}: {:?}", s.theta_hat);
            }
            println!("norm^2: {:.4e} -> {:.4e}", s.norm2_initial, s.norm2_final);
            if let Some(m) = &s.margins {
                println!("min y1 = {:.4e} at t = {:.3}", m.min_y1.0, m.min_y1.1);
                if m.diverged {
                    println!("state diverged");
                }
                for v in &m.violations {
                    println!("margin violation: {v}");
                }
            }
            println!("traces in {}", dir.display());
            if let Some(f) = &s.fault {
                eprintln!("run faulted: {f}");
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Refine { config, levels, mode } => {
            let mut cfg = parse_config(&config)?;
            if let Some(m) = mode {
                cfg.run.mode = m;
            }
            let table = refinement_study(&cfg, levels)?;
            println!("{:>8} {:>12} {:>14} {:>14} {:>8}", "nx", "dt", "dy1", "dtheta", "order");
            for l in &table.levels {
                let f = |v: Option<f64>, w: usize| v.map_or(format!("{:>w$}", "-"), |x| format!("{x:>w$.4e}"));
                let order = l.order.map_or("-".to_string(), |o| format!("{o:.3}"));
                println!("{:>8} {:>12.4e} {} {} {:>8}", l.nx, l.dt, f(l.y1_diff, 14), f(l.theta_diff, 14), order);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config } => {
            let cfg = parse_config(&config)?;
            let report = validate_scenario(&cfg)?;
            for c in &report.checks {
                println!("{:4} {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(if report.all_passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
