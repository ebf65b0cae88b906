use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use centralflows::harness::{
    expand, invariant_checks, run_check, run_experiment, run_sweep, set_dotted, CheckOutcome, ExperimentConfig,
    FlowKind, Variation,
};

#[derive(Parser)]
#[command(name = "centralflows", version, about = "Run discrete optimizers side by side with their central flows")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and write <name>.csv and <name>.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `output.dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated subset of stable,central,stationary,igr.
        #[arg(long, value_delimiter = ',')]
        flows: Option<Vec<FlowKind>>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the cartesian product of `--vary` settings in parallel.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted key and values, e.g. `method.eta=0.01,0.02`. Repeatable.
        #[arg(long, required = true)]
        vary: Vec<Variation>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant suite on the canonical configs.
    Check {
        #[arg(long, default_value = "check_out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn report(outcomes: &[CheckOutcome]) -> bool {
    for o in outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    outcomes.iter().all(|o| o.passed)
}

fn load(path: &PathBuf) -> Result<toml::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Run { config, out, seed, flows, steps } => {
            let mut val = load(&config)?;
            if let Some(s) = seed {
                set_dotted(&mut val, "run.seed", &s.to_string())?;
            }
            if let Some(n) = steps {
                set_dotted(&mut val, "run.steps", &n.to_string())?;
            }
            if let Some(f) = flows {
                let names: Vec<String> = f.iter().map(|k| format!("\"{}\"", k.name())).collect();
                set_dotted(&mut val, "run.flows", &format!("[{}]", names.join(",")))?;
            }
            let cfg = ExperimentConfig::from_value(val)?;
            let e = run_experiment(&cfg)?;
            let (csv, json) = e.emit(out.as_deref().unwrap_or(&cfg.output.dir))?;
            println!("wrote {} ({} rows) and {}", csv.display(), e.records.len(), json.display());
            if let Some(t) = &e.termination {
                println!("discrete run stopped: {t}");
            }
            for ev in &e.flow_events {
                println!("flow event: {ev}");
            }
            Ok(report(&invariant_checks(&e)))
        }
        Cmd::Sweep { config, vary, out } => {
            let cfgs = expand(&load(&config)?, &vary)?;
            let mut ok = true;
            for (c, r) in cfgs.iter().zip(run_sweep(&cfgs, out.as_deref())) {
                match r {
                    Ok(e) => ok &= report(&invariant_checks(&e)),
                    Err(err) => {
                        println!("FAIL {}: {err}", c.output.name);
                        ok = false;
                    }
                }
            }
            Ok(ok)
        }
        Cmd::Check { out, seed } => {
            let r = run_check(seed, &out)?;
            if r.outcomes.is_empty() {
                bail!("no checks ran");
            }
            Ok(report(&r.outcomes))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
