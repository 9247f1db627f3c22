use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use iovsim::scenario::{
    self, load_scenario, parse_scenario, run_scenario, verify_trace, RunOverrides, ScenarioError,
};

#[derive(Parser)]
#[command(name = "iovsim", about = "Two-layer IoV framework simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trace, metrics, genesis, and decision logs.
    Run {
        /// Scenario JSON file.
        #[arg(long)]
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory root (one subdirectory per scenario).
        #[arg(long, env = "IOVSIM_OUT", default_value = "out")]
        out: PathBuf,
        /// Worker threads (used by `suite`; a single run is sequential).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-check the global invariants of a previously written trace.
    Verify {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Run every bundled scenario and print one verdict per line.
    Suite {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "IOVSIM_OUT", default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            jobs: _,
        } => {
            let sc = match load_scenario(&scenario) {
                Ok(sc) => sc,
                Err(e) => {
                    eprintln!("iovsim: {e}");
                    return ExitCode::from(2);
                }
            };
            let overrides = RunOverrides {
                seed,
                out_dir: Some(out),
            };
            match run_scenario(&sc, &overrides) {
                Ok(artifacts) => {
                    for e in &artifacts.report.expectations {
                        println!(
                            "{} {} {:?} {} (actual {})",
                            if e.pass { "ok  " } else { "FAIL" },
                            e.metric,
                            e.op,
                            e.value,
                            e.actual
                        );
                    }
                    println!(
                        "{}: {} (trace: {})",
                        sc.name,
                        if artifacts.report.pass { "PASS" } else { "FAIL" },
                        artifacts.trace_path.display()
                    );
                    if artifacts.report.pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("iovsim: run failed: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Verify { trace } => match verify_trace(&trace) {
            Ok(()) => {
                println!("{}: ok", trace.display());
                ExitCode::SUCCESS
            }
            Err(scenario::VerifyError::Verdict(v)) => {
                eprintln!("iovsim: {v}");
                ExitCode::from(1)
            }
            Err(e) => {
                eprintln!("iovsim: {e}");
                ExitCode::from(2)
            }
        },
        Command::Suite { seed, out, jobs } => {
            let scenarios: Vec<_> = scenario::bundled_scenarios();
            let jobs = jobs.max(1);
            let results = std::sync::Mutex::new(vec![None; scenarios.len()]);
            let next = std::sync::atomic::AtomicUsize::new(0);
            std::thread::scope(|scope| {
                for _ in 0..jobs.min(scenarios.len()) {
                    scope.spawn(|| loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                        if i >= scenarios.len() {
                            break;
                        }
                        let (name, text) = scenarios[i];
                        let outcome = run_one(name, text, seed, &out);
                        results.lock().unwrap()[i] = Some(outcome);
                    });
                }
            });
            let mut all_pass = true;
            for (i, (name, _)) in scenarios.iter().enumerate() {
                let outcome = results.lock().unwrap()[i].take().unwrap();
                match outcome {
                    Ok(()) => println!("PASS {name}"),
                    Err(reason) => {
                        all_pass = false;
                        println!("FAIL {name}: {reason}");
                    }
                }
            }
            if all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run_one(name: &str, text: &str, seed: Option<u64>, out: &Path) -> Result<(), String> {
    let sc = match parse_scenario(text) {
        Ok(sc) => sc,
        Err(ScenarioError::Validation(v)) => return Err(format!("invalid: {v}")),
        Err(e) => return Err(e.to_string()),
    };
    let overrides = RunOverrides {
        seed,
        out_dir: Some(out.to_path_buf()),
    };
    let artifacts = run_scenario(&sc, &overrides).map_err(|e| e.to_string())?;
    verify_trace(&artifacts.trace_path).map_err(|e| e.to_string())?;
    if !artifacts.report.pass {
        let failed: Vec<String> = artifacts
            .report
            .expectations
            .iter()
            .filter(|e| !e.pass)
            .map(|e| format!("{} {:?} {} (actual {})", e.metric, e.op, e.value, e.actual))
            .collect();
        return Err(format!("expectations not met: {}", failed.join(", ")));
    }
    let _ = name;
    Ok(())
}
