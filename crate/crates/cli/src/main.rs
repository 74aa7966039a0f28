use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use h2margin_cli::*;
use h2margin_core::opf::Mode;

#[derive(Parser)]
#[command(name = "h2margin", version, about = "Hydrogen production under a loading-margin requirement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Inputs {
    /// Case file (TOML); the bundled 39-bus case when omitted.
    #[arg(long)]
    case: Option<PathBuf>,
    /// Hourly profile CSV; the bundled 24-hour profile when omitted.
    #[arg(long)]
    profiles: Option<PathBuf>,
}

#[derive(Args)]
struct SolveFlags {
    #[arg(long, default_value = "allocate")]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of perturbed solver starts.
    #[arg(long, default_value_t = 1)]
    starts: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one scenario.
    Run {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        solve: SolveFlags,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        lm: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Solve an (alpha, lm) grid and write the summary tables.
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        solve: SolveFlags,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
        alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.15,0.2,0.25,0.3")]
        lm: Vec<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Concurrent alpha groups (0 = all cores).
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Re-certify a saved solution with Newton and the continuation power flow.
    Verify {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        solution: PathBuf,
    },
    /// Print a summary of a case.
    CaseInfo {
        #[command(flatten)]
        inputs: Inputs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            inputs,
            solve,
            alpha,
            lm,
            out,
        } => {
            let (case, profiles) = load_inputs(inputs.case.as_deref(), inputs.profiles.as_deref())?;
            let spec = RunSpec {
                alpha,
                lm,
                mode: solve.mode,
                seed: solve.seed,
                starts: solve.starts,
            };
            let (sol, report) = solve_certified(&case, &profiles, &spec, None)?;
            let hash = config_hash(&case, &profiles, &spec);
            for p in write_scenario_outputs(&out, &sol, &case, &hash)? {
                println!("wrote {}", p.display());
            }
            println!("status {}  TH {:.1} kg", sol.status, sol.total_hydrogen);
            for a in &sol.p2h_sizing {
                println!("  bus {:>3}  {:8.1} MW", a.bus, a.size_mw);
            }
            print!("{}", report?.to_text());
            Ok(if sol.converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Sweep {
            inputs,
            solve,
            alpha,
            lm,
            out,
            workers,
        } => {
            let (case, profiles) = load_inputs(inputs.case.as_deref(), inputs.profiles.as_deref())?;
            let spec = SweepSpec {
                alpha_values: alpha,
                lm_values: lm,
                mode: solve.mode,
                seed: solve.seed,
                starts: solve.starts,
                workers,
            };
            let result = run_sweep(&spec, &case, &profiles)?;
            for p in write_sweep_tables(&out, &result)? {
                println!("wrote {}", p.display());
            }
            print!("{}", th_table(&result)?);
            let all_ok = result.cells.iter().all(|c| {
                c.solution.as_ref().is_some_and(|s| s.converged) && c.verification.as_ref().is_some_and(|v| v.pass)
            });
            Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Verify { inputs, solution } => {
            let (case, profiles) = load_inputs(inputs.case.as_deref(), inputs.profiles.as_deref())?;
            let sol = read_solution(&solution)?;
            let report = verify_solution(&sol, &case, &profiles)?;
            print!("{}", report.to_text());
            Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(3) })
        }
        Command::CaseInfo { inputs } => {
            let (case, _) = load_inputs(inputs.case.as_deref(), inputs.profiles.as_deref())?;
            print!("{}", case_info(&case));
            Ok(ExitCode::SUCCESS)
        }
    }
}
