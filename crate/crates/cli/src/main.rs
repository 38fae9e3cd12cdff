use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ibvs_mpc_cli::{compare, parse_controller_list, run, ControllerSpec, Overrides, RunSpec};

#[derive(Parser)]
#[command(name = "ibvs-sim", version, about = "Run and compare visual servoing controller trials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the trials described by a run document.
    Run {
        spec: PathBuf,
        /// Base seed; repetition i uses seed + i.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated list, e.g. `IBVS,MPC2,MPC2+KF`.
        #[arg(long, value_parser = parse_controllers)]
        controllers: Option<ControllerList>,
    },
    /// Check a run document and report every invalid field.
    Validate { spec: PathBuf },
    /// Recompute comparison.csv from the trial summaries in an output directory.
    Compare { outdir: PathBuf },
}

#[derive(Clone)]
struct ControllerList(Vec<ControllerSpec>);

fn parse_controllers(s: &str) -> Result<ControllerList, String> {
    parse_controller_list(s).map(ControllerList)
}

fn main() -> ExitCode {
    // Usage errors count as configuration errors (exit 1); exit 2 is reserved
    // for diverged trials.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run {
            spec,
            seed,
            reps,
            out,
            controllers,
        } => RunSpec::load(&spec).and_then(|mut doc| {
            Overrides {
                seed,
                reps,
                out,
                controllers: controllers.map(|c| c.0),
            }
            .apply(&mut doc);
            let report = run(&doc)?;
            for row in &report.comparison {
                let time = row.time_s.map(|t| format!("{t:.3}")).unwrap_or_else(|| "-".into());
                println!(
                    "{:<8} time {:>7}  rmse_error {:.4}  rmse_joint {:.4}",
                    row.controller, time, row.rmse_error, row.rmse_joint
                );
            }
            println!("wrote {}", doc.run.output.display());
            Ok(())
        }),
        Command::Validate { spec } => RunSpec::load(&spec).and_then(|doc| {
            let v = doc.violations();
            if v.is_empty() {
                println!("ok");
                Ok(())
            } else {
                Err(ibvs_mpc_cli::CliError::Invalid(v))
            }
        }),
        Command::Compare { outdir } => compare(&outdir).map(|rows| {
            for row in rows {
                println!("{:<8} trials {}  rmse_joint {:.4}", row.controller, row.trials, row.rmse_joint);
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
