//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 every run diverged,
//! 4 a validation check failed, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dzgt::harness::{
    centralized_baseline, load_plan_with, run_experiment, validate_suite, write_outputs, ExperimentResult, Metric,
    Overrides, BASELINE_LABEL,
};
use dzgt::network::{build_topology, metropolis_weights, Topology, TopologyParams};
use dzgt::Error;

#[derive(Parser)]
#[command(name = "dzgt", version, about = "Distributed zeroth-order gradient tracking for stochastic MPECs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every topology and sample path of a plan and write the results.
    Run(PlanArgs),
    /// Print lambda_W of the Metropolis weights of a topology.
    Lambda {
        #[arg(long)]
        topology: Topology,
        #[arg(long, default_value_t = 20)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        sparse_degree: Option<f64>,
        #[arg(long)]
        er_probability: Option<f64>,
    },
    /// Run the built-in invariant checks.
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run only the single-agent baseline of a plan.
    Baseline(PlanArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Plan file (TOML).
    plan: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated topologies (overrides `topologies`).
    #[arg(long, value_delimiter = ',')]
    topology: Option<Vec<String>>,
    /// `single_stage` or `two_stage` (overrides `mode`).
    #[arg(long)]
    mode: Option<String>,
}

impl PlanArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out_dir: self.out.clone(),
            topologies: self.topology.clone(),
            mode: self.mode.clone(),
        }
    }
}

fn summarize(result: &ExperimentResult) {
    for label in result.labels() {
        let last = |metric| result.mean_series(&label, metric).last().map(|p| p.mean);
        let failed = result.outcomes(&label).filter(|r| r.error.is_some()).count();
        println!(
            "{label:<12} lambda_W={:<8.4} final consensus={:<12} final objective={:<12} failed={failed}",
            result.outcomes(&label).next().map_or(f64::NAN, |r| r.lambda_w),
            last(Metric::ConsensusError).map_or("-".into(), |v| format!("{v:.4e}")),
            last(Metric::Objective).map_or("-".into(), |v| format!("{v:.6}")),
        );
    }
}

fn run(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::Run(args) => {
            let plan = load_plan_with(&args.plan, &args.overrides())?;
            let result = run_experiment(&plan)?;
            write_outputs(&result, &plan.out_dir)?;
            summarize(&result);
            println!("wrote {}", plan.out_dir.display());
            if result.all_failed() {
                for r in &result.runs {
                    eprintln!("{} path {}: {}", r.label, r.path, r.error.as_deref().unwrap_or(""));
                }
                return Ok(ExitCode::from(3));
            }
        }
        Command::Baseline(args) => {
            let plan = load_plan_with(&args.plan, &args.overrides())?;
            let start = std::time::Instant::now();
            let baseline = centralized_baseline(&plan)?;
            let all_failed = baseline.iter().all(|r| r.error.is_some());
            let result = ExperimentResult {
                plan: dzgt::harness::ExperimentPlan { topologies: Vec::new(), ..plan.clone() },
                runs: Vec::new(),
                baseline,
                wall_clock_seconds: start.elapsed().as_secs_f64(),
            };
            write_outputs(&result, &plan.out_dir)?;
            summarize(&result);
            println!("wrote {}", plan.out_dir.display());
            if all_failed {
                eprintln!("every {BASELINE_LABEL} run failed");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Lambda { topology, m, seed, sparse_degree, er_probability } => {
            let d = TopologyParams::default();
            let params = TopologyParams {
                seed,
                sparse_degree: sparse_degree.unwrap_or(d.sparse_degree),
                er_probability: er_probability.unwrap_or(d.er_probability),
            };
            let w = metropolis_weights(&build_topology(topology, m, &params)?)?;
            // Values below the solver tolerance print as an exact zero.
            let lambda = if w.lambda_w() < 1e-12 { 0.0 } else { w.lambda_w() };
            println!("{lambda:?}");
        }
        Command::Validate { seed } => {
            let checks = validate_suite(seed);
            let mut ok = true;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            if !ok {
                return Ok(ExitCode::from(4));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
