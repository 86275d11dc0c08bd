//! Experiment orchestration: plans, multi-path runs, metrics and output.
//!
//! An experiment runs every `(topology, sample path)` pair of a plan, plus
//! an optional single-agent baseline per path, records metrics at evenly
//! spaced checkpoints and writes one CSV per `(label, metric)`.
//!
//! Seeds are derived from the master seed and the path index only. All
//! topologies of a path share the run seed and the evaluation seed, so their
//! curves differ only through the network.

mod config;
mod validate;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::exec::map_indexed;
use crate::gt_core::{self, Record, RunConfig, SwarmState};
use crate::network::{build_topology, matrix_to_text, metropolis_weights, MixingMatrix, Topology, TopologyParams};
use crate::problems::{
    bilevel_benchmark, estimate_implicit_objective, toy_mpec, try_cournot_game, CournotParams, LowerEval,
    ObjectiveEval, Problem,
};
use crate::rng::{Purpose, StreamKey};
use crate::smoothing::{smoothed_grad_norm_mc, Welford};
use crate::{Error, Result};

pub use crate::gt_core::consensus_error;
pub use config::{
    flatten, load_flat, load_plan, load_plan_with, parse_plan, plan_from_map, FlatConfig, Overrides, KNOWN_KEYS,
    REQUIRED_KEYS,
};
pub use validate::{validate_suite, Check};

/// Label used for the single-agent baseline in outputs.
pub const BASELINE_LABEL: &str = "centralized";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Toy,
    #[default]
    Bilevel,
    Cournot,
}

impl FromStr for ProblemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "toy" => Ok(ProblemKind::Toy),
            "bilevel" => Ok(ProblemKind::Bilevel),
            "cournot" => Ok(ProblemKind::Cournot),
            other => Err(Error::Config(format!("unknown problem `{other}` (toy, bilevel, cournot)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub p_followers: usize,
    pub cournot: CournotParams,
}

impl ProblemSpec {
    pub fn new(kind: ProblemKind) -> Self {
        ProblemSpec { kind, p_followers: 20, cournot: CournotParams::default() }
    }

    pub fn build(&self) -> Result<Box<dyn Problem>> {
        Ok(match self.kind {
            ProblemKind::Toy => Box::new(toy_mpec()),
            ProblemKind::Bilevel => Box::new(bilevel_benchmark()),
            ProblemKind::Cournot => {
                Box::new(try_cournot_game(self.p_followers, &self.cournot).map_err(|e| Error::Config(e.to_string()))?)
            }
        })
    }
}

/// How checkpoints are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    /// Number of checkpoints, including `k = 0`.
    pub epochs: usize,
    pub lower: LowerEval,
    /// Noise samples per agent for the objective estimate.
    pub eval_samples: usize,
    /// Directions for the smoothed-gradient-norm estimate (0 disables it).
    pub grad_norm_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub problem: ProblemSpec,
    pub m: usize,
    pub topologies: Vec<Topology>,
    /// Random-family parameters; the seed is derived per path.
    pub topology_params: TopologyParams,
    pub sample_paths: usize,
    /// Shared run settings; `master_seed` is the plan's master seed.
    pub run: RunConfig,
    pub eval: EvalPlan,
    /// Also run the single-agent baseline on every path.
    pub baseline: bool,
    pub out_dir: PathBuf,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.m < 2 {
            return bad(format!("need at least 2 agents, got {}", self.m));
        }
        if self.sample_paths == 0 {
            return bad("sample_paths must be at least 1".into());
        }
        if self.topologies.is_empty() {
            return bad("no topologies".into());
        }
        if self.run.horizon_k == 0 || self.eval.epochs == 0 || self.eval.epochs > self.run.horizon_k {
            return bad(format!("need 1 <= epochs <= K, got epochs={} K={}", self.eval.epochs, self.run.horizon_k));
        }
        if self.eval.eval_samples == 0 || self.eval.lower == LowerEval::Iterative(0) {
            return bad("evaluation needs at least one sample and one lower iteration".into());
        }
        self.run.validate().map_err(|e| Error::Config(e.to_string()))?;
        let problem = self.problem.build()?;
        if problem.stage() != self.run.mode {
            return bad(format!("mode {} does not match the {} problem", self.run.mode, problem.stage()));
        }
        Ok(())
    }

    /// Seed of the gradient-tracking run on sample path `path`.
    pub fn run_seed(&self, path: usize) -> u64 {
        StreamKey::new(self.run.master_seed, Purpose::RunSeed).index(path).seed()
    }

    /// Seed of the random graphs on sample path `path`.
    pub fn graph_seed(&self, path: usize) -> u64 {
        StreamKey::new(self.run.master_seed, Purpose::Graph).index(path).seed()
    }

    /// Seed of the checkpoint evaluation on sample path `path`.
    pub fn eval_seed(&self, path: usize) -> u64 {
        StreamKey::new(self.run.master_seed, Purpose::Evaluation).index(path).seed()
    }

    pub fn checkpoints(&self) -> Vec<usize> {
        checkpoints(self.run.horizon_k, self.eval.epochs)
    }
}

/// `epochs` evenly spaced iterations in `0..=horizon`, always including 0
/// and, when `epochs >= 2`, the horizon.
pub fn checkpoints(horizon: usize, epochs: usize) -> Vec<usize> {
    if epochs <= 1 {
        return vec![0];
    }
    let mut ks: Vec<usize> =
        (0..epochs).map(|j| ((j * horizon) as f64 / (epochs - 1) as f64).round() as usize).collect();
    ks.dedup();
    ks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ConsensusError,
    Objective,
    GradNorm,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::ConsensusError, Metric::Objective, Metric::GradNorm];

    pub fn name(self) -> &'static str {
        match self {
            Metric::ConsensusError => "consensus_error",
            Metric::Objective => "objective",
            Metric::GradNorm => "grad_norm",
        }
    }

    pub fn of(self, r: &Record) -> Option<f64> {
        match self {
            Metric::ConsensusError => Some(r.consensus_error),
            Metric::Objective => r.objective,
            Metric::GradNorm => r.grad_norm,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One finished (or failed) run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Topology name, or [`BASELINE_LABEL`].
    pub label: String,
    pub topology: Option<Topology>,
    pub path: usize,
    pub seed: u64,
    pub graph_seed: Option<u64>,
    pub lambda_w: f64,
    pub mixing: DMatrix<f64>,
    pub records: Vec<Record>,
    pub final_state: SwarmState,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub plan: ExperimentPlan,
    /// Network runs, ordered by topology (plan order) then path.
    pub runs: Vec<RunOutcome>,
    /// Baseline runs, one per path (empty when disabled).
    pub baseline: Vec<RunOutcome>,
    pub wall_clock_seconds: f64,
}

/// A point of a mean curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanPoint {
    pub k: usize,
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl ExperimentResult {
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = self.plan.topologies.iter().map(|t| t.name().to_string()).collect();
        if !self.baseline.is_empty() {
            out.push(BASELINE_LABEL.to_string());
        }
        out
    }

    pub fn outcomes(&self, label: &str) -> impl Iterator<Item = &RunOutcome> {
        let label = label.to_string();
        self.runs.iter().chain(&self.baseline).filter(move |r| r.label == label)
    }

    /// `(k, value, run_index)` rows for one label and metric.
    pub fn series(&self, label: &str, metric: Metric) -> Vec<(usize, f64, usize)> {
        let mut rows = Vec::new();
        for run in self.outcomes(label) {
            for rec in &run.records {
                if let Some(v) = metric.of(rec) {
                    rows.push((rec.k, v, run.path));
                }
            }
        }
        rows.sort_by_key(|&(k, _, path)| (k, path));
        rows
    }

    /// Mean over paths at every checkpoint, with the standard error.
    pub fn mean_series(&self, label: &str, metric: Metric) -> Vec<MeanPoint> {
        let mut out: Vec<MeanPoint> = Vec::new();
        let mut acc = Welford::default();
        let rows = self.series(label, metric);
        for (idx, &(k, v, _)) in rows.iter().enumerate() {
            acc.push(v);
            if rows.get(idx + 1).is_none_or(|next| next.0 != k) {
                let n = acc.count();
                let stderr = if n < 2 { 0.0 } else { (acc.variance() / n as f64).sqrt() };
                out.push(MeanPoint { k, mean: acc.mean(), stderr, count: n });
                acc = Welford::default();
            }
        }
        out
    }

    /// Whether every network run failed.
    pub fn all_failed(&self) -> bool {
        self.runs.iter().all(|r| r.error.is_some())
    }
}

/// Metric hook used by experiment runs.
fn record_metrics(
    problem: &dyn Problem,
    eval: &ObjectiveEval,
    grad_norm_samples: usize,
    eta: f64,
    state: &SwarmState,
) -> Result<Record> {
    let x_bar = state.mean_x();
    let objective = estimate_implicit_objective(problem, &x_bar, eval)?.mean;
    let grad_norm = if grad_norm_samples > 0 {
        let f = |x: &[f64]| estimate_implicit_objective(problem, x, eval).map_or(f64::NAN, |e| e.mean);
        let mut rng = StreamKey::new(eval.seed, Purpose::Direction).iteration(state.iteration).rng();
        Some(smoothed_grad_norm_mc(f, &x_bar, eta, grad_norm_samples, &mut rng)?)
    } else {
        None
    };
    let rec = Record {
        k: state.iteration,
        consensus_error: consensus_error(&state.x),
        objective: Some(objective),
        grad_norm,
    };
    let finite = rec.consensus_error.is_finite() && objective.is_finite() && grad_norm.is_none_or(f64::is_finite);
    if !finite {
        return Err(Error::Numerical(format!("non-finite metric at k = {}", state.iteration)));
    }
    Ok(rec)
}

struct Job {
    topology: Option<Topology>,
    path: usize,
}

fn run_job(plan: &ExperimentPlan, problem: &dyn Problem, job: &Job) -> Result<RunOutcome> {
    let seed = plan.run_seed(job.path);
    let (w, graph_seed, mut cfg) = match job.topology {
        Some(t) => {
            let params = TopologyParams { seed: plan.graph_seed(job.path), ..plan.topology_params };
            let g = build_topology(t, plan.m, &params).map_err(|e| Error::Config(e.to_string()))?;
            (metropolis_weights(&g)?, Some(params.seed), plan.run.clone())
        }
        None => {
            let mut cfg = plan.run.clone();
            cfg.minibatch *= plan.m;
            (MixingMatrix::single(), None, cfg)
        }
    };
    cfg.master_seed = seed;
    let mut eval =
        ObjectiveEval::new(problem, plan.m, plan.eval.eval_samples, plan.eval.lower, plan.eval_seed(job.path));
    if let Some(s) = cfg.schedule {
        eval.schedule = s;
    }
    if let Some(s) = cfg.det_step {
        eval.det_step = s;
    }
    let hook = |s: &SwarmState| record_metrics(problem, &eval, plan.eval.grad_norm_samples, cfg.eta, s);
    let label = job.topology.map_or(BASELINE_LABEL.to_string(), |t| t.name().to_string());
    let outcome = |records, final_state, error| RunOutcome {
        label: label.clone(),
        topology: job.topology,
        path: job.path,
        seed,
        graph_seed,
        lambda_w: w.lambda_w(),
        mixing: w.matrix().clone(),
        records,
        final_state,
        error,
    };
    Ok(match gt_core::run(&cfg, problem, &w, &plan.checkpoints(), hook) {
        Ok(t) => outcome(t.records, t.final_state, None),
        Err(f) => outcome(f.partial.records, f.partial.final_state, Some(f.error.to_string())),
    })
}

fn run_jobs(plan: &ExperimentPlan, jobs: &[Job]) -> Result<Vec<RunOutcome>> {
    let problem = plan.problem.build()?;
    let problem: &dyn Problem = problem.as_ref();
    map_indexed(plan.run.execution, jobs.len(), |i| run_job(plan, problem, &jobs[i])).into_iter().collect()
}

/// Runs every `(topology, path)` pair of the plan and, if enabled, the
/// baseline. Run failures are recorded in the outcomes; only invalid plans
/// return an error.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentResult> {
    plan.validate()?;
    let start = Instant::now();
    let mut jobs: Vec<Job> = Vec::new();
    for &t in &plan.topologies {
        jobs.extend((0..plan.sample_paths).map(|path| Job { topology: Some(t), path }));
    }
    if plan.baseline {
        jobs.extend((0..plan.sample_paths).map(|path| Job { topology: None, path }));
    }
    let mut all = run_jobs(plan, &jobs)?;
    let baseline = all.split_off(plan.topologies.len() * plan.sample_paths);
    Ok(ExperimentResult { plan: plan.clone(), runs: all, baseline, wall_clock_seconds: start.elapsed().as_secs_f64() })
}

/// Single-agent counterpart of the plan: `W = [1]`, the same stepsizes and
/// schedules, and a minibatch of `m * B` per iteration so each iteration
/// uses as many samples as the whole network.
pub fn centralized_baseline(plan: &ExperimentPlan) -> Result<Vec<RunOutcome>> {
    plan.validate()?;
    let jobs: Vec<Job> = (0..plan.sample_paths).map(|path| Job { topology: None, path }).collect();
    run_jobs(plan, &jobs)
}

fn csv_float(v: f64) -> String {
    format!("{v:e}")
}

/// Writes CSVs, final states, mixing matrices and `manifest.json` under
/// `dir`. Returns the paths written.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir.join("final_states"))?;
    std::fs::create_dir_all(dir.join("mixing"))?;
    let mut written = Vec::new();
    let mut write = |rel: String, text: String| -> Result<()> {
        let path = dir.join(rel);
        std::fs::write(&path, text)?;
        written.push(path);
        Ok(())
    };
    for label in result.labels() {
        for metric in Metric::ALL {
            let rows = result.series(&label, metric);
            if rows.is_empty() {
                continue;
            }
            let mut csv = String::from("k,metric_value,run_index\n");
            for (k, v, run) in rows {
                csv.push_str(&format!("{k},{},{run}\n", csv_float(v)));
            }
            write(format!("{label}_{metric}.csv"), csv)?;
            let mut csv = String::from("k,mean,stderr\n");
            for p in result.mean_series(&label, metric) {
                csv.push_str(&format!("{},{},{}\n", p.k, csv_float(p.mean), csv_float(p.stderr)));
            }
            write(format!("{label}_{metric}_mean.csv"), csv)?;
        }
        for run in result.outcomes(&label) {
            write(format!("final_states/{label}_path{}.txt", run.path), matrix_to_text(&run.final_state.x))?;
            write(format!("mixing/{label}_path{}.txt", run.path), matrix_to_text(&run.mixing))?;
        }
    }
    write("manifest.json".into(), manifest(result)?)?;
    Ok(written)
}

fn manifest(result: &ExperimentResult) -> Result<String> {
    let runs: Vec<serde_json::Value> = result
        .runs
        .iter()
        .chain(&result.baseline)
        .map(|r| {
            serde_json::json!({
                "label": r.label,
                "path": r.path,
                "seed": r.seed,
                "graph_seed": r.graph_seed,
                "lambda_w": r.lambda_w,
                "final_iteration": r.final_state.iteration,
                "status": if r.error.is_some() { "failed" } else { "ok" },
                "error": r.error,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "plan": result.plan,
        "master_seed": result.plan.run.master_seed,
        "checkpoints": result.plan.checkpoints(),
        "runs": runs,
        "wall_clock_seconds": result.wall_clock_seconds,
    });
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Numerical(format!("manifest: {e}")))
}
