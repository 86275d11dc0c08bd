//! The problem interface and the built-in SMPEC instances.

mod bilevel;
mod cournot;
mod toy;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::exec::{map_indexed, Execution};
use crate::lower_level::{det_solve, max_det_step, sa_solve, LowerVi, SaSchedule, ViConstants};
use crate::rng::{Purpose, StreamKey};
use crate::smoothing::{McEstimate, Welford};
use crate::{Error, Result};

pub use bilevel::{bilevel_benchmark, BilevelBenchmark};
pub use cournot::{cournot_game, try_cournot_game, CournotGame, CournotParams};
pub use toy::{toy_mpec, ToyMpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Lower-level map is an expectation over noise independent of the
    /// upper-level sample.
    SingleStage,
    /// Lower-level problem is solved per scenario, sharing the upper sample.
    TwoStage,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::SingleStage => "single_stage",
            Stage::TwoStage => "two_stage",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "single_stage" | "1s" | "single" => Ok(Stage::SingleStage),
            "two_stage" | "2s" | "two" => Ok(Stage::TwoStage),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// A distributed stochastic MPEC.
///
/// Agent `i` owns the upper objective `h_i(x, z, xi)` and the lower-level
/// variational inequality with map `F_i(x, z, xi)` over `Z_i(x[, xi])`. The
/// single noise vector `xi` carries every random quantity of the instance;
/// each component is used by whichever level needs it.
pub trait Problem: Send + Sync {
    fn name(&self) -> &str;
    fn stage(&self) -> Stage;
    fn dim_x(&self) -> usize;
    fn dim_z(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn constants(&self) -> ViConstants;

    fn sample_noise(&self, agent: usize, rng: &mut dyn RngCore, out: &mut [f64]);

    /// Upper-level objective `h_i(x, z, xi)`.
    fn upper(&self, agent: usize, x: &[f64], z: &[f64], xi: &[f64]) -> f64;

    /// Lower-level map `F_i(x, z, xi)`, written into `out`.
    fn lower_map(&self, agent: usize, x: &[f64], z: &[f64], xi: &[f64], out: &mut [f64]);

    /// Euclidean projection onto `Z_i(x[, xi])`, in place.
    fn project(&self, agent: usize, x: &[f64], xi: &[f64], z: &mut [f64]) -> Result<()>;

    fn has_exact_lower(&self) -> bool {
        false
    }

    /// Exact lower-level solution `z_i(x)` (single-stage, `xi` ignored) or
    /// `z_i(x, xi)` (two-stage).
    fn exact_lower(&self, _agent: usize, _x: &[f64], _xi: &[f64]) -> Result<Vec<f64>> {
        Err(Error::contract(format!("problem `{}` has no exact lower-level oracle", self.name())))
    }

    /// Common initial leader decision used when none is configured.
    fn default_x0(&self) -> Vec<f64> {
        vec![0.0; self.dim_x()]
    }

    /// Interval the leader decision is restricted to, if the instance has one.
    fn leader_bounds(&self) -> Option<(f64, f64)> {
        None
    }
}

/// Agent `i`'s lower-level problem, seen by the solvers.
pub struct AgentVi<'a, P: ?Sized> {
    pub problem: &'a P,
    pub agent: usize,
}

impl<'a, P: Problem + ?Sized> AgentVi<'a, P> {
    pub fn new(problem: &'a P, agent: usize) -> Self {
        AgentVi { problem, agent }
    }
}

impl<P: Problem + ?Sized> LowerVi for AgentVi<'_, P> {
    fn dim(&self) -> usize {
        self.problem.dim_z()
    }
    fn noise_dim(&self) -> usize {
        self.problem.noise_dim()
    }
    fn constants(&self) -> ViConstants {
        self.problem.constants()
    }
    fn map(&self, x: &[f64], z: &[f64], xi: &[f64], out: &mut [f64]) {
        self.problem.lower_map(self.agent, x, z, xi, out)
    }
    fn project(&self, x: &[f64], xi: &[f64], z: &mut [f64]) -> Result<()> {
        self.problem.project(self.agent, x, xi, z)
    }
    fn sample_noise(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        self.problem.sample_noise(self.agent, rng, out)
    }
}

/// Starting point for a lower-level solve: a standard normal draw projected
/// onto the feasible set.
pub fn random_lower_start<V: LowerVi + ?Sized>(
    vi: &V,
    x: &[f64],
    xi: &[f64],
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let mut z: Vec<f64> = (0..vi.dim()).map(|_| StandardNormal.sample(&mut *rng)).collect();
    vi.project(x, xi, &mut z)?;
    Ok(z)
}

/// How the lower level is resolved when evaluating the implicit objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerEval {
    /// Use the problem's exact oracle.
    Exact,
    /// Run the problem's lower-level solver for this many steps.
    Iterative(usize),
}

/// Settings for Monte Carlo evaluation of `f(x) = (1/m) sum_i E[h_i(x, z_i, xi_i)]`.
///
/// Evaluation streams depend on `(seed, agent, sample)` only, so calls at
/// different points share their random numbers and differences between
/// checkpoints are not swamped by sampling noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveEval {
    pub agents: usize,
    pub samples: usize,
    pub lower: LowerEval,
    /// Stepsizes for single-stage evaluation solves.
    pub schedule: SaSchedule,
    /// Fixed stepsize for two-stage evaluation solves.
    pub det_step: f64,
    pub seed: u64,
    pub exec: Execution,
}

impl ObjectiveEval {
    /// Defaults for `problem`: default SA schedule, `mu_F / L_F^2` fixed step.
    pub fn new<P: Problem + ?Sized>(problem: &P, agents: usize, samples: usize, lower: LowerEval, seed: u64) -> Self {
        let c = problem.constants();
        ObjectiveEval {
            agents,
            samples,
            lower,
            schedule: SaSchedule::default_for(&c),
            det_step: max_det_step(&c),
            seed,
            exec: Execution::default(),
        }
    }
}

/// Monte Carlo estimate of the global implicit objective at `x_bar`.
pub fn estimate_implicit_objective<P: Problem + ?Sized>(
    problem: &P,
    x_bar: &[f64],
    eval: &ObjectiveEval,
) -> Result<McEstimate> {
    if eval.agents == 0 || eval.samples == 0 {
        return Err(Error::contract("objective evaluation needs at least one agent and one sample"));
    }
    if x_bar.len() != problem.dim_x() {
        return Err(Error::contract("x_bar has the wrong dimension"));
    }
    if let LowerEval::Iterative(0) = eval.lower {
        return Err(Error::contract("lower_iters must be at least 1"));
    }
    let per_agent = map_indexed(eval.exec, eval.agents, |i| -> Result<Vec<f64>> {
        let vi = AgentVi::new(problem, i);
        let mut xi = vec![0.0; problem.noise_dim()];
        let mut values = Vec::with_capacity(eval.samples);
        for s in 0..eval.samples {
            let key = StreamKey::new(eval.seed, Purpose::Evaluation).agent(i).index(s);
            problem.sample_noise(i, &mut key.rng(), &mut xi);
            let z = match eval.lower {
                LowerEval::Exact => problem.exact_lower(i, x_bar, &xi)?,
                LowerEval::Iterative(iters) => {
                    let mut init = StreamKey { purpose: Purpose::EvaluationInit, ..key }.rng();
                    let z0 = random_lower_start(&vi, x_bar, &xi, &mut init)?;
                    match problem.stage() {
                        Stage::SingleStage => {
                            let mut noise = StreamKey { purpose: Purpose::EvaluationNoise, ..key }.rng();
                            sa_solve(&vi, x_bar, &z0, &eval.schedule, iters, &mut noise)?.z
                        }
                        Stage::TwoStage => det_solve(&vi, x_bar, &xi, &z0, eval.det_step, iters)?.z,
                    }
                }
            };
            values.push(problem.upper(i, x_bar, &z, &xi));
        }
        Ok(values)
    });
    let mut acc = Welford::default();
    for values in per_agent {
        for v in values? {
            acc.push(v);
        }
    }
    Ok(acc.estimate())
}

/// The implicit objective of agent `i` for a fixed noise vector, with the
/// exact lower-level oracle.
pub fn implicit_value<P: Problem + ?Sized>(problem: &P, agent: usize, x: &[f64], xi: &[f64]) -> Result<f64> {
    let z = problem.exact_lower(agent, x, xi)?;
    Ok(problem.upper(agent, x, &z, xi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn check_monotone<P: Problem>(p: &P, seed: u64) {
        let c = p.constants();
        let mut r = stream(seed, Purpose::Test, 0, 0, 0);
        let nz = p.dim_z();
        let mut xi = vec![0.0; p.noise_dim()];
        let (mut f1, mut f2) = (vec![0.0; nz], vec![0.0; nz]);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..p.dim_x()).map(|_| r.random_range(-3.0..3.0)).collect();
            p.sample_noise(0, &mut r, &mut xi);
            let z1: Vec<f64> = (0..nz).map(|_| r.random_range(-5.0..5.0)).collect();
            let z2: Vec<f64> = (0..nz).map(|_| r.random_range(-5.0..5.0)).collect();
            p.lower_map(0, &x, &z1, &xi, &mut f1);
            p.lower_map(0, &x, &z2, &xi, &mut f2);
            let dz: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a - b).collect();
            let df: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a - b).collect();
            let inner: f64 = dz.iter().zip(&df).map(|(a, b)| a * b).sum();
            let nz2: f64 = dz.iter().map(|v| v * v).sum();
            let nf: f64 = df.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(inner >= c.mu_f * nz2 - 1e-9, "{}: strong monotonicity", p.name());
            assert!(nf <= c.l_f * nz2.sqrt() + 1e-9, "{}: Lipschitz", p.name());
        }
    }

    fn check_exact_fixed_point<P: Problem>(p: &P, seed: u64) {
        let mut r = stream(seed, Purpose::Test, 1, 0, 0);
        let mut xi = vec![0.0; p.noise_dim()];
        let mut f = vec![0.0; p.dim_z()];
        for _ in 0..200 {
            let x: Vec<f64> = (0..p.dim_x()).map(|_| r.random_range(-3.0..3.0)).collect();
            p.sample_noise(0, &mut r, &mut xi);
            // Single-stage oracles solve the mean map.
            let xi_map = if p.stage() == Stage::SingleStage { mean_noise(p) } else { xi.clone() };
            let z = p.exact_lower(0, &x, &xi).unwrap();
            p.lower_map(0, &x, &z, &xi_map, &mut f);
            let mut stepped: Vec<f64> = z.iter().zip(&f).map(|(a, b)| a - b).collect();
            p.project(0, &x, &xi, &mut stepped).unwrap();
            let res = z.iter().zip(&stepped).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(res <= 1e-8, "{}: fixed-point residual {res}", p.name());
        }
    }

    fn mean_noise<P: Problem>(p: &P) -> Vec<f64> {
        let mut r = stream(99, Purpose::Test, 2, 0, 0);
        let mut acc = vec![0.0; p.noise_dim()];
        let mut xi = vec![0.0; p.noise_dim()];
        let n = 400_000;
        for _ in 0..n {
            p.sample_noise(0, &mut r, &mut xi);
            for (a, v) in acc.iter_mut().zip(&xi) {
                *a += v / n as f64;
            }
        }
        // Snap to the analytic means of the built-in uniform draws.
        acc.iter().map(|v| (v * 4.0).round() / 4.0).collect()
    }

    #[test]
    fn built_in_maps_are_strongly_monotone_and_lipschitz() {
        check_monotone(&toy_mpec(), 1);
        check_monotone(&bilevel_benchmark(), 2);
        check_monotone(&cournot_game(20, &CournotParams::default()), 3);
        check_monotone(&cournot_game(3, &CournotParams { include_leader_shift: false, ..Default::default() }), 4);
    }

    #[test]
    fn exact_oracles_are_fixed_points() {
        check_exact_fixed_point(&toy_mpec(), 5);
        check_exact_fixed_point(&bilevel_benchmark(), 6);
        check_exact_fixed_point(&cournot_game(20, &CournotParams::default()), 7);
    }

    #[test]
    fn toy_evaluation_examples() {
        let toy = toy_mpec();
        let eval = ObjectiveEval::new(&toy, 3, 4, LowerEval::Exact, 1);
        let at = |x: f64| estimate_implicit_objective(&toy, &[x], &eval).unwrap().mean;
        assert!(at(-1.0).abs() <= 1e-9);
        assert!((at(1.0) - 1.0).abs() <= 1e-9);
        // The iterative solver hits z = 0 exactly when x < 0.
        let eval = ObjectiveEval::new(&toy, 3, 4, LowerEval::Iterative(150), 1);
        assert!(estimate_implicit_objective(&toy, &[-1.0], &eval).unwrap().mean.abs() <= 1e-9);
        assert!((estimate_implicit_objective(&toy, &[1.0], &eval).unwrap().mean - 1.0).abs() <= 1e-2);
    }

    #[test]
    fn evaluation_rejects_bad_input() {
        let toy = toy_mpec();
        let eval = ObjectiveEval::new(&toy, 1, 1, LowerEval::Iterative(0), 1);
        assert!(estimate_implicit_objective(&toy, &[0.0], &eval).is_err());
        let eval = ObjectiveEval::new(&toy, 1, 1, LowerEval::Exact, 1);
        assert!(estimate_implicit_objective(&toy, &[0.0, 1.0], &eval).is_err());
    }

    #[test]
    fn stage_parsing() {
        assert_eq!("two_stage".parse::<Stage>().unwrap(), Stage::TwoStage);
        assert_eq!("1s".parse::<Stage>().unwrap(), Stage::SingleStage);
        assert!("three".parse::<Stage>().is_err());
    }
}
