//! Quick invariant checks on the built-in components.

use nalgebra::DMatrix;
use rand::Rng;

use crate::gt_core::{step, Oracle, RunConfig, SwarmState};
use crate::lower_level::{LowerIterRule, SaSchedule};
use crate::network::{build_topology, metropolis_weights, Topology, TopologyParams, STOCHASTIC_TOL};
use crate::problems::{bilevel_benchmark, cournot_game, toy_mpec, CournotParams, Problem, Stage};
use crate::rng::{stream, Purpose};
use crate::{Execution, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check { name: name.to_string(), passed, detail }
    }

    fn from_result(name: &str, r: Result<String>) -> Self {
        match r {
            Ok(detail) => Check::new(name, true, detail),
            Err(e) => Check::new(name, false, e.to_string()),
        }
    }
}

fn fail(msg: String) -> crate::Error {
    crate::Error::Numerical(msg)
}

fn mixing_checks(seed: u64) -> Result<String> {
    let params = TopologyParams { seed, ..Default::default() };
    let mut out = Vec::new();
    for t in Topology::ALL {
        let w = metropolis_weights(&build_topology(t, 20, &params)?)?;
        let a = w.matrix();
        let m = a.nrows();
        for i in 0..m {
            let row: f64 = a.row(i).sum();
            let col: f64 = a.column(i).sum();
            if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
                return Err(fail(format!("{t}: row/column {i} sums to {row}/{col}")));
            }
        }
        let j = DMatrix::from_element(m, m, 1.0 / m as f64);
        let svd = (a - j).singular_values().max();
        if (svd - w.lambda_w()).abs() > 1e-8 || w.lambda_w() >= 1.0 {
            return Err(fail(format!("{t}: lambda_W {} vs SVD {svd}", w.lambda_w())));
        }
        if t == Topology::Complete && w.lambda_w() > 1e-10 {
            return Err(fail(format!("complete graph has lambda_W {}", w.lambda_w())));
        }
        out.push(format!("{t}={:.4}", w.lambda_w()));
    }
    Ok(out.join(" "))
}

fn averaging_identities<P: Problem>(problem: &P, cfg: &RunConfig, iters: usize) -> Result<String> {
    let w = metropolis_weights(&build_topology(Topology::Ring, 5, &TopologyParams::default())?)?;
    let mut s = SwarmState::initial(problem, 5, cfg)?;
    let mut worst: f64 = 0.0;
    for _ in 0..iters {
        let next = step(&s, &w, problem, cfg)?;
        for j in 0..s.n() {
            let y_mean = next.y.column(j).mean();
            let g_mean = next.g_prev.column(j).mean();
            let x_gap = next.x.column(j).mean() - (s.x.column(j).mean() - cfg.gamma * y_mean);
            worst = worst.max((y_mean - g_mean).abs()).max(x_gap.abs());
        }
        s = next;
    }
    if worst > 1e-10 {
        return Err(fail(format!("averaging identity violated by {worst:e}")));
    }
    Ok(format!("max deviation {worst:e}"))
}

fn fixed_points(seed: u64) -> Result<String> {
    let problems: Vec<Box<dyn Problem>> = vec![
        Box::new(toy_mpec()),
        Box::new(bilevel_benchmark()),
        Box::new(cournot_game(20, &CournotParams::default())),
    ];
    let mut rng = stream(seed, Purpose::Test, 0, 0, 0);
    let mut worst: f64 = 0.0;
    for p in &problems {
        let mut xi = vec![0.0; p.noise_dim()];
        let mut f = vec![0.0; p.dim_z()];
        for _ in 0..100 {
            let x: Vec<f64> = (0..p.dim_x()).map(|_| rng.random_range(-3.0..3.0)).collect();
            p.sample_noise(0, &mut rng, &mut xi);
            let z = p.exact_lower(0, &x, &xi)?;
            // The single-stage benchmark solves the mean map.
            let xi_map: Vec<f64> = if p.name() == "bilevel" { vec![6.5, 4.5] } else { xi.clone() };
            p.lower_map(0, &x, &z, &xi_map, &mut f);
            let mut stepped: Vec<f64> = z.iter().zip(&f).map(|(a, b)| a - b).collect();
            p.project(0, &x, &xi, &mut stepped)?;
            for (a, b) in z.iter().zip(&stepped) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    if worst > 1e-8 {
        return Err(fail(format!("fixed-point residual {worst:e}")));
    }
    Ok(format!("max residual {worst:e}"))
}

fn determinism(seed: u64) -> Result<String> {
    let problem = bilevel_benchmark();
    let w =
        metropolis_weights(&build_topology(Topology::ErdosRenyi, 8, &TopologyParams { seed, ..Default::default() })?)?;
    let mut cfg = RunConfig::new(Stage::SingleStage, 1e-3, 0.1, 3);
    cfg.minibatch = 2;
    cfg.master_seed = seed;
    cfg.lower_rule = LowerIterRule::Fixed(20);
    let go = |cfg: &RunConfig| -> Result<SwarmState> {
        let mut s = SwarmState::initial(&problem, 8, cfg)?;
        for _ in 0..cfg.horizon_k {
            s = step(&s, &w, &problem, cfg)?;
        }
        Ok(s)
    };
    let a = go(&cfg)?;
    let b = go(&cfg)?;
    cfg.execution = Execution::Sequential;
    let c = go(&cfg)?;
    if a != b || a != c {
        return Err(fail("repeated or sequential runs differ".into()));
    }
    Ok("parallel, repeated and sequential runs agree bitwise".into())
}

/// Runs every check; none of them panics.
pub fn validate_suite(seed: u64) -> Vec<Check> {
    let bilevel = bilevel_benchmark();
    let mut exact = RunConfig::new(Stage::SingleStage, 1e-3, 0.1, 20);
    exact.oracle = Oracle::Exact;
    exact.master_seed = seed;
    let cournot = cournot_game(3, &CournotParams::default());
    let mut two = RunConfig::new(Stage::TwoStage, 1e-3, 0.1, 20);
    two.master_seed = seed;
    two.schedule = Some(SaSchedule::default_for(&cournot.constants()));
    vec![
        Check::from_result("mixing matrices (m = 20, all topologies)", mixing_checks(seed)),
        Check::from_result("averaging identities, single-stage exact", averaging_identities(&bilevel, &exact, 20)),
        Check::from_result("averaging identities, two-stage inexact", averaging_identities(&cournot, &two, 20)),
        Check::from_result("exact lower-level fixed points", fixed_points(seed)),
        Check::from_result("determinism across execution policies", determinism(seed)),
    ]
}
