//! Distributed zeroth-order gradient tracking.
//!
//! Every agent keeps a copy `x_i` of the leader decision and a tracker `y_i`.
//! One iteration:
//!
//! 1. each agent samples directions `v` on the unit sphere and noise `xi`,
//!    resolves the lower level at `x_i + eta v` and `x_i - eta v`, and forms
//!    the central-difference estimate `g_i` (averaged over the minibatch);
//! 2. `y <- W (y + g - g_prev)`;
//! 3. `x <- W (x - gamma y)`, optionally clipped to the leader box.
//!
//! Step 1 is independent across agents and runs through [`map_indexed`].
//! All randomness comes from streams keyed by `(seed, agent, k, sample)`, so
//! results do not depend on the execution policy or visiting order.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::exec::{map_indexed, Execution};
use crate::lower_level::{det_solve, max_det_step, sa_solve, LowerIterRule, SaSchedule};
use crate::network::MixingMatrix;
use crate::problems::{random_lower_start, AgentVi, Problem, Stage};
use crate::rng::{Purpose, StreamKey};
use crate::smoothing::{sample_unit_sphere, zo_gradient};
use crate::{Error, Result};

/// How lower-level solutions are obtained inside the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Oracle {
    /// The problem's closed-form solution.
    Exact,
    /// `t_k` steps of the stochastic approximation (single-stage) or
    /// projection (two-stage) solver.
    #[default]
    Inexact,
}

impl std::str::FromStr for Oracle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exact" => Ok(Oracle::Exact),
            "inexact" => Ok(Oracle::Inexact),
            other => Err(Error::Config(format!("unknown oracle `{other}`"))),
        }
    }
}

/// Initial leader decisions.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Every agent starts at the problem's default point.
    #[default]
    ProblemDefault,
    /// Every agent starts at this point.
    Common(Vec<f64>),
    /// Agent `i` starts at `center + scale * N(0, I)` drawn from its own stream.
    Random { center: Option<Vec<f64>>, scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Stage,
    pub oracle: Oracle,
    pub gamma: f64,
    pub eta: f64,
    pub horizon_k: usize,
    pub minibatch: usize,
    /// Stepsizes of the stochastic approximation solver; the problem's
    /// default schedule when `None`. Its exponent `a` is also used by the
    /// two-stage theorem rule.
    pub schedule: Option<SaSchedule>,
    pub lower_rule: LowerIterRule,
    /// Fixed step of the projection solver; `mu_F / L_F^2` when `None`.
    pub det_step: Option<f64>,
    pub init: Init,
    pub leader_box: Option<(f64, f64)>,
    pub master_seed: u64,
    pub execution: Execution,
}

impl RunConfig {
    pub fn new(mode: Stage, gamma: f64, eta: f64, horizon_k: usize) -> Self {
        RunConfig {
            mode,
            oracle: Oracle::default(),
            gamma,
            eta,
            horizon_k,
            minibatch: 1,
            schedule: None,
            lower_rule: LowerIterRule::default(),
            det_step: None,
            init: Init::default(),
            leader_box: None,
            master_seed: 0,
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |param: &'static str, reason: &str| Err(Error::Construction { param, reason: reason.into() });
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return bad("gamma", "must be positive and finite");
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return bad("eta", "must be positive and finite");
        }
        if self.minibatch == 0 {
            return bad("minibatch", "must be at least 1");
        }
        if let Some(s) = self.det_step {
            if !(s > 0.0) {
                return bad("det_step", "must be positive");
            }
        }
        if let Some((lo, hi)) = self.leader_box {
            if !(lo <= hi) {
                return bad("leader_box", "needs lo <= hi");
            }
        }
        if let Init::Random { scale, .. } = self.init {
            if !(scale >= 0.0) {
                return bad("init", "random scale must be nonnegative");
            }
        }
        Ok(())
    }
}

/// One agent's view of the swarm.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub g_prev: Vec<f64>,
}

/// Stacked agent states; row `i` belongs to agent `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwarmState {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub g_prev: DMatrix<f64>,
    pub iteration: usize,
}

impl SwarmState {
    /// Agents at `x0` (one row each), with zero trackers and zero previous
    /// gradients.
    pub fn new(x0: DMatrix<f64>) -> Self {
        let (m, n) = x0.shape();
        SwarmState { x: x0, y: DMatrix::zeros(m, n), g_prev: DMatrix::zeros(m, n), iteration: 0 }
    }

    pub fn initial<P: Problem + ?Sized>(problem: &P, m: usize, cfg: &RunConfig) -> Result<Self> {
        if m == 0 {
            return Err(Error::contract("need at least one agent"));
        }
        let n = problem.dim_x();
        let check = |p: &[f64]| {
            if p.len() == n {
                Ok(())
            } else {
                Err(Error::Config(format!("initial point has length {}, problem needs {n}", p.len())))
            }
        };
        let x0 = match &cfg.init {
            Init::ProblemDefault => DMatrix::from_fn(m, n, |_, j| problem.default_x0()[j]),
            Init::Common(p) => {
                check(p)?;
                DMatrix::from_fn(m, n, |_, j| p[j])
            }
            Init::Random { center, scale } => {
                let c = center.clone().unwrap_or_else(|| problem.default_x0());
                check(&c)?;
                let mut x = DMatrix::zeros(m, n);
                for i in 0..m {
                    let mut rng = StreamKey::new(cfg.master_seed, Purpose::AgentInit).agent(i).rng();
                    for j in 0..n {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        x[(i, j)] = c[j] + scale * e;
                    }
                }
                x
            }
        };
        let mut state = SwarmState::new(x0);
        if let Some((lo, hi)) = cfg.leader_box {
            state.x.apply(|v| *v = v.clamp(lo, hi));
        }
        Ok(state)
    }

    pub fn m(&self) -> usize {
        self.x.nrows()
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn agent(&self, i: usize) -> AgentState {
        let row = |a: &DMatrix<f64>| a.row(i).iter().copied().collect();
        AgentState { x: row(&self.x), y: row(&self.y), g_prev: row(&self.g_prev) }
    }

    /// Network average of the decisions.
    pub fn mean_x(&self) -> Vec<f64> {
        column_mean(&self.x)
    }

    pub fn is_finite(&self) -> bool {
        [&self.x, &self.y, &self.g_prev].iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn column_mean(a: &DMatrix<f64>) -> Vec<f64> {
    let m = a.nrows() as f64;
    a.column_iter().map(|c| c.sum() / m).collect()
}

/// `||x - 1 x_bar||_F^2`.
pub fn consensus_error(x: &DMatrix<f64>) -> f64 {
    let mean = column_mean(x);
    x.row_iter().map(|r| r.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum()
}

/// Number of lower-level steps at iteration `k`.
pub fn lower_iterations<P: Problem + ?Sized>(problem: &P, cfg: &RunConfig, k: usize) -> Result<usize> {
    let c = problem.constants();
    let sched = cfg.schedule.unwrap_or_else(|| SaSchedule::default_for(&c));
    let n = problem.dim_x();
    match cfg.mode {
        Stage::SingleStage => cfg.lower_rule.single_stage(k, n, cfg.eta, &sched),
        Stage::TwoStage => {
            let step = cfg.det_step.unwrap_or_else(|| max_det_step(&c));
            cfg.lower_rule.two_stage(k, n, cfg.eta, sched.a, c.mu_f, step)
        }
    }
}

/// Minibatch-averaged zeroth-order gradient of agent `i` at `x`.
fn agent_gradient<P: Problem + ?Sized>(
    problem: &P,
    cfg: &RunConfig,
    sched: &SaSchedule,
    det_step: f64,
    t_k: usize,
    i: usize,
    k: usize,
    x: &[f64],
) -> Result<Vec<f64>> {
    let n = x.len();
    let vi = AgentVi::new(problem, i);
    let mut g = vec![0.0; n];
    let mut xi = vec![0.0; problem.noise_dim()];
    let scale = 1.0 / cfg.minibatch as f64;
    for b in 0..cfg.minibatch {
        let key = |purpose| StreamKey::new(cfg.master_seed, purpose).agent(i).iteration(k).index(b);
        let v = sample_unit_sphere(&mut key(Purpose::Direction).rng(), n);
        problem.sample_noise(i, &mut key(Purpose::UpperNoise).rng(), &mut xi);
        let x_plus: Vec<f64> = x.iter().zip(v.as_slice()).map(|(a, d)| a + cfg.eta * d).collect();
        let x_minus: Vec<f64> = x.iter().zip(v.as_slice()).map(|(a, d)| a - cfg.eta * d).collect();
        let (z_plus, z_minus) = match cfg.oracle {
            Oracle::Exact => (problem.exact_lower(i, &x_plus, &xi)?, problem.exact_lower(i, &x_minus, &xi)?),
            Oracle::Inexact => {
                // Both solves start from the same draw, projected onto each set.
                let init = key(Purpose::LowerInit).rng();
                let z0_plus = random_lower_start(&vi, &x_plus, &xi, &mut init.clone())?;
                let z0_minus = random_lower_start(&vi, &x_minus, &xi, &mut init.clone())?;
                match cfg.mode {
                    Stage::SingleStage => {
                        let mut np = key(Purpose::LowerNoisePlus).rng();
                        let mut nm = key(Purpose::LowerNoiseMinus).rng();
                        (
                            sa_solve(&vi, &x_plus, &z0_plus, sched, t_k, &mut np)?.z,
                            sa_solve(&vi, &x_minus, &z0_minus, sched, t_k, &mut nm)?.z,
                        )
                    }
                    Stage::TwoStage => (
                        det_solve(&vi, &x_plus, &xi, &z0_plus, det_step, t_k)?.z,
                        det_solve(&vi, &x_minus, &xi, &z0_minus, det_step, t_k)?.z,
                    ),
                }
            }
        };
        let h_plus = problem.upper(i, &x_plus, &z_plus, &xi);
        let h_minus = problem.upper(i, &x_minus, &z_minus, &xi);
        let est = zo_gradient(h_plus, h_minus, &v, cfg.eta)?;
        for (gj, ej) in g.iter_mut().zip(&est.g) {
            *gj += scale * ej;
        }
    }
    Ok(g)
}

/// Stacked zeroth-order gradients of all agents at the current decisions.
pub fn gradients<P: Problem + ?Sized>(state: &SwarmState, problem: &P, cfg: &RunConfig) -> Result<DMatrix<f64>> {
    gradients_in_order(state, problem, cfg, None)
}

/// As [`gradients`], visiting agents in `order` (a permutation of `0..m`)
/// when given. The result does not depend on the order.
pub fn gradients_in_order<P: Problem + ?Sized>(
    state: &SwarmState,
    problem: &P,
    cfg: &RunConfig,
    order: Option<&[usize]>,
) -> Result<DMatrix<f64>> {
    let (m, n) = state.x.shape();
    if n != problem.dim_x() {
        return Err(Error::contract(format!("state has {n} columns, problem needs {}", problem.dim_x())));
    }
    if cfg.oracle == Oracle::Exact && !problem.has_exact_lower() {
        return Err(Error::Config(format!("problem `{}` has no exact lower-level oracle", problem.name())));
    }
    if let Some(o) = order {
        let mut seen = vec![false; m];
        if o.len() != m || o.iter().any(|&i| i >= m || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::contract("order must be a permutation of the agents"));
        }
    }
    let c = problem.constants();
    let sched = cfg.schedule.unwrap_or_else(|| SaSchedule::default_for(&c));
    let det_step = cfg.det_step.unwrap_or_else(|| max_det_step(&c));
    let k = state.iteration;
    let t_k = lower_iterations(problem, cfg, k)?;
    let rows = map_indexed(cfg.execution, m, |slot| {
        let i = order.map_or(slot, |o| o[slot]);
        let x: Vec<f64> = state.x.row(i).iter().copied().collect();
        (i, agent_gradient(problem, cfg, &sched, det_step, t_k, i, k, &x))
    });
    let mut g = DMatrix::zeros(m, n);
    for (i, row) in rows {
        let row = row?;
        for j in 0..n {
            g[(i, j)] = row[j];
        }
    }
    Ok(g)
}

/// Tracking and consensus updates given the new gradients `g`.
pub fn apply_update(state: &SwarmState, w: &MixingMatrix, g: DMatrix<f64>, cfg: &RunConfig) -> Result<SwarmState> {
    if w.m() != state.m() || g.shape() != state.x.shape() {
        return Err(Error::contract(format!(
            "mixing matrix is {0}x{0} but the swarm has {1} agents",
            w.m(),
            state.m()
        )));
    }
    let y = w.mix(&(&state.y + &g - &state.g_prev))?;
    let mut x = w.mix(&(&state.x - cfg.gamma * &y))?;
    if let Some((lo, hi)) = cfg.leader_box {
        x.apply(|v| *v = v.clamp(lo, hi));
    }
    let next = SwarmState { x, y, g_prev: g, iteration: state.iteration + 1 };
    if !next.is_finite() {
        return Err(Error::Divergence { iteration: state.iteration });
    }
    Ok(next)
}

fn step_checked<P: Problem + ?Sized>(
    state: &SwarmState,
    w: &MixingMatrix,
    problem: &P,
    cfg: &RunConfig,
    stage: Stage,
) -> Result<SwarmState> {
    if problem.stage() != stage || cfg.mode != stage {
        return Err(Error::contract(format!(
            "{stage} step called with a {} problem in {} mode",
            problem.stage(),
            cfg.mode
        )));
    }
    let g = gradients(state, problem, cfg)?;
    apply_update(state, w, g, cfg)
}

pub fn step_single_stage<P: Problem + ?Sized>(
    state: &SwarmState,
    w: &MixingMatrix,
    problem: &P,
    cfg: &RunConfig,
) -> Result<SwarmState> {
    step_checked(state, w, problem, cfg, Stage::SingleStage)
}

pub fn step_two_stage<P: Problem + ?Sized>(
    state: &SwarmState,
    w: &MixingMatrix,
    problem: &P,
    cfg: &RunConfig,
) -> Result<SwarmState> {
    step_checked(state, w, problem, cfg, Stage::TwoStage)
}

/// One step of the configured mode.
pub fn step<P: Problem + ?Sized>(
    state: &SwarmState,
    w: &MixingMatrix,
    problem: &P,
    cfg: &RunConfig,
) -> Result<SwarmState> {
    step_checked(state, w, problem, cfg, cfg.mode)
}

/// Metrics recorded at a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub k: usize,
    pub consensus_error: f64,
    pub objective: Option<f64>,
    pub grad_norm: Option<f64>,
}

impl Record {
    /// A record holding only the consensus error of `state`.
    pub fn basic(state: &SwarmState) -> Self {
        Record { k: state.iteration, consensus_error: consensus_error(&state.x), objective: None, grad_norm: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<Record>,
    pub final_state: SwarmState,
    pub seed: u64,
}

/// A failed run with whatever was recorded before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub partial: Trajectory,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} checkpoints)", self.error, self.partial.records.len())
    }
}

impl std::error::Error for RunFailure {}

impl From<RunFailure> for Error {
    fn from(f: RunFailure) -> Self {
        f.error
    }
}

/// Runs `cfg.horizon_k` iterations on `m = w.m()` agents, calling `metrics`
/// at every iteration listed in `checkpoints` (values above the horizon are
/// ignored).
pub fn run<P, M>(
    cfg: &RunConfig,
    problem: &P,
    w: &MixingMatrix,
    checkpoints: &[usize],
    mut metrics: M,
) -> std::result::Result<Trajectory, RunFailure>
where
    P: Problem + ?Sized,
    M: FnMut(&SwarmState) -> Result<Record>,
{
    let fail = |error: Error, records: Vec<Record>, state: SwarmState| RunFailure {
        error,
        partial: Trajectory { records, final_state: state, seed: cfg.master_seed },
    };
    let mut records = Vec::new();
    let initial = cfg.validate().and_then(|_| SwarmState::initial(problem, w.m(), cfg)).and_then(|s| {
        if cfg.mode == problem.stage() {
            Ok(s)
        } else {
            Err(Error::Config(format!(
                "mode {} does not match {} problem `{}`",
                cfg.mode,
                problem.stage(),
                problem.name()
            )))
        }
    });
    let mut state = match initial {
        Ok(s) => s,
        Err(e) => return Err(fail(e, records, SwarmState::new(DMatrix::zeros(w.m(), problem.dim_x())))),
    };
    let mut wanted: Vec<usize> = checkpoints.iter().copied().filter(|&k| k <= cfg.horizon_k).collect();
    wanted.sort_unstable();
    wanted.dedup();
    let mut next = wanted.iter().peekable();
    loop {
        if next.peek() == Some(&&state.iteration) {
            next.next();
            match metrics(&state) {
                Ok(r) => records.push(r),
                Err(e) => return Err(fail(e, records, state)),
            }
        }
        if state.iteration >= cfg.horizon_k {
            break;
        }
        state = match step(&state, w, problem, cfg) {
            Ok(s) => s,
            Err(e) => return Err(fail(e, records, state)),
        };
    }
    Ok(Trajectory { records, final_state: state, seed: cfg.master_seed })
}

/// Constant stepsize `eta^(2/3) / (sqrt(n^(3/2) K) L0^(3/2))`, capped by
/// `min{sqrt(1-l^2)/(10 sqrt3 l^2), (1-l^2)/(20 l^3), (1-l^2)^2/(20 l^2),
/// 1/6, (1-l^2)/(9 l)} * eta / (sqrt(n) L0)` with `l = lambda_W`.
pub fn theoretical_stepsize(lambda_w: f64, n: usize, eta: f64, l0: f64, k_horizon: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&lambda_w) {
        return Err(Error::contract(format!("lambda_W must be in [0, 1), got {lambda_w}")));
    }
    if n == 0 || k_horizon == 0 || !(eta > 0.0) || !(l0 > 0.0) {
        return Err(Error::contract("n, K, eta and L0 must be positive"));
    }
    let nf = n as f64;
    let formula = eta.powf(2.0 / 3.0) / ((nf.powf(1.5) * k_horizon as f64).sqrt() * l0.powf(1.5));
    let l = lambda_w;
    let s = 1.0 - l * l;
    // Branches with lambda_W in the denominator are infinite at lambda_W = 0.
    let over = |num: f64, den: f64| if den == 0.0 { f64::INFINITY } else { num / den };
    let cap = [
        over(s.sqrt(), 10.0 * 3f64.sqrt() * l * l),
        over(s, 20.0 * l.powi(3)),
        over(s * s, 20.0 * l * l),
        1.0 / 6.0,
        over(s, 9.0 * l),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min)
        * eta
        / (nf.sqrt() * l0);
    Ok(formula.min(cap))
}
