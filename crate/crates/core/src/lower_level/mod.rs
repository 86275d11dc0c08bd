//! Solvers for the agent-local lower-level variational inequality.
//!
//! Two schemes are provided:
//!
//! - [`sa_solve`]: projected stochastic approximation with stepsize
//!   `gamma_hat / (t + big_gamma_hat)`, one fresh noise draw per step. Used
//!   when the lower-level map is an expectation (single-stage problems).
//! - [`det_solve`]: projected fixed-step iteration for a map with the
//!   scenario held fixed (two-stage problems). Converges linearly.
//!
//! The iteration budgets `t_k` come from [`t_schedule_1s`] / [`t_schedule_2s`]
//! or the simplified experiment rules, selected with [`LowerIterRule`].

pub mod projection;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use projection::{project_box, project_orthant, Polyhedron, Projection};

/// Feasibility tolerance for a solver's starting point.
const START_FEAS_TOL: f64 = 1e-8;

/// Monotonicity and size constants of a lower-level map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViConstants {
    /// Strong monotonicity modulus.
    pub mu_f: f64,
    /// Lipschitz constant.
    pub l_f: f64,
    /// Noise level: `E||F~ - F||^2 <= nu_f^2`. Zero for deterministic maps.
    pub nu_f: f64,
    /// Bound on the squared diameter of the feasible set (may be infinite).
    pub diameter_sq: f64,
}

impl ViConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_f > 0.0) || !(self.l_f >= self.mu_f) || !(self.diameter_sq > 0.0) || !(self.nu_f >= 0.0) {
            return Err(Error::contract(format!("invalid VI constants {self:?}")));
        }
        Ok(())
    }

    pub fn nu_f_sq(&self) -> f64 {
        self.nu_f * self.nu_f
    }
}

/// A parametrised variational inequality `VI(Z(x, xi), F(x, ., xi))`.
///
/// For single-stage problems the map is `F~(x, z, xi)` and the feasible set
/// ignores `xi`; for two-stage problems `xi` is a fixed scenario.
pub trait LowerVi {
    fn dim(&self) -> usize;

    /// Length of a noise vector (0 for noiseless problems).
    fn noise_dim(&self) -> usize;

    fn constants(&self) -> ViConstants;

    /// Writes `F(x, z, xi)` into `out`.
    fn map(&self, x: &[f64], z: &[f64], xi: &[f64], out: &mut [f64]);

    /// Projects `z` onto `Z(x, xi)` in place.
    fn project(&self, x: &[f64], xi: &[f64], z: &mut [f64]) -> Result<()>;

    fn sample_noise(&self, rng: &mut dyn RngCore, out: &mut [f64]);
}

/// Stepsize parameters of the stochastic approximation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaSchedule {
    pub gamma_hat: f64,
    pub big_gamma_hat: f64,
    /// Exponent used by the theorem-form `t_k` rule.
    pub a: f64,
}

impl SaSchedule {
    /// Checks `gamma_hat > 1/mu_F`, `big_gamma_hat > gamma_hat L_F^2 / mu_F`
    /// and `a > 1/2`.
    pub fn new(gamma_hat: f64, big_gamma_hat: f64, a: f64, c: &ViConstants) -> Result<Self> {
        if !(gamma_hat > 1.0 / c.mu_f) {
            return Err(Error::contract(format!("gamma_hat = {gamma_hat} must exceed 1/mu_F = {}", 1.0 / c.mu_f)));
        }
        let floor = gamma_hat * c.l_f * c.l_f / c.mu_f;
        if !(big_gamma_hat > floor) {
            return Err(Error::contract(format!(
                "big_gamma_hat = {big_gamma_hat} must exceed gamma_hat L_F^2 / mu_F = {floor}"
            )));
        }
        if !(a > 0.5) {
            return Err(Error::contract(format!("schedule exponent a = {a} must exceed 1/2")));
        }
        Ok(SaSchedule { gamma_hat, big_gamma_hat, a })
    }

    /// `gamma_hat = 2/mu_F`, `big_gamma_hat = 2 gamma_hat L_F^2 / mu_F`, `a = 1`.
    pub fn default_for(c: &ViConstants) -> Self {
        let gamma_hat = 2.0 / c.mu_f;
        SaSchedule { gamma_hat, big_gamma_hat: 2.0 * gamma_hat * c.l_f * c.l_f / c.mu_f, a: 1.0 }
    }

    pub fn step(&self, t: usize) -> f64 {
        self.gamma_hat / (t as f64 + self.big_gamma_hat)
    }

    /// Mean-squared error bound after `t` steps:
    /// `max{nu^2 g/(mu g - 1), G D} / (t + G)`.
    pub fn error_bound(&self, t: usize, c: &ViConstants) -> f64 {
        let noise = c.nu_f_sq() * self.gamma_hat / (c.mu_f * self.gamma_hat - 1.0);
        noise.max(self.big_gamma_hat * c.diameter_sq) / (t as f64 + self.big_gamma_hat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowerSolveResult {
    pub z: Vec<f64>,
    pub iterations: usize,
    /// Inexactness implied by the schedule (for logging; may be infinite).
    pub schedule_epsilon: f64,
}

fn check_start<V: LowerVi + ?Sized>(vi: &V, x: &[f64], xi: &[f64], z0: &[f64]) -> Result<()> {
    if z0.len() != vi.dim() {
        return Err(Error::contract(format!("z0 has length {}, expected {}", z0.len(), vi.dim())));
    }
    let mut p = z0.to_vec();
    vi.project(x, xi, &mut p)?;
    let gap = p.iter().zip(z0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if gap > START_FEAS_TOL * (1.0 + z0.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
        return Err(Error::contract(format!("z0 is not feasible (projection moves it by {gap})")));
    }
    Ok(())
}

/// Projected stochastic approximation for `VI(Z(x), E[F~(x, ., xi)])`.
pub fn sa_solve<V: LowerVi + ?Sized>(
    vi: &V,
    x_hat: &[f64],
    z0: &[f64],
    schedule: &SaSchedule,
    t_k: usize,
    noise: &mut dyn RngCore,
) -> Result<LowerSolveResult> {
    sa_solve_observed(vi, x_hat, z0, schedule, t_k, noise, |_, _| {})
}

/// As [`sa_solve`], calling `observe(t, z_t)` after every step.
pub fn sa_solve_observed<V, O>(
    vi: &V,
    x_hat: &[f64],
    z0: &[f64],
    schedule: &SaSchedule,
    t_k: usize,
    noise: &mut dyn RngCore,
    mut observe: O,
) -> Result<LowerSolveResult>
where
    V: LowerVi + ?Sized,
    O: FnMut(usize, &[f64]),
{
    if t_k == 0 {
        return Err(Error::contract("sa_solve needs at least one step"));
    }
    check_start(vi, x_hat, &[], z0)?;
    let mut z = z0.to_vec();
    let mut f = vec![0.0; z.len()];
    let mut xi = vec![0.0; vi.noise_dim()];
    for t in 0..t_k {
        vi.sample_noise(noise, &mut xi);
        vi.map(x_hat, &z, &xi, &mut f);
        let step = schedule.step(t);
        for (zj, fj) in z.iter_mut().zip(&f) {
            *zj -= step * fj;
        }
        vi.project(x_hat, &xi, &mut z)?;
        observe(t + 1, &z);
    }
    let schedule_epsilon = schedule.error_bound(t_k, &vi.constants());
    Ok(LowerSolveResult { z, iterations: t_k, schedule_epsilon })
}

/// Projected fixed-step iteration for `VI(Z(x, xi), F(x, ., xi))`.
pub fn det_solve<V: LowerVi + ?Sized>(
    vi: &V,
    x_hat: &[f64],
    xi: &[f64],
    z0: &[f64],
    gamma_hat: f64,
    t_k: usize,
) -> Result<LowerSolveResult> {
    det_solve_observed(vi, x_hat, xi, z0, gamma_hat, t_k, |_, _| {})
}

/// As [`det_solve`], calling `observe(t, z_t)` after every step.
pub fn det_solve_observed<V, O>(
    vi: &V,
    x_hat: &[f64],
    xi: &[f64],
    z0: &[f64],
    gamma_hat: f64,
    t_k: usize,
    mut observe: O,
) -> Result<LowerSolveResult>
where
    V: LowerVi + ?Sized,
    O: FnMut(usize, &[f64]),
{
    let c = vi.constants();
    let cap = c.mu_f / (c.l_f * c.l_f);
    if !(gamma_hat > 0.0) || gamma_hat > cap * (1.0 + 1e-12) {
        return Err(Error::contract(format!("det_solve stepsize {gamma_hat} must lie in (0, mu_F/L_F^2 = {cap}]")));
    }
    check_start(vi, x_hat, xi, z0)?;
    let mut z = z0.to_vec();
    let mut f = vec![0.0; z.len()];
    for t in 0..t_k {
        vi.map(x_hat, &z, xi, &mut f);
        for (zj, fj) in z.iter_mut().zip(&f) {
            *zj -= gamma_hat * fj;
        }
        vi.project(x_hat, xi, &mut z)?;
        observe(t + 1, &z);
    }
    let schedule_epsilon = (1.0 - gamma_hat * c.mu_f).powi(t_k as i32) * c.diameter_sq;
    Ok(LowerSolveResult { z, iterations: t_k, schedule_epsilon })
}

/// Largest admissible fixed stepsize, `mu_F / L_F^2`.
pub fn max_det_step(c: &ViConstants) -> f64 {
    c.mu_f / (c.l_f * c.l_f)
}

/// `ceil(sqrt(n) (k + big_gamma)^a / eta^(2/3))`, at least one.
pub fn t_schedule_1s(k: usize, n: usize, eta: f64, a: f64, big_gamma: f64) -> Result<usize> {
    if !(eta > 0.0) {
        return Err(Error::contract("t_schedule_1s needs eta > 0"));
    }
    let v = (n as f64).sqrt() * (k as f64 + big_gamma).powf(a) / eta.powf(2.0 / 3.0);
    Ok(ceil_count(v))
}

/// `ceil(-a / ln(1 - mu gamma) * ln(n^(1/(2a)) (k+1) eta^(-2/(3a))))`, at least one.
pub fn t_schedule_2s(k: usize, n: usize, eta: f64, a: f64, mu_f: f64, gamma_hat: f64) -> Result<usize> {
    let rate = mu_f * gamma_hat;
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::contract(format!("t_schedule_2s needs 0 < mu_F gamma_hat < 1, got {rate}")));
    }
    if !(eta > 0.0) || !(a > 0.0) {
        return Err(Error::contract("t_schedule_2s needs eta > 0 and a > 0"));
    }
    let inner = (n as f64).ln() / (2.0 * a) + (k as f64 + 1.0).ln() - 2.0 / (3.0 * a) * eta.ln();
    if inner <= 0.0 {
        return Ok(1);
    }
    Ok(ceil_count(-a / (1.0 - rate).ln() * inner))
}

/// Simplified experiment rule `ceil(ln(sqrt(n) (k+1) eta^(-2/3)))`, at least one.
pub fn t_experiment_2s(k: usize, n: usize, eta: f64) -> usize {
    let v = (n as f64).sqrt().ln() + (k as f64 + 1.0).ln() - 2.0 / 3.0 * eta.ln();
    if v <= 0.0 {
        1
    } else {
        ceil_count(v)
    }
}

fn ceil_count(v: f64) -> usize {
    // Guard against values like 6.999999999999999 landing on the wrong side.
    let r = v.round();
    let c = if (v - r).abs() <= 1e-9 * r.abs().max(1.0) { r } else { v.ceil() };
    (c as usize).max(1)
}

/// How many lower-level steps to run at upper iteration `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LowerIterRule {
    /// Theorem-form rules ([`t_schedule_1s`] with the schedule's exponent and
    /// offset; [`t_schedule_2s`] with the schedule's exponent).
    Theorem,
    /// Experiment rules: `ceil(sqrt(n)(k+1)/eta^(2/3))` single-stage,
    /// `ceil(ln(sqrt(n)(k+1)eta^(-2/3)))` two-stage.
    #[default]
    Experiment,
    Fixed(usize),
}

impl LowerIterRule {
    pub fn single_stage(&self, k: usize, n: usize, eta: f64, sched: &SaSchedule) -> Result<usize> {
        match *self {
            LowerIterRule::Theorem => t_schedule_1s(k, n, eta, sched.a, sched.big_gamma_hat),
            LowerIterRule::Experiment => t_schedule_1s(k, n, eta, 1.0, 1.0),
            LowerIterRule::Fixed(t) => Ok(t.max(1)),
        }
    }

    pub fn two_stage(&self, k: usize, n: usize, eta: f64, a: f64, mu_f: f64, gamma_hat: f64) -> Result<usize> {
        match *self {
            LowerIterRule::Theorem => t_schedule_2s(k, n, eta, a, mu_f, gamma_hat),
            LowerIterRule::Experiment => Ok(t_experiment_2s(k, n, eta)),
            LowerIterRule::Fixed(t) => Ok(t.max(1)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use rand::Rng;

    /// `F(z) = slope * z - shift - xi` on `[lo, hi]`, xi uniform on `[-w, w]`.
    struct Scalar {
        slope: f64,
        shift: f64,
        lo: f64,
        hi: f64,
        noise_half_width: f64,
    }

    impl LowerVi for Scalar {
        fn dim(&self) -> usize {
            1
        }
        fn noise_dim(&self) -> usize {
            1
        }
        fn constants(&self) -> ViConstants {
            ViConstants {
                mu_f: self.slope,
                l_f: self.slope,
                nu_f: self.noise_half_width / 3f64.sqrt(),
                diameter_sq: (self.hi - self.lo).powi(2),
            }
        }
        fn map(&self, _x: &[f64], z: &[f64], xi: &[f64], out: &mut [f64]) {
            out[0] = self.slope * z[0] - self.shift - xi[0];
        }
        fn project(&self, _x: &[f64], _xi: &[f64], z: &mut [f64]) -> Result<()> {
            project_box(z, self.lo, self.hi);
            Ok(())
        }
        fn sample_noise(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
            out[0] = if self.noise_half_width > 0.0 {
                rng.random_range(-self.noise_half_width..self.noise_half_width)
            } else {
                0.0
            };
        }
    }

    fn unconstrained_identity() -> Scalar {
        Scalar { slope: 1.0, shift: 0.0, lo: f64::NEG_INFINITY, hi: f64::INFINITY, noise_half_width: 0.0 }
    }

    #[test]
    fn one_sa_step_arithmetic() {
        let vi = unconstrained_identity();
        // gamma_hat / big_gamma_hat = 0.5 at t = 0; schedule built directly.
        let sched = SaSchedule { gamma_hat: 1.5, big_gamma_hat: 3.0, a: 1.0 };
        let mut r = stream(1, Purpose::Test, 0, 0, 0);
        let out = sa_solve(&vi, &[0.0], &[1.0], &sched, 1, &mut r).unwrap();
        assert_eq!(out.z, vec![0.5]);
    }

    #[test]
    fn noiseless_sa_reaches_box_solution() {
        let vi = Scalar { slope: 2.0, shift: 3.0, lo: 0.0, hi: 10.0, noise_half_width: 0.0 };
        let sched = SaSchedule::new(2.0, 9.0, 1.0, &vi.constants()).unwrap();
        let mut r = stream(1, Purpose::Test, 0, 0, 1);
        let out = sa_solve(&vi, &[0.0], &[7.0], &sched, 200, &mut r).unwrap();
        assert!((out.z[0] - 1.5).abs() < 1e-2, "{:?}", out.z);
        assert!(out.schedule_epsilon.is_finite());
    }

    #[test]
    fn schedule_inequalities_are_enforced() {
        let c = ViConstants { mu_f: 2.0, l_f: 2.0, nu_f: 0.0, diameter_sq: 1.0 };
        assert!(SaSchedule::new(0.5, 9.0, 1.0, &c).is_err());
        assert!(SaSchedule::new(2.0, 4.0, 1.0, &c).is_err());
        assert!(SaSchedule::new(2.0, 9.0, 0.5, &c).is_err());
        assert!(SaSchedule::new(2.0, 9.0, 0.6, &c).is_ok());
    }

    #[test]
    fn default_schedule_is_admissible() {
        for (mu, l) in [(1.0, 1.0), (2.0, 2.0), (0.15, 2.6)] {
            let c = ViConstants { mu_f: mu, l_f: l, nu_f: 0.0, diameter_sq: 1.0 };
            let d = SaSchedule::default_for(&c);
            SaSchedule::new(d.gamma_hat, d.big_gamma_hat, d.a, &c).unwrap();
        }
    }

    #[test]
    fn det_one_step_exact() {
        let vi = unconstrained_identity();
        let out = det_solve(&vi, &[0.0], &[0.0], &[4.0], 1.0, 1).unwrap();
        assert_eq!(out.z, vec![0.0]);
        assert!(det_solve(&vi, &[0.0], &[0.0], &[4.0], 1.5, 1).is_err());
    }

    #[test]
    fn det_contraction_on_scalar_cournot_cell() {
        // F(z) = (c + b) z - q + b z with c = 0.3, b = 0.1, q = 2.
        let (c, b, q) = (0.3, 0.1, 2.0);
        let slope: f64 = c + 2.0 * b;
        let vi = Scalar { slope, shift: q, lo: 0.0, hi: f64::INFINITY, noise_half_width: 0.0 };
        let z_star = q / slope;
        let gamma = 1.0 / slope;
        let rate = 1.0 - slope * gamma * 0.5;
        let g = gamma * 0.5;
        let z0 = 9.0;
        let mut prev = (z0 - z_star).abs();
        det_solve_observed(&vi, &[0.0], &[0.0], &[z0], g, 100, |t, z| {
            let err = (z[0] - z_star).abs();
            assert!(err <= rate.powi(t as i32) * (z0 - z_star).abs() * (1.0 + 1e-9));
            assert!(err <= rate * prev + 1e-12);
            prev = err;
        })
        .unwrap();
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let vi = Scalar { slope: 1.0, shift: 0.0, lo: 0.0, hi: 1.0, noise_half_width: 0.0 };
        let mut r = stream(1, Purpose::Test, 0, 0, 2);
        let sched = SaSchedule::new(1.5, 3.0, 1.0, &vi.constants()).unwrap();
        assert!(sa_solve(&vi, &[0.0], &[2.0], &sched, 1, &mut r).is_err());
        assert!(det_solve(&vi, &[0.0], &[0.0], &[-1.0], 0.5, 1).is_err());
    }

    #[test]
    fn t_schedule_1s_examples() {
        assert_eq!(t_schedule_1s(0, 1, 1.0, 1.0, 1.0).unwrap(), 1);
        // ceil(2 * 10 / 0.1^(2/3)) = ceil(92.83) = 93
        let oracle = (2.0f64 * 10.0 / 0.1f64.powf(2.0 / 3.0)).ceil() as usize;
        assert_eq!(oracle, 93);
        assert_eq!(t_schedule_1s(9, 4, 0.1, 1.0, 1.0).unwrap(), 93);
        assert_eq!(t_schedule_1s(0, 2, 0.1, 1.0, 1.0).unwrap(), 7);
        let s = SaSchedule { gamma_hat: 1.0, big_gamma_hat: 5.0, a: 1.0 };
        assert_eq!(LowerIterRule::Experiment.single_stage(0, 2, 0.1, &s).unwrap(), 7);
        assert_eq!(LowerIterRule::Fixed(0).single_stage(0, 2, 0.1, &s).unwrap(), 1);
    }

    #[test]
    fn t_schedule_2s_examples() {
        assert_eq!(t_schedule_2s(0, 1, 1.0, 1.0, 1.0, 0.5).unwrap(), 1);
        // (-1/ln 0.5) * ln(10^(2/3)) = 1.4427 * 1.5351 = 2.2147 -> 3
        assert_eq!(t_schedule_2s(0, 1, 0.1, 1.0, 1.0, 0.5).unwrap(), 3);
        assert!(t_schedule_2s(0, 1, 0.1, 1.0, 2.0, 0.5).is_err());
        // Experiment rule at n = 1, eta = 0.1, k = 99: ceil(ln(100 * 10^(2/3))) = ceil(6.1402) = 7
        assert_eq!(t_experiment_2s(99, 1, 0.1), 7);
        assert_eq!(t_experiment_2s(0, 1, 0.1), 2);
        assert_eq!(t_experiment_2s(0, 1, 1.0), 1);
        // With a = -ln(1 - mu gamma) the prefactor is one.
        let rate: f64 = 0.3;
        let a = -(1.0 - rate).ln();
        for k in [0usize, 5, 99] {
            let inner = ((k as f64 + 1.0) * 0.1f64.powf(-2.0 / (3.0 * a))).ln();
            let want = (inner).ceil() as usize;
            assert_eq!(t_schedule_2s(k, 1, 0.1, a, rate, 1.0).unwrap(), want.max(1));
        }
    }
}
