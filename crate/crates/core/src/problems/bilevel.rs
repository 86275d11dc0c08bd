use rand::{Rng, RngCore};

use super::{Problem, Stage};
use crate::lower_level::{Polyhedron, ViConstants};
use crate::Result;

const XI_RANGE: (f64, f64) = (5.0, 8.0);
const ZETA_RANGE: (f64, f64) = (3.0, 6.0);

/// Nonconvex bilevel benchmark in two leader and two follower variables.
///
/// Upper: `-x1^2 - 3 x2 - xi y1 + y2^2`.
/// Lower: `min 2 x1^2 + y1^2 + y2^2 - zeta y2` over
/// `y >= 0, -2 y1 + y2 >= -3 - x1^2 + 2 x1 - x2^2, 3 y1 - y2 >= 4 - x2`.
///
/// Noise vectors are `[xi, zeta]` with `xi ~ U[5, 8]`, `zeta ~ U[3, 6]`.
/// Every agent holds the same instance.
#[derive(Debug, Clone)]
pub struct BilevelBenchmark {
    template: Polyhedron,
}

pub fn bilevel_benchmark() -> BilevelBenchmark {
    let template = Polyhedron::new(2, &[vec![-2.0, 1.0], vec![3.0, -1.0]], &[0.0, 0.0], true)
        .expect("benchmark polyhedron is well formed");
    BilevelBenchmark { template }
}

impl BilevelBenchmark {
    /// Feasible set `Z(x)`.
    pub fn feasible_set(&self, x: &[f64]) -> Polyhedron {
        let mut z = self.template;
        z.set_rhs(0, -3.0 - x[0] * x[0] + 2.0 * x[0] - x[1] * x[1]);
        z.set_rhs(1, 4.0 - x[1]);
        z
    }

    /// Mean of `zeta`.
    pub fn mean_zeta(&self) -> f64 {
        0.5 * (ZETA_RANGE.0 + ZETA_RANGE.1)
    }
}

impl Problem for BilevelBenchmark {
    fn name(&self) -> &str {
        "bilevel"
    }
    fn stage(&self) -> Stage {
        Stage::SingleStage
    }
    fn dim_x(&self) -> usize {
        2
    }
    fn dim_z(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        2
    }

    fn constants(&self) -> ViConstants {
        let width = ZETA_RANGE.1 - ZETA_RANGE.0;
        ViConstants { mu_f: 2.0, l_f: 2.0, nu_f: width / 12f64.sqrt(), diameter_sq: f64::INFINITY }
    }

    fn sample_noise(&self, _agent: usize, rng: &mut dyn RngCore, out: &mut [f64]) {
        out[0] = rng.random_range(XI_RANGE.0..XI_RANGE.1);
        out[1] = rng.random_range(ZETA_RANGE.0..ZETA_RANGE.1);
    }

    fn upper(&self, _agent: usize, x: &[f64], z: &[f64], xi: &[f64]) -> f64 {
        -x[0] * x[0] - 3.0 * x[1] - xi[0] * z[0] + z[1] * z[1]
    }

    fn lower_map(&self, _agent: usize, _x: &[f64], z: &[f64], xi: &[f64], out: &mut [f64]) {
        out[0] = 2.0 * z[0];
        out[1] = 2.0 * z[1] - xi[1];
    }

    fn project(&self, _agent: usize, x: &[f64], _xi: &[f64], z: &mut [f64]) -> Result<()> {
        self.feasible_set(x).project_in_place(z)
    }

    fn has_exact_lower(&self) -> bool {
        true
    }

    /// The mean map is `2 (y - (0, E zeta / 2))`, so the solution is the
    /// projection of `(0, E zeta / 2)` onto `Z(x)`.
    fn exact_lower(&self, _agent: usize, x: &[f64], _xi: &[f64]) -> Result<Vec<f64>> {
        self.feasible_set(x).project(&[0.0, 0.5 * self.mean_zeta()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lower_level::det_solve;
    use crate::problems::{estimate_implicit_objective, AgentVi, LowerEval, ObjectiveEval};
    use crate::rng::{stream, Purpose};
    use crate::smoothing::Welford;

    #[test]
    fn map_example() {
        let b = bilevel_benchmark();
        let mut out = [0.0; 2];
        b.lower_map(0, &[0.3, -1.0], &[1.0, 2.0], &[6.0, 4.0], &mut out);
        assert_eq!(out, [2.0, 0.0]);
    }

    #[test]
    fn feasible_set_at_origin() {
        let z = bilevel_benchmark().feasible_set(&[0.0, 0.0]);
        assert!(z.contains(&[2.0, 1.0], 0.0));
        assert_eq!(z.row(0).1, -3.0);
        assert_eq!(z.row(1).1, 4.0);
        assert!(!z.contains(&[0.0, 0.0], 1e-9));
    }

    #[test]
    fn noise_constant() {
        assert!((bilevel_benchmark().constants().nu_f_sq() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn exact_lower_at_origin() {
        let b = bilevel_benchmark();
        let z = b.exact_lower(0, &[0.0, 0.0], &[]).unwrap();
        // Only the facet 3 y1 - y2 >= 4 is active: (0, 2.25) + 0.625 (3, -1).
        assert!((z[0] - 1.875).abs() < 1e-12 && (z[1] - 1.625).abs() < 1e-12);
        let vi = AgentVi::new(&b, 0);
        let mean = [6.5, 4.5];
        let det = det_solve(&vi, &[0.0, 0.0], &mean, &[2.0, 1.0], 0.5, 10_000).unwrap();
        assert!((det.z[0] - z[0]).abs() < 1e-6 && (det.z[1] - z[1]).abs() < 1e-6);
    }

    #[test]
    fn objective_matches_brute_force() {
        let b = bilevel_benchmark();
        let (y1, y2) = (1.875, 1.625);
        let mut rng = stream(11, Purpose::Test, 0, 0, 0);
        let mut brute = Welford::default();
        for _ in 0..100_000 {
            let xi = rng.random_range(5.0..8.0);
            brute.push(-xi * y1 + y2 * y2);
        }
        let brute = brute.estimate();
        let eval = ObjectiveEval::new(&b, 20, 50, LowerEval::Exact, 3);
        let est = estimate_implicit_objective(&b, &[0.0, 0.0], &eval).unwrap();
        let se = (brute.std_err.powi(2) + est.std_err.powi(2)).sqrt();
        assert!((est.mean - brute.mean).abs() <= 3.0 * se, "{} vs {}", est.mean, brute.mean);

        let eval = ObjectiveEval::new(&b, 20, 50, LowerEval::Iterative(150), 3);
        let iter = estimate_implicit_objective(&b, &[0.0, 0.0], &eval).unwrap();
        assert!((iter.mean - brute.mean).abs() <= 0.25, "{} vs {}", iter.mean, brute.mean);
    }
}
