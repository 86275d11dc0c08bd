use rand::RngCore;

use super::{Problem, Stage};
use crate::lower_level::{project_orthant, ViConstants};
use crate::Result;

/// Scalar MPEC `min (x + 1 - z)^2` with `z = argmin_{z >= 0} |z - x|^2 / 2`.
///
/// The implicit objective `(x + 1 - max{0, x})^2` is neither convex nor
/// smooth; it equals 1 on `x >= 0` and has its minimiser at `x = -1`.
#[derive(Debug, Clone, Default)]
pub struct ToyMpec;

pub fn toy_mpec() -> ToyMpec {
    ToyMpec
}

impl Problem for ToyMpec {
    fn name(&self) -> &str {
        "toy"
    }
    fn stage(&self) -> Stage {
        Stage::SingleStage
    }
    fn dim_x(&self) -> usize {
        1
    }
    fn dim_z(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        0
    }
    fn constants(&self) -> ViConstants {
        ViConstants { mu_f: 1.0, l_f: 1.0, nu_f: 0.0, diameter_sq: f64::INFINITY }
    }
    fn sample_noise(&self, _agent: usize, _rng: &mut dyn RngCore, _out: &mut [f64]) {}

    fn upper(&self, _agent: usize, x: &[f64], z: &[f64], _xi: &[f64]) -> f64 {
        let r = x[0] + 1.0 - z[0];
        r * r
    }

    fn lower_map(&self, _agent: usize, x: &[f64], z: &[f64], _xi: &[f64], out: &mut [f64]) {
        out[0] = z[0] - x[0];
    }

    fn project(&self, _agent: usize, _x: &[f64], _xi: &[f64], z: &mut [f64]) -> Result<()> {
        project_orthant(z);
        Ok(())
    }

    fn has_exact_lower(&self) -> bool {
        true
    }

    fn exact_lower(&self, _agent: usize, x: &[f64], _xi: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![x[0].max(0.0)])
    }

    fn default_x0(&self) -> Vec<f64> {
        vec![-3.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::implicit_value;

    #[test]
    fn exact_lower_is_clipping() {
        let t = toy_mpec();
        assert_eq!(t.exact_lower(0, &[-2.0], &[]).unwrap(), vec![0.0]);
        assert_eq!(t.exact_lower(0, &[3.0], &[]).unwrap(), vec![3.0]);
    }

    #[test]
    fn implicit_values() {
        let t = toy_mpec();
        assert_eq!(implicit_value(&t, 0, &[-1.0], &[]).unwrap(), 0.0);
        for x in [0.0, 0.5, 2.0] {
            assert_eq!(implicit_value(&t, 0, &[x], &[]).unwrap(), 1.0);
        }
    }

    #[test]
    fn implicit_function_identity_on_grid() {
        let t = toy_mpec();
        for i in 0..100 {
            let x = -5.0 + 10.0 * i as f64 / 99.0;
            let direct = (x + 1.0 - f64::max(0.0, x)).powi(2);
            assert!((implicit_value(&t, 0, &[x], &[]).unwrap() - direct).abs() <= 1e-12);
        }
    }
}
