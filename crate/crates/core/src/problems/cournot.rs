use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Problem, Stage};
use crate::lower_level::{project_orthant, ViConstants};
use crate::rng::{Purpose, StreamKey};
use crate::{Error, Result};

/// Parameters of the Stackelberg–Nash–Cournot game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CournotParams {
    /// Slope of the inverse demand `p(Q) = a(xi) - b Q`.
    pub b: f64,
    /// Leader cost curvature.
    pub d: f64,
    /// Leader capacity, used when the leader box is enabled.
    pub x_u: f64,
    /// Range of the follower marginal costs.
    pub cost_range: (f64, f64),
    /// Seed for drawing follower costs (shared by every agent).
    pub cost_seed: u64,
    /// Explicit follower costs; overrides the random draw.
    pub costs: Option<Vec<f64>>,
    /// Range of the demand intercept `a(xi) = xi`.
    pub xi_range: (f64, f64),
    /// Whether the leader's output enters the followers' price.
    pub include_leader_shift: bool,
}

impl Default for CournotParams {
    fn default() -> Self {
        CournotParams {
            b: 0.1,
            d: 0.2,
            x_u: 10.0,
            cost_range: (0.05, 0.5),
            cost_seed: 2024,
            costs: None,
            xi_range: (7.5, 12.5),
            include_leader_shift: true,
        }
    }
}

/// Two-stage game: the leader picks `x`, then `p` followers play a Nash-Cournot
/// game at the realised demand. Each agent holds the full game.
///
/// Leader cost: `d x^2 / 2 - x (a(xi) - b (x + sum z))`.
/// Follower map: `(c_j + b) z_j - a(xi) + b sum z [+ b x]` over `z >= 0`.
#[derive(Debug, Clone)]
pub struct CournotGame {
    params: CournotParams,
    costs: Vec<f64>,
    /// `1 + b sum_j 1/(c_j + b)`.
    sm_denominator: f64,
}

pub fn cournot_game(p: usize, params: &CournotParams) -> CournotGame {
    try_cournot_game(p, params).expect("invalid Cournot parameters")
}

pub fn try_cournot_game(p: usize, params: &CournotParams) -> Result<CournotGame> {
    if p == 0 {
        return Err(Error::Construction { param: "p_followers", reason: "need at least one follower".into() });
    }
    if !(params.b > 0.0) || !(params.d >= 0.0) || !(params.x_u > 0.0) {
        return Err(Error::Construction { param: "b", reason: "need b > 0, d >= 0 and x_u > 0".into() });
    }
    let costs = match &params.costs {
        Some(c) if c.len() != p => {
            return Err(Error::Construction {
                param: "costs",
                reason: format!("{} costs given for {p} followers", c.len()),
            })
        }
        Some(c) => c.clone(),
        None => {
            let (lo, hi) = params.cost_range;
            if !(lo >= 0.0 && hi > lo) {
                return Err(Error::Construction { param: "cost_range", reason: "need 0 <= lo < hi".into() });
            }
            let mut rng = StreamKey::new(params.cost_seed, Purpose::Problem).rng();
            (0..p).map(|_| rng.random_range(lo..hi)).collect()
        }
    };
    if costs.iter().any(|&c| !(c >= 0.0) || !c.is_finite()) {
        return Err(Error::Construction { param: "costs", reason: "costs must be finite and nonnegative".into() });
    }
    let (lo, hi) = params.xi_range;
    if !(hi > lo) {
        return Err(Error::Construction { param: "xi_range", reason: "need lo < hi".into() });
    }
    let b = params.b;
    let sm_denominator = 1.0 + b * costs.iter().map(|c| 1.0 / (c + b)).sum::<f64>();
    Ok(CournotGame { params: params.clone(), costs, sm_denominator })
}

impl CournotGame {
    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn params(&self) -> &CournotParams {
        &self.params
    }

    fn intercept(&self, x: &[f64], xi: &[f64]) -> f64 {
        let shift = if self.params.include_leader_shift { self.params.b * x[0] } else { 0.0 };
        xi[0] - shift
    }
}

impl Problem for CournotGame {
    fn name(&self) -> &str {
        "cournot"
    }
    fn stage(&self) -> Stage {
        Stage::TwoStage
    }
    fn dim_x(&self) -> usize {
        1
    }
    fn dim_z(&self) -> usize {
        self.costs.len()
    }
    fn noise_dim(&self) -> usize {
        1
    }

    fn constants(&self) -> ViConstants {
        let b = self.params.b;
        let min = self.costs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.costs.iter().copied().fold(0.0, f64::max);
        ViConstants { mu_f: min + b, l_f: max + b + b * self.costs.len() as f64, nu_f: 0.0, diameter_sq: f64::INFINITY }
    }

    fn sample_noise(&self, _agent: usize, rng: &mut dyn RngCore, out: &mut [f64]) {
        let (lo, hi) = self.params.xi_range;
        out[0] = rng.random_range(lo..hi);
    }

    fn upper(&self, _agent: usize, x: &[f64], z: &[f64], xi: &[f64]) -> f64 {
        let CournotParams { b, d, .. } = self.params;
        let total = x[0] + z.iter().sum::<f64>();
        0.5 * d * x[0] * x[0] - x[0] * (xi[0] - b * total)
    }

    fn lower_map(&self, _agent: usize, x: &[f64], z: &[f64], xi: &[f64], out: &mut [f64]) {
        let b = self.params.b;
        let base = b * z.iter().sum::<f64>() - self.intercept(x, xi);
        for ((o, &zj), &c) in out.iter_mut().zip(z).zip(&self.costs) {
            *o = (c + b) * zj + base;
        }
    }

    fn project(&self, _agent: usize, _x: &[f64], _xi: &[f64], z: &mut [f64]) -> Result<()> {
        project_orthant(z);
        Ok(())
    }

    fn has_exact_lower(&self) -> bool {
        true
    }

    /// The map is `(D + b 11^T) z - alpha 1` with `D = diag(c + b)`, so the
    /// unconstrained root is `alpha D^-1 1 / (1 + b 1^T D^-1 1)`. It has the
    /// sign of `alpha`; when `alpha <= 0` the map is nonnegative at the
    /// origin and `z = 0` solves the complementarity problem.
    fn exact_lower(&self, _agent: usize, x: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        let alpha = self.intercept(x, xi).max(0.0);
        let b = self.params.b;
        Ok(self.costs.iter().map(|c| alpha / ((c + b) * self.sm_denominator)).collect())
    }

    fn leader_bounds(&self) -> Option<(f64, f64)> {
        Some((0.0, self.params.x_u))
    }
}
