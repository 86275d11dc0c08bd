//! Sphere sampling and the two-point zeroth-order gradient estimator.
//!
//! For a function `h` and radius `eta`, the smoothed function
//! `h_eta(x) = E_u[h(x + eta u)]` (u uniform in the unit ball) has gradient
//! `(n / (2 eta)) E_v[(h(x + eta v) - h(x - eta v)) v]` with `v` uniform on
//! the unit sphere. The helpers here sample that expectation.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// A point on the unit sphere in `R^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereDirection(Vec<f64>);

impl SphereDirection {
    /// Normalises `v`; fails if it is (numerically) zero.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let norm = norm2(&v);
        if !(norm > 1e-300) || !norm.is_finite() {
            return Err(Error::contract("direction must be a finite non-zero vector"));
        }
        Ok(SphereDirection(v.into_iter().map(|x| x / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn negated(&self) -> Self {
        SphereDirection(self.0.iter().map(|x| -x).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Uniform draw from the unit sphere: normalised Gaussian vector.
pub fn sample_unit_sphere<R: Rng + ?Sized>(rng: &mut R, n: usize) -> SphereDirection {
    assert!(n >= 1, "sphere dimension must be at least 1");
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        if n == 1 {
            if v[0] != 0.0 {
                return SphereDirection(vec![v[0].signum()]);
            }
            continue;
        }
        let norm = norm2(&v);
        if norm >= 1e-300 {
            return SphereDirection(v.into_iter().map(|x| x / norm).collect());
        }
    }
}

/// Uniform draw from the unit ball: sphere direction scaled by `U^(1/n)`.
pub fn sample_unit_ball<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let v = sample_unit_sphere(rng, n);
    let r = rng.random::<f64>().powf(1.0 / n as f64);
    v.0.into_iter().map(|x| x * r).collect()
}

/// Central-difference gradient estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoGradient {
    pub g: Vec<f64>,
    pub eta: f64,
    pub n: usize,
    /// `h(x + eta v) - h(x - eta v)`.
    pub delta_h: f64,
}

/// `g = (n / (2 eta)) (h_plus - h_minus) v`, where `n` is the dimension of `v`.
pub fn zo_gradient(h_plus: f64, h_minus: f64, v: &SphereDirection, eta: f64) -> Result<ZoGradient> {
    if !(eta > 0.0) {
        return Err(Error::contract(format!("smoothing radius must be positive, got {eta}")));
    }
    let n = v.dim();
    let delta_h = h_plus - h_minus;
    let scale = n as f64 / (2.0 * eta) * delta_h;
    Ok(ZoGradient { g: v.0.iter().map(|x| scale * x).collect(), eta, n, delta_h })
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// Running mean/variance (Welford). A constant stream keeps the mean exact.
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn estimate(&self) -> McEstimate {
        let se = if self.count == 0 { f64::NAN } else { (self.variance() / self.count as f64).sqrt() };
        McEstimate { mean: self.mean, std_err: se, samples: self.count }
    }
}

/// Monte Carlo estimate of `h_eta(x)` with ball samples.
pub fn smoothed_value_mc<F, R>(h: F, x: &[f64], eta: f64, samples: usize, rng: &mut R) -> Result<McEstimate>
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    if !(eta > 0.0) || samples == 0 {
        return Err(Error::contract("smoothed_value_mc needs eta > 0 and samples >= 1"));
    }
    let n = x.len();
    let mut acc = Welford::default();
    let mut point = vec![0.0; n];
    for _ in 0..samples {
        let u = sample_unit_ball(rng, n);
        for ((p, xi), ui) in point.iter_mut().zip(x).zip(&u) {
            *p = xi + eta * ui;
        }
        acc.push(h(&point));
    }
    Ok(acc.estimate())
}

/// Norm of the averaged central-difference estimator at `x`; the Monte
/// Carlo stationarity surrogate `||grad f_eta(x)||`.
pub fn smoothed_grad_norm_mc<F, R>(f: F, x: &[f64], eta: f64, samples: usize, rng: &mut R) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    if !(eta > 0.0) || samples == 0 {
        return Err(Error::contract("smoothed_grad_norm_mc needs eta > 0 and samples >= 1"));
    }
    let n = x.len();
    let mut sum = vec![0.0; n];
    let mut plus = vec![0.0; n];
    let mut minus = vec![0.0; n];
    for _ in 0..samples {
        let v = sample_unit_sphere(rng, n);
        for i in 0..n {
            plus[i] = x[i] + eta * v.0[i];
            minus[i] = x[i] - eta * v.0[i];
        }
        let g = zo_gradient(f(&plus), f(&minus), &v, eta)?;
        for (s, gi) in sum.iter_mut().zip(&g.g) {
            *s += gi;
        }
    }
    Ok(norm2(&sum) / samples as f64)
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
