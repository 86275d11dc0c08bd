//! Exact Euclidean projection onto small polyhedra `{z : A z >= b, z >= 0?}`.
//!
//! Projection is computed by enumerating candidate active sets: for each set
//! of at most `p` rows, solve the equality-constrained least-distance problem
//! and stop at the first candidate that is feasible with nonnegative
//! multipliers. Those are the KKT conditions of a convex problem, so that
//! candidate is the projection. Smaller active sets are tried first.

use crate::{Error, Result};

/// Largest variable dimension supported by the enumeration.
pub const MAX_DIM: usize = 4;
/// Largest number of general (non-sign) rows.
pub const MAX_ROWS: usize = 6;

const TOTAL_ROWS: usize = MAX_DIM + MAX_ROWS;
const FEAS_TOL: f64 = 1e-10;
const MULT_TOL: f64 = 1e-12;
const PIVOT_TOL: f64 = 1e-13;

/// Stored inline (no heap), so a template can be copied and its right-hand
/// side updated cheaply inside solver loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Polyhedron {
    dim: usize,
    /// Rows of `A` followed by the sign rows when `nonneg` is set.
    rows: [[f64; MAX_DIM]; TOTAL_ROWS],
    rhs: [f64; TOTAL_ROWS],
    len: usize,
    general: usize,
}

/// Projection together with one multiplier per row (general rows first,
/// then sign rows).
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub z: Vec<f64>,
    pub multipliers: Vec<f64>,
}

impl Polyhedron {
    pub fn new(dim: usize, a: &[Vec<f64>], b: &[f64], nonneg: bool) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::contract(format!("polyhedron dimension must be in 1..={MAX_DIM}, got {dim}")));
        }
        if a.len() != b.len() || a.len() > MAX_ROWS {
            return Err(Error::contract(format!(
                "polyhedron needs matching A/b with at most {MAX_ROWS} rows (got {} and {})",
                a.len(),
                b.len()
            )));
        }
        let mut rows = [[0.0; MAX_DIM]; TOTAL_ROWS];
        let mut rhs = [0.0; TOTAL_ROWS];
        for (r, (row, &bi)) in a.iter().zip(b).enumerate() {
            if row.len() != dim {
                return Err(Error::contract("constraint row has the wrong length"));
            }
            rows[r][..dim].copy_from_slice(row);
            rhs[r] = bi;
        }
        let mut len = a.len();
        if nonneg {
            for j in 0..dim {
                rows[len][j] = 1.0;
                len += 1;
            }
        }
        Ok(Polyhedron { dim, rows, rhs, len, general: a.len() })
    }

    /// The nonnegative orthant in `R^dim`.
    pub fn orthant(dim: usize) -> Result<Self> {
        Polyhedron::new(dim, &[], &[], true)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_rows(&self) -> usize {
        self.len
    }

    /// Row `r` as `(a_r, b_r)` meaning `a_r . z >= b_r`.
    pub fn row(&self, r: usize) -> (&[f64], f64) {
        (&self.rows[r][..self.dim], self.rhs[r])
    }

    /// Replaces the right-hand side of general row `r`.
    pub fn set_rhs(&mut self, r: usize, value: f64) {
        assert!(r < self.general);
        self.rhs[r] = value;
    }

    fn slack(&self, r: usize, z: &[f64]) -> f64 {
        dot(&self.rows[r][..self.dim], z) - self.rhs[r]
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        (0..self.len).all(|r| self.slack(r, z) >= -tol * (1.0 + self.rhs[r].abs()))
    }

    pub fn project(&self, point: &[f64]) -> Result<Vec<f64>> {
        let mut z = point.to_vec();
        self.project_in_place(&mut z)?;
        Ok(z)
    }

    /// Projects `z` onto the polyhedron, overwriting it.
    pub fn project_in_place(&self, z: &mut [f64]) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::contract("projection point has the wrong dimension"));
        }
        if self.contains(z, FEAS_TOL) {
            return Ok(());
        }
        let best = self.enumerate(z)?;
        z.copy_from_slice(&best.0[..self.dim]);
        Ok(())
    }

    pub fn project_with_multipliers(&self, point: &[f64]) -> Result<Projection> {
        if point.len() != self.dim {
            return Err(Error::contract("projection point has the wrong dimension"));
        }
        if self.contains(point, FEAS_TOL) {
            return Ok(Projection { z: point.to_vec(), multipliers: vec![0.0; self.len] });
        }
        let (z, mult) = self.enumerate(point)?;
        Ok(Projection { z: z[..self.dim].to_vec(), multipliers: mult[..self.len].to_vec() })
    }

    fn enumerate(&self, point: &[f64]) -> Result<([f64; MAX_DIM], [f64; TOTAL_ROWS])> {
        let p = self.dim;
        let q = self.len;
        let mut idx = [0usize; MAX_DIM];
        for k in 1..=p.min(q) {
            for mask in 1u32..(1u32 << q) {
                if mask.count_ones() as usize != k {
                    continue;
                }
                let mut c = 0;
                for r in 0..q {
                    if mask & (1 << r) != 0 {
                        idx[c] = r;
                        c += 1;
                    }
                }
                let Some(lambda) = self.solve_active(point, &idx[..k]) else { continue };
                if lambda[..k].iter().any(|&l| l < -MULT_TOL) {
                    continue;
                }
                let mut z = [0.0; MAX_DIM];
                z[..p].copy_from_slice(point);
                for (s, &r) in idx[..k].iter().enumerate() {
                    for j in 0..p {
                        z[j] += lambda[s] * self.rows[r][j];
                    }
                }
                if !self.contains(&z[..p], FEAS_TOL) {
                    continue;
                }
                let mut mult = [0.0; TOTAL_ROWS];
                for (s, &r) in idx[..k].iter().enumerate() {
                    mult[r] = lambda[s].max(0.0);
                }
                return Ok((z, mult));
            }
        }
        Err(Error::Infeasible(format!("no feasible active set found for point {point:?}")))
    }

    /// Multipliers of `min ||z - point||^2 / 2` s.t. `a_r . z = b_r` for `r` in
    /// `active`: `(A_S A_S^T) lambda = b_S - A_S point`. `None` if singular.
    fn solve_active(&self, point: &[f64], active: &[usize]) -> Option<[f64; MAX_DIM]> {
        let k = active.len();
        let mut g = [[0.0; MAX_DIM + 1]; MAX_DIM];
        for (s, &r) in active.iter().enumerate() {
            for (t, &u) in active.iter().enumerate() {
                g[s][t] = dot(&self.rows[r][..self.dim], &self.rows[u][..self.dim]);
            }
            g[s][k] = self.rhs[r] - dot(&self.rows[r][..self.dim], point);
        }
        solve_small(&mut g, k)
    }
}

/// Gaussian elimination with partial pivoting on an augmented `k x (k+1)` system.
fn solve_small(g: &mut [[f64; MAX_DIM + 1]; MAX_DIM], k: usize) -> Option<[f64; MAX_DIM]> {
    let scale = (0..k).map(|i| g[i][i].abs()).fold(0.0, f64::max).max(1e-300);
    for col in 0..k {
        let piv = (col..k).max_by(|&a, &b| g[a][col].abs().total_cmp(&g[b][col].abs()))?;
        if g[piv][col].abs() <= PIVOT_TOL * scale {
            return None;
        }
        g.swap(col, piv);
        for row in col + 1..k {
            let f = g[row][col] / g[col][col];
            for c in col..=k {
                g[row][c] -= f * g[col][c];
            }
        }
    }
    let mut x = [0.0; MAX_DIM];
    for row in (0..k).rev() {
        let mut s = g[row][k];
        for c in row + 1..k {
            s -= g[row][c] * x[c];
        }
        x[row] = s / g[row][row];
    }
    Some(x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Componentwise `max(z, 0)`.
pub fn project_orthant(z: &mut [f64]) {
    for v in z {
        *v = v.max(0.0);
    }
}

/// Componentwise clamp into `[lo, hi]`.
pub fn project_box(z: &mut [f64], lo: f64, hi: f64) {
    for v in z {
        *v = v.clamp(lo, hi);
    }
}
