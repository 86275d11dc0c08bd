//! Communication graphs and doubly stochastic mixing.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{Purpose, StreamKey};
use crate::{Error, Result};

/// Row and column sums of a mixing matrix must be within this of one.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Erdős–Rényi draws are retried this many times before giving up.
pub const ER_MAX_ATTEMPTS: usize = 1000;

const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITERS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Complete,
    Ring,
    Sparse,
    Tree,
    ErdosRenyi,
}

impl Topology {
    pub const ALL: [Topology; 5] =
        [Topology::Complete, Topology::Ring, Topology::Sparse, Topology::Tree, Topology::ErdosRenyi];

    pub fn name(self) -> &'static str {
        match self {
            Topology::Complete => "complete",
            Topology::Ring => "ring",
            Topology::Sparse => "sparse",
            Topology::Tree => "tree",
            Topology::ErdosRenyi => "erdos_renyi",
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "complete" => Ok(Topology::Complete),
            "ring" | "cycle" => Ok(Topology::Ring),
            "sparse" => Ok(Topology::Sparse),
            "tree" => Ok(Topology::Tree),
            "erdos_renyi" | "er" => Ok(Topology::ErdosRenyi),
            other => Err(Error::Config(format!("unknown topology `{other}`"))),
        }
    }
}

/// Parameters used by the random families. Ignored by complete and ring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopologyParams {
    /// Target average degree of the sparse family.
    pub sparse_degree: f64,
    /// Edge probability of the Erdős–Rényi family.
    pub er_probability: f64,
    pub seed: u64,
}

impl Default for TopologyParams {
    fn default() -> Self {
        TopologyParams { sparse_degree: 3.0, er_probability: 0.2, seed: 0 }
    }
}

/// Undirected, connected, loop-free graph on `m >= 2` nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    m: usize,
    edges: BTreeSet<(usize, usize)>,
    kind: Topology,
}

impl Graph {
    /// Builds a graph from an edge list, normalising each pair to `(lo, hi)`.
    pub fn from_edges(m: usize, edges: impl IntoIterator<Item = (usize, usize)>, kind: Topology) -> Result<Self> {
        if m < 2 {
            return Err(Error::Construction { param: "m", reason: format!("need at least 2 nodes, got {m}") });
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::Construction { param: "edges", reason: format!("self-loop at node {a}") });
            }
            if a >= m || b >= m {
                return Err(Error::Construction {
                    param: "edges",
                    reason: format!("edge ({a},{b}) out of range for m={m}"),
                });
            }
            set.insert((a.min(b), a.max(b)));
        }
        let g = Graph { m, edges: set, kind };
        if !g.is_connected() {
            return Err(Error::Construction { param: "edges", reason: "graph is not connected".into() });
        }
        Ok(g)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn kind(&self) -> Topology {
        self.kind
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.m];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn average_degree(&self) -> f64 {
        2.0 * self.edges.len() as f64 / self.m as f64
    }

    fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.m];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        connected(self.m, &self.edges)
    }

    /// 0/1 adjacency matrix.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.m, self.m);
        for &(i, j) in &self.edges {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
        a
    }

    /// Adjacency matrix in the plain-text dump format.
    pub fn to_text(&self) -> String {
        matrix_to_text(&self.adjacency())
    }
}

fn connected(m: usize, edges: &BTreeSet<(usize, usize)>) -> bool {
    if m == 0 {
        return false;
    }
    let mut adj = vec![Vec::new(); m];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; m];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == m
}

/// Builds a connected graph of the requested family.
///
/// The random families (sparse, tree, Erdős–Rényi) are fully determined by
/// `params.seed`.
pub fn build_topology(kind: Topology, m: usize, params: &TopologyParams) -> Result<Graph> {
    if m < 2 {
        return Err(Error::Construction { param: "m", reason: format!("need at least 2 nodes, got {m}") });
    }
    let mut rng = StreamKey::new(params.seed, Purpose::Graph).index(kind as usize).rng();
    let edges: Vec<(usize, usize)> = match kind {
        Topology::Complete => (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect(),
        Topology::Ring => (0..m).map(|i| (i, (i + 1) % m)).collect(),
        Topology::Tree => random_tree(m, &mut rng),
        Topology::Sparse => {
            let d = params.sparse_degree;
            if !(d.is_finite() && d > 0.0 && d <= (m - 1) as f64) {
                return Err(Error::Construction {
                    param: "sparse_degree",
                    reason: format!("must lie in (0, {}] for m={m}, got {d}", m - 1),
                });
            }
            let target = ((d * m as f64 / 2.0).round() as usize).max(m - 1);
            let mut edges: BTreeSet<(usize, usize)> =
                random_tree(m, &mut rng).into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
            let mut free: Vec<(usize, usize)> =
                (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).filter(|e| !edges.contains(e)).collect();
            free.shuffle(&mut rng);
            let extra = target.saturating_sub(edges.len());
            edges.extend(free.into_iter().take(extra));
            edges.into_iter().collect()
        }
        Topology::ErdosRenyi => {
            let p = params.er_probability;
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Construction {
                    param: "er_probability",
                    reason: format!("must lie in (0, 1], got {p}"),
                });
            }
            let mut found = None;
            for _ in 0..ER_MAX_ATTEMPTS {
                let edges: BTreeSet<(usize, usize)> =
                    (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).filter(|_| rng.random::<f64>() < p).collect();
                if connected(m, &edges) {
                    found = Some(edges);
                    break;
                }
            }
            match found {
                Some(e) => e.into_iter().collect(),
                None => {
                    return Err(Error::Construction {
                        param: "er_probability",
                        reason: format!("no connected draw in {ER_MAX_ATTEMPTS} attempts (m={m}, p={p})"),
                    })
                }
            }
        }
    };
    Graph::from_edges(m, edges, kind)
}

/// Uniform random labelled tree on `m` nodes (uniform spanning tree of K_m),
/// decoded from a random Prüfer sequence.
fn random_tree<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if m == 2 {
        return vec![(0, 1)];
    }
    let seq: Vec<usize> = (0..m - 2).map(|_| rng.random_range(0..m)).collect();
    let mut degree = vec![1usize; m];
    for &s in &seq {
        degree[s] += 1;
    }
    let mut edges = Vec::with_capacity(m - 1);
    for &s in &seq {
        let leaf = (0..m).find(|&j| degree[j] == 1).expect("a leaf always exists");
        edges.push((leaf, s));
        degree[leaf] -= 1;
        degree[s] -= 1;
    }
    let rest: Vec<usize> = (0..m).filter(|&j| degree[j] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges
}

/// Doubly stochastic weight matrix together with its consensus rate
/// `lambda_w = ||W - (1/m) 11^T||_2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    w: DMatrix<f64>,
    lambda_w: f64,
}

impl MixingMatrix {
    /// Validates a user-supplied weight matrix.
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        check_doubly_stochastic(&w)?;
        if !(0..w.nrows()).any(|i| w[(i, i)] > 0.0) {
            return Err(Error::contract("mixing matrix needs a positive diagonal entry"));
        }
        let lambda_w = spectral_gap(&w)?;
        if lambda_w >= 1.0 - 1e-14 {
            return Err(Error::contract(format!("lambda_w = {lambda_w} is not below 1")));
        }
        Ok(MixingMatrix { w, lambda_w })
    }

    /// The single-agent matrix `[1]`.
    pub fn single() -> Self {
        MixingMatrix { w: DMatrix::from_element(1, 1, 1.0), lambda_w: 0.0 }
    }

    pub fn m(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn lambda_w(&self) -> f64 {
        self.lambda_w
    }

    /// Returns `W x`.
    pub fn mix(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        mix(&self.w, x)
    }

    pub fn to_text(&self) -> String {
        matrix_to_text(&self.w)
    }
}

fn check_doubly_stochastic(w: &DMatrix<f64>) -> Result<()> {
    let m = w.nrows();
    if m == 0 || w.ncols() != m {
        return Err(Error::contract(format!("mixing matrix must be square, got {}x{}", m, w.ncols())));
    }
    if w.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::contract("mixing matrix has a negative or NaN entry"));
    }
    for i in 0..m {
        let row: f64 = w.row(i).sum();
        let col: f64 = w.column(i).sum();
        if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::contract(format!("row/column {i} sums to {row}/{col}, not 1")));
        }
    }
    Ok(())
}

/// Metropolis–Hastings weights: `w_ij = 1/(1 + max(deg_i, deg_j))` on edges,
/// the remaining mass on the diagonal.
pub fn metropolis_weights(g: &Graph) -> Result<MixingMatrix> {
    let m = g.m();
    let deg = g.degrees();
    let mut w = DMatrix::zeros(m, m);
    for &(i, j) in g.edges() {
        let v = 1.0 / (1 + deg[i].max(deg[j])) as f64;
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    for i in 0..m {
        let off: f64 = (0..m).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    debug_assert!(g.neighbours().iter().enumerate().all(|(i, nb)| nb.iter().all(|&j| w[(i, j)] > 0.0)));
    MixingMatrix::new(w)
}

/// Largest singular value of `W - (1/m) 11^T`, by power iteration on the
/// symmetrised product `(W - J)^T (W - J)`.
pub fn spectral_gap(w: &DMatrix<f64>) -> Result<f64> {
    let m = w.nrows();
    if w.ncols() != m || m == 0 {
        return Err(Error::contract(format!("spectral_gap needs a square matrix, got {}x{}", m, w.ncols())));
    }
    let centred = w.map(|v| v - 1.0 / m as f64);
    let gram = centred.transpose() * &centred;
    if gram.iter().all(|&v| v.abs() < 1e-300) {
        return Ok(0.0);
    }
    // Deterministic, generic starting vector.
    let mut v = nalgebra::DVector::from_fn(m, |i, _| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract());
    let mut eig = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let norm = v.norm();
        if norm < 1e-300 {
            return Ok(0.0);
        }
        v /= norm;
        let next = &gram * &v;
        let rayleigh = v.dot(&next);
        if (rayleigh - eig).abs() <= POWER_TOL * rayleigh.abs().max(1.0) {
            return Ok(rayleigh.max(0.0).sqrt());
        }
        eig = rayleigh;
        v = next;
    }
    Err(Error::Numerical(format!("power iteration for lambda_w did not converge in {POWER_MAX_ITERS} iterations")))
}

/// Returns `W x` for a stacked `m x n` iterate.
pub fn mix(w: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if w.ncols() != x.nrows() {
        return Err(Error::contract(format!("mix: W is {}x{} but x has {} rows", w.nrows(), w.ncols(), x.nrows())));
    }
    Ok(w * x)
}

/// One row per line, space-separated, 17 significant digits.
pub fn matrix_to_text(a: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..a.nrows() {
        let row: Vec<String> = (0..a.ncols()).map(|j| format!("{:.16e}", a[(i, j)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Inverse of [`matrix_to_text`].
pub fn matrix_from_text(text: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Config(format!("bad matrix entry `{t}`: {e}"))))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let n = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config("ragged matrix dump".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
}
