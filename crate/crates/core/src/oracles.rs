//! Reference computations used to check the solvers: exact discrete optimal
//! transport, 1D quantile formulas and the circle and Gaussian closed forms.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{sym_eigen, sym_sqrt};

/// Largest number of atoms per side accepted by [`network_simplex`].
pub const MAX_ATOMS: usize = 2048;
const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    pub support: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(support: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let m = DiscreteMeasure { support, weights };
        m.validate()?;
        Ok(m)
    }

    /// Rescales nonnegative weights to unit mass.
    pub fn normalized(support: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(invalid(format!("total weight {total} must be positive")));
        }
        Self::new(support, weights.iter().map(|w| w / total).collect())
    }

    /// 1D measure from points and weights.
    pub fn on_line(points: &[f64], weights: Vec<f64>) -> Result<Self> {
        Self::normalized(points.iter().map(|&x| vec![x]).collect(), weights)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(invalid("discrete measure has no atoms"));
        }
        if self.support.len() != self.weights.len() {
            return Err(Error::ShapeMismatch {
                expected: self.weights.len(),
                got: self.support.len(),
            });
        }
        let d = self.dim();
        if d == 0 || self.support.iter().any(|x| x.len() != d || x.iter().any(|v| !v.is_finite())) {
            return Err(invalid("support points must share a positive dimension and be finite"));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("weights must be nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOL * self.weights.len() as f64 {
            return Err(invalid(format!("weights sum to {total}, expected 1")));
        }
        Ok(())
    }
}

/// Ground cost `dist(x, y)^power`, with the torus metric when `period` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundCost {
    pub power: f64,
    pub period: Option<f64>,
}

impl GroundCost {
    pub fn w1(period: Option<f64>) -> Self {
        GroundCost { power: 1.0, period }
    }

    pub fn squared() -> Self {
        GroundCost { power: 2.0, period: None }
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        let s: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| {
                let mut d = (a - b).abs();
                if let Some(t) = self.period {
                    d = d.rem_euclid(t);
                    d = d.min(t - d);
                }
                d * d
            })
            .sum();
        s.sqrt()
    }

    pub fn cost(&self, x: &[f64], y: &[f64]) -> f64 {
        let d = self.distance(x, y);
        if self.power == 1.0 {
            d
        } else {
            d.powf(self.power)
        }
    }
}

/// Exact W1 between two discrete measures. One-dimensional inputs use the
/// CDF formula; everything else goes through [`network_simplex`].
pub fn discrete_ot_w1(a: &DiscreteMeasure, b: &DiscreteMeasure, period: Option<f64>) -> Result<f64> {
    check_pair(a, b)?;
    if a.dim() == 1 {
        let xa: Vec<f64> = a.support.iter().map(|x| x[0]).collect();
        let xb: Vec<f64> = b.support.iter().map(|x| x[0]).collect();
        return Ok(w1_line(&xa, &a.weights, &xb, &b.weights, period));
    }
    Ok(network_simplex(a, b, GroundCost::w1(period))?.cost)
}

fn check_pair(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<()> {
    a.validate()?;
    b.validate()?;
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (ma, mb): (f64, f64) = (a.weights.iter().sum(), b.weights.iter().sum());
    if (ma - mb).abs() > MASS_TOL * (a.len() + b.len()) as f64 {
        return Err(invalid(format!("marginal masses differ: {ma} vs {mb}")));
    }
    Ok(())
}

/// `∫|F_a − F_b − α|` over the line (α = 0) or over one period of the circle
/// (α the weighted median of the CDF gap).
pub fn w1_line(xa: &[f64], wa: &[f64], xb: &[f64], wb: &[f64], period: Option<f64>) -> f64 {
    let wrap = |x: f64| period.map_or(x, |t| x.rem_euclid(t));
    let mut events: Vec<(f64, f64)> = xa
        .iter()
        .zip(wa)
        .map(|(&x, &w)| (wrap(x), w))
        .chain(xb.iter().zip(wb).map(|(&x, &w)| (wrap(x), -w)))
        .collect();
    events.sort_by(|l, r| l.0.total_cmp(&r.0));
    // Pieces (length, gap) of the piecewise-constant CDF difference.
    let mut pieces = Vec::with_capacity(events.len());
    let mut gap = 0.0;
    for k in 0..events.len() {
        gap += events[k].1;
        let end = if k + 1 < events.len() {
            events[k + 1].0
        } else if let Some(t) = period {
            events[0].0 + t
        } else {
            events[k].0
        };
        let len = end - events[k].0;
        if len > 0.0 {
            pieces.push((len, gap));
        }
    }
    let alpha = if period.is_some() { weighted_median(&mut pieces) } else { 0.0 };
    pieces.iter().map(|(len, g)| len * (g - alpha).abs()).sum()
}

fn weighted_median(pieces: &mut [(f64, f64)]) -> f64 {
    if pieces.is_empty() {
        return 0.0;
    }
    let mut sorted = pieces.to_vec();
    sorted.sort_by(|l, r| l.1.total_cmp(&r.1));
    let half = sorted.iter().map(|p| p.0).sum::<f64>() / 2.0;
    let mut acc = 0.0;
    for (len, g) in &sorted {
        acc += len;
        if acc >= half {
            return *g;
        }
    }
    sorted[sorted.len() - 1].1
}

#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub cost: f64,
    /// Basic cells `(i, j, mass)`.
    pub flows: Vec<(usize, usize, f64)>,
    pub pivots: usize,
}

#[derive(Clone, Copy)]
struct Cell {
    row: usize,
    col: usize,
    flow: f64,
}

/// Transportation simplex on the complete bipartite graph (network simplex
/// with a spanning-tree basis and block pricing).
pub fn network_simplex(a: &DiscreteMeasure, b: &DiscreteMeasure, cost: GroundCost) -> Result<TransportPlan> {
    check_pair(a, b)?;
    let (n, m) = (a.len(), b.len());
    if n > MAX_ATOMS || m > MAX_ATOMS {
        return Err(invalid(format!(
            "network simplex is limited to {MAX_ATOMS} atoms per side, got {n} and {m}"
        )));
    }
    let c: Vec<f64> = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| cost.cost(&a.support[i], &b.support[j]))
        .collect();
    let scale = c.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
    let tol = 1e-12 * scale;

    let mut cells = northwest_corner(&a.weights, &b.weights);
    let nodes = n + m;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    for (k, cell) in cells.iter().enumerate() {
        adj[cell.row].push(k);
        adj[n + cell.col].push(k);
    }
    let mut tree = Tree::new(nodes);
    tree.rebuild(&cells, &adj, &c, n, m);

    let total = n * m;
    let block = ((total as f64).sqrt().ceil() as usize).max(16);
    let max_pivots = 50 * nodes * nodes;
    let mut cursor = 0usize;
    let mut pivots = 0usize;
    loop {
        // Block pricing: best reduced cost within the first block that has one.
        let mut best = (0usize, -tol);
        let mut scanned = 0;
        let mut found = false;
        while scanned < total {
            let k = (cursor + scanned) % total;
            let (i, j) = (k / m, k % m);
            let rc = c[k] - tree.pot[i] - tree.pot[n + j];
            if rc < best.1 {
                best = (k, rc);
                found = true;
            }
            scanned += 1;
            if found && scanned % block == 0 {
                break;
            }
        }
        if !found {
            break;
        }
        cursor = (cursor + scanned) % total;
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::NonConverged {
                iterations: pivots,
                residual: -best.1,
            });
        }
        let (ei, ej) = (best.0 / m, best.0 % m);
        let path = tree.cycle(ei, n + ej);
        // path edges alternate −, +, −, ... starting from the column side.
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (pos, &e) in path.iter().enumerate() {
            if pos % 2 == 0 && cells[e].flow < theta {
                theta = cells[e].flow;
                leave = e;
            }
        }
        for (pos, &e) in path.iter().enumerate() {
            cells[e].flow += if pos % 2 == 0 { -theta } else { theta };
        }
        let old = cells[leave];
        adj[old.row].retain(|&x| x != leave);
        adj[n + old.col].retain(|&x| x != leave);
        cells[leave] = Cell {
            row: ei,
            col: ej,
            flow: theta,
        };
        adj[ei].push(leave);
        adj[n + ej].push(leave);
        tree.rebuild(&cells, &adj, &c, n, m);
    }
    let cost_total = cells.iter().map(|e| e.flow.max(0.0) * c[e.row * m + e.col]).sum();
    Ok(TransportPlan {
        cost: cost_total,
        flows: cells.iter().map(|e| (e.row, e.col, e.flow.max(0.0))).collect(),
        pivots,
    })
}

fn northwest_corner(a: &[f64], b: &[f64]) -> Vec<Cell> {
    let (n, m) = (a.len(), b.len());
    let (mut ra, mut rb) = (a[0], b[0]);
    let (mut i, mut j) = (0, 0);
    let mut cells = Vec::with_capacity(n + m - 1);
    loop {
        let f = ra.min(rb).max(0.0);
        cells.push(Cell { row: i, col: j, flow: f });
        ra -= f;
        rb -= f;
        if i + 1 == n && j + 1 == m {
            break;
        }
        // Move one step at a time so the basis stays a spanning tree.
        if (ra <= rb && i + 1 < n) || j + 1 == m {
            i += 1;
            ra += a[i];
        } else {
            j += 1;
            rb += b[j];
        }
    }
    cells
}

struct Tree {
    pot: Vec<f64>,
    parent_edge: Vec<usize>,
    parent: Vec<usize>,
    depth: Vec<usize>,
}

impl Tree {
    fn new(nodes: usize) -> Self {
        Tree {
            pot: vec![0.0; nodes],
            parent_edge: vec![usize::MAX; nodes],
            parent: vec![usize::MAX; nodes],
            depth: vec![0; nodes],
        }
    }

    fn rebuild(&mut self, cells: &[Cell], adj: &[Vec<usize>], c: &[f64], n: usize, m: usize) {
        self.parent.fill(usize::MAX);
        self.parent[0] = 0;
        self.pot[0] = 0.0;
        self.depth[0] = 0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for &e in &adj[u] {
                let cell = cells[e];
                let v = if u < n { n + cell.col } else { cell.row };
                if self.parent[v] != usize::MAX {
                    continue;
                }
                self.parent[v] = u;
                self.parent_edge[v] = e;
                self.depth[v] = self.depth[u] + 1;
                let ce = c[cell.row * m + cell.col];
                // u_i + v_j = c_ij on basic cells.
                self.pot[v] = ce - self.pot[u];
                queue.push_back(v);
            }
        }
    }

    /// Tree edges on the path from `col` to `row`, in walking order.
    fn cycle(&self, row: usize, col: usize) -> Vec<usize> {
        let (mut x, mut y) = (col, row);
        let mut from_col = Vec::new();
        let mut from_row = Vec::new();
        while self.depth[x] > self.depth[y] {
            from_col.push(self.parent_edge[x]);
            x = self.parent[x];
        }
        while self.depth[y] > self.depth[x] {
            from_row.push(self.parent_edge[y]);
            y = self.parent[y];
        }
        while x != y {
            from_col.push(self.parent_edge[x]);
            x = self.parent[x];
            from_row.push(self.parent_edge[y]);
            y = self.parent[y];
        }
        from_col.extend(from_row.into_iter().rev());
        from_col
    }
}

/// Quantile function `s ↦ F⁻¹(s)` on `(0, 1)`.
pub type Quantile = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Midpoint rule for `∫₀¹ |F_a⁻¹(s) − F_b⁻¹(s)| ds`.
pub fn quantile_w1_1d(fa: &dyn Fn(f64) -> f64, fb: &dyn Fn(f64) -> f64, quad_points: usize) -> f64 {
    let n = quad_points.max(1);
    let h = 1.0 / n as f64;
    (0..n)
        .map(|k| {
            let s = (k as f64 + 0.5) * h;
            (fa(s) - fb(s)).abs()
        })
        .sum::<f64>()
        * h
}

/// Pointwise average of quantile functions.
pub fn quantile_barycenter_1d(quantiles: Vec<Quantile>) -> Result<Quantile> {
    if quantiles.is_empty() {
        return Err(invalid("barycenter of an empty family"));
    }
    let n = quantiles.len() as f64;
    Ok(Arc::new(move |s| quantiles.iter().map(|q| q(s)).sum::<f64>() / n))
}

/// Quantile of the uniform law on `[lo, hi]`.
pub fn uniform_quantile(lo: f64, hi: f64) -> Quantile {
    Arc::new(move |s| lo + s * (hi - lo))
}

/// W2 between uniform measures on two circles in the plane.
pub fn circles_w2(m1: &[f64], r1: f64, m2: &[f64], r2: f64) -> Result<f64> {
    if !(r1 >= 0.0 && r2 >= 0.0) {
        return Err(invalid(format!("radii must be nonnegative, got {r1} and {r2}")));
    }
    if m1.len() != m2.len() {
        return Err(Error::ShapeMismatch {
            expected: m1.len(),
            got: m2.len(),
        });
    }
    let dm: f64 = m1.iter().zip(m2).map(|(a, b)| (b - a) * (b - a)).sum();
    Ok((dm + (r2 - r1) * (r2 - r1)).sqrt())
}

/// W2 between centred Gaussians with covariances `s1`, `s2`.
pub fn gaussian_w2(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    for s in [s1, s2] {
        if !s.is_square() {
            return Err(invalid("covariance must be square"));
        }
        let asym = (s - s.transpose()).amax();
        let scale = s.amax().max(1.0);
        if asym > 1e-10 * scale {
            return Err(invalid("covariance is not symmetric"));
        }
        let lo = sym_eigen(s).0.min();
        if lo < -1e-10 * scale {
            return Err(invalid(format!("covariance is not PSD (eigenvalue {lo:e})")));
        }
    }
    if s1.nrows() != s2.nrows() {
        return Err(Error::ShapeMismatch {
            expected: s1.nrows(),
            got: s2.nrows(),
        });
    }
    let r2 = sym_sqrt(s2);
    let cross = sym_sqrt(&(&r2 * s1 * &r2)).trace();
    Ok((s1.trace() + s2.trace() - 2.0 * cross).max(0.0).sqrt())
}
