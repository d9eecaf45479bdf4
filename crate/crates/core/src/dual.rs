//! Regularized W1 distance as a support function:
//! `l(δ) = max_{η ∈ ∩E_x} ⟨η, δ⟩ − ε ηᵀ(K∘G)η`.
//!
//! The feasible set is the Lipschitz ball of band-limited test functions,
//! discretized on a [`ConstraintGrid`]: `‖J_j η‖ ≤ 1` at every grid point.
//! The constant mode pairs with the (zero) mass difference and is dropped, so
//! all work happens on the `p − 1` free coordinates where `K∘G` is diagonal
//! and positive.
//!
//! The solver is projected gradient ascent with Dykstra's cyclic projections
//! onto the individual cylinders. Once a few ascent steps have located the
//! near-active constraints, an active-set Newton iteration on the multipliers
//! of the Lagrangian dual
//!
//! ```text
//! g(λ) = Σ λ_j + ¼ δᵀ (ε K∘G + Σ λ_j K_j)^{-1} δ,   λ ≥ 0
//! ```
//!
//! finishes the solve to machine precision. The result is only accepted after
//! checking primal feasibility on the whole grid and a vanishing duality gap;
//! otherwise the ascent simply continues.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::basis::{ConstraintGrid, FourierVec};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DualMode {
    /// Pointwise Lipschitz constraints on the grid.
    #[default]
    Intersection,
    /// The single ellipsoid `ηᵀ(K∘G)η ≤ 1` that contains the intersection.
    Relaxed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualOptions {
    pub tol_obj: f64,
    pub tol_feas: f64,
    pub max_iter: usize,
    pub mode: DualMode,
    /// Cap on Dykstra cycles per projection.
    pub dykstra_cycles: usize,
    /// Finish with the exact active-set step once the ascent has located the
    /// binding constraints. Off means plain projected gradient ascent.
    pub refine: bool,
    /// Ascent iterations before the first refinement attempt (then doubling).
    pub warmup_iters: usize,
}

impl Default for DualOptions {
    fn default() -> Self {
        DualOptions {
            tol_obj: 1e-8,
            tol_feas: 1e-7,
            max_iter: 5000,
            mode: DualMode::Intersection,
            dykstra_cycles: 200,
            refine: true,
            warmup_iters: 4,
        }
    }
}

/// Previous solution used to seed a nearby solve.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub eta_free: Vec<f64>,
    pub active: Vec<usize>,
    pub multipliers: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    /// Maximizer `η*` (length `p`, constant coordinate 0). Equals `∇l(δ)`.
    pub eta: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub feasibility_residual: f64,
    /// `‖(K∘G)^{1/2} η*‖`.
    pub grad_norm_kg: f64,
    pub converged: bool,
    /// Grid points carrying a positive multiplier.
    pub active: Vec<usize>,
    pub multipliers: Vec<f64>,
}

impl DualSolution {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            eta_free: self.eta.iter().skip(1).cloned().collect(),
            active: self.active.clone(),
            multipliers: self.multipliers.clone(),
        }
    }

    fn zero(p: usize) -> Self {
        DualSolution {
            eta: DVector::zeros(p),
            value: 0.0,
            iterations: 0,
            feasibility_residual: 0.0,
            grad_norm_kg: 0.0,
            converged: true,
            active: Vec::new(),
            multipliers: Vec::new(),
        }
    }
}

const POLISH_FEAS: f64 = 1e-11;
const POLISH_ROUNDS: usize = 40;
const NEWTON_ITERS: usize = 400;
const NEWTON_TOL: f64 = 1e-14;
/// Below this the line search is limited by rounding in `g`.
const NEWTON_STALL: f64 = 1e-10;
/// Fallback ladder `ε·3^k, k = CONTINUATION_RUNGS..1`.
const CONTINUATION_RUNGS: i32 = 6;

pub fn solve_dual(delta: &FourierVec, eps: f64, grid: &ConstraintGrid, opts: &DualOptions) -> Result<DualSolution> {
    solve_dual_warm(delta, eps, grid, opts, None)
}

/// As [`solve_dual`], seeded from a nearby solution.
pub fn solve_dual_warm(
    delta: &FourierVec,
    eps: f64,
    grid: &ConstraintGrid,
    opts: &DualOptions,
    warm: Option<&WarmStart>,
) -> Result<DualSolution> {
    if !delta.same_basis(&FourierVec::zeros(grid.spec().clone())) {
        return Err(invalid("difference vector and constraint grid use different bases"));
    }
    let scale = delta.coeffs().amax();
    if delta.mass().abs() > 1e-10 * (1.0 + scale) {
        return Err(invalid(format!(
            "difference has nonzero constant mode {:e}; measures must have equal mass",
            delta.mass()
        )));
    }
    let min_eps = if opts.mode == DualMode::Relaxed { 0.0 } else { f64::MIN_POSITIVE };
    if !(eps.is_finite() && eps >= min_eps) {
        return Err(invalid(format!("regularization epsilon must be positive, got {eps}")));
    }
    let p = delta.len();
    let d_free: Vec<f64> = delta.coeffs().iter().skip(1).cloned().collect();
    if d_free.iter().all(|&v| v == 0.0) {
        return Ok(DualSolution::zero(p));
    }
    let problem = Problem::new(grid, eps, &d_free);
    match opts.mode {
        DualMode::Relaxed => Ok(problem.relaxed()),
        DualMode::Intersection => {
            let sol = problem.solve(opts, warm);
            if sol.converged || !opts.refine {
                return Ok(sol);
            }
            Ok(problem.continuation(opts).unwrap_or(sol))
        }
    }
}

/// `l(θ_a − θ_b)`.
pub fn distance(
    theta_a: &FourierVec,
    theta_b: &FourierVec,
    eps: f64,
    grid: &ConstraintGrid,
    opts: &DualOptions,
) -> Result<f64> {
    let sol = solve_dual(&theta_a.sub(theta_b)?, eps, grid, opts)?;
    ensure_converged(&sol)?;
    Ok(sol.value)
}

/// `∇l(δ) = η*(δ)` by the envelope theorem (length `p`, constant coordinate 0).
pub fn gradient(delta: &FourierVec, eps: f64, grid: &ConstraintGrid, opts: &DualOptions) -> Result<DVector<f64>> {
    let sol = solve_dual(delta, eps, grid, opts)?;
    ensure_converged(&sol)?;
    Ok(sol.eta)
}

pub(crate) fn ensure_converged(sol: &DualSolution) -> Result<()> {
    if sol.converged {
        Ok(())
    } else {
        Err(Error::NonConverged {
            iterations: sol.iterations,
            residual: sol.feasibility_residual,
        })
    }
}

/// Default finite-difference step `1e-4 · (1 + ‖δ‖)`.
pub fn fd_step(delta: &FourierVec) -> f64 {
    1e-4 * (1.0 + delta.coeffs().norm())
}

/// Central-difference Hessian of `l` at `δ` on the free coordinates
/// (`(p−1) × (p−1)`; the constant mode is not a free direction), symmetrized.
pub fn hessian_fd(delta: &FourierVec, eps: f64, grid: &ConstraintGrid, opts: &DualOptions) -> Result<DMatrix<f64>> {
    hessian_fd_step(delta, eps, grid, opts, fd_step(delta))
}

pub fn hessian_fd_step(
    delta: &FourierVec,
    eps: f64,
    grid: &ConstraintGrid,
    opts: &DualOptions,
    h: f64,
) -> Result<DMatrix<f64>> {
    let base = solve_dual(delta, eps, grid, opts)?;
    ensure_converged(&base)?;
    let warm = base.warm_start();
    let q = delta.len() - 1;
    let mut hess = DMatrix::zeros(q, q);
    let mut shifted = delta.coeffs().clone();
    for k in 0..q {
        let mut eval = |sign: f64| -> Result<DVector<f64>> {
            shifted[k + 1] = delta.coeffs()[k + 1] + sign * h;
            let dv = FourierVec::new(delta.spec().clone(), shifted.clone())?;
            let sol = solve_dual_warm(&dv, eps, grid, opts, Some(&warm))?;
            ensure_converged(&sol)?;
            Ok(sol.eta)
        };
        let plus = eval(1.0)?;
        let minus = eval(-1.0)?;
        shifted[k + 1] = delta.coeffs()[k + 1];
        for i in 0..q {
            hess[(i, k)] = (plus[i + 1] - minus[i + 1]) / (2.0 * h);
        }
    }
    Ok(crate::linalg::symmetrize(&hess))
}

struct Problem<'a> {
    grid: &'a ConstraintGrid,
    eps: f64,
    delta: &'a [f64],
    /// Free diagonal of `K∘G`.
    mdiag: Vec<f64>,
    q: usize,
}

fn projected_grad_norm(lambda: &[f64], grad: &[f64]) -> f64 {
    lambda
        .iter()
        .zip(grad)
        .map(|(&l, &gr)| if l > 0.0 { gr.abs() } else { (-gr).max(0.0) })
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<'a> Problem<'a> {
    fn new(grid: &'a ConstraintGrid, eps: f64, delta: &'a [f64]) -> Self {
        let spec = grid.spec();
        let q = spec.free_dim();
        Problem {
            grid,
            eps,
            delta,
            mdiag: (1..=q).map(|k| spec.gradient_energy(k)).collect(),
            q,
        }
    }

    fn objective(&self, eta: &[f64]) -> f64 {
        let quad: f64 = eta.iter().zip(&self.mdiag).map(|(e, m)| m * e * e).sum();
        dot(eta, self.delta) - self.eps * quad
    }

    fn kg_norm(&self, eta: &[f64]) -> f64 {
        eta.iter().zip(&self.mdiag).map(|(e, m)| m * e * e).sum::<f64>().sqrt()
    }

    fn max_violation(&self, eta: &[f64]) -> f64 {
        (0..self.grid.len())
            .map(|j| self.grid.free_quad(j, eta) - 1.0)
            .fold(0.0, f64::max)
    }

    fn finish(&self, eta: Vec<f64>, iterations: usize, converged: bool, active: Vec<usize>, multipliers: Vec<f64>) -> DualSolution {
        let mut full = DVector::zeros(self.q + 1);
        full.rows_mut(1, self.q).copy_from_slice(&eta);
        DualSolution {
            value: self.objective(&eta),
            feasibility_residual: self.max_violation(&eta),
            grad_norm_kg: self.kg_norm(&eta),
            eta: full,
            iterations,
            converged,
            active,
            multipliers,
        }
    }

    /// Closed form over the single ellipsoid: with `b = (K∘G)^{-1/2} δ`,
    /// `l = ‖b‖²/(4ε)` if `‖b‖ ≤ 2ε`, else `‖b‖ − ε`.
    fn relaxed(&self) -> DualSolution {
        let b: Vec<f64> = self.delta.iter().zip(&self.mdiag).map(|(d, m)| d / m.sqrt()).collect();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if nb <= 2.0 * self.eps { 1.0 / (2.0 * self.eps) } else { 1.0 / nb };
        let eta: Vec<f64> = b.iter().zip(&self.mdiag).map(|(v, m)| v * scale / m.sqrt()).collect();
        let mut full = DVector::zeros(self.q + 1);
        full.rows_mut(1, self.q).copy_from_slice(&eta);
        DualSolution {
            value: self.objective(&eta),
            feasibility_residual: (self.kg_norm(&eta).powi(2) - 1.0).max(0.0),
            grad_norm_kg: self.kg_norm(&eta),
            eta: full,
            iterations: 0,
            converged: true,
            active: Vec::new(),
            multipliers: Vec::new(),
        }
    }

    fn solve(&self, opts: &DualOptions, warm: Option<&WarmStart>) -> DualSolution {
        if let (true, Some(w)) = (opts.refine, warm) {
            let hint: Vec<(usize, f64)> = w
                .active
                .iter()
                .cloned()
                .zip(w.multipliers.iter().cloned())
                .filter(|&(j, _)| j < self.grid.len())
                .collect();
            if let Some((eta, set, lam)) = self.polish(&hint) {
                return self.finish(eta, 0, true, set, lam);
            }
        }
        let start = match warm {
            Some(w) if w.eta_free.len() == self.q => w.eta_free.clone(),
            _ => vec![0.0; self.q],
        };
        self.projected_gradient(start, opts)
    }

    /// Small ε makes the ascent slow and its multiplier estimates too rough
    /// for the active-set step. Solving at larger ε first and carrying the
    /// active set down usually lands in the right face at every rung.
    fn continuation(&self, opts: &DualOptions) -> Option<DualSolution> {
        let mut warm: Option<WarmStart> = None;
        let mut iterations = 0;
        for k in (1..=CONTINUATION_RUNGS).rev() {
            let rung = Problem::new(self.grid, self.eps * 3f64.powi(k), self.delta);
            let sol = rung.solve(opts, warm.as_ref());
            iterations += sol.iterations;
            if !sol.converged {
                return None;
            }
            warm = Some(sol.warm_start());
        }
        let mut sol = self.solve(opts, warm.as_ref());
        sol.iterations += iterations;
        sol.converged.then_some(sol)
    }

    fn projected_gradient(&self, mut eta: Vec<f64>, opts: &DualOptions) -> DualSolution {
        let q = self.q;
        let m = self.grid.len();
        let lmax = self.mdiag.iter().cloned().fold(0.0, f64::max);
        let mut step = 1.0 / (2.0 * self.eps * lmax);
        let mut obj = self.objective(&eta);
        let mut feas = self.max_violation(&eta);
        let mut incr = vec![0.0; m * q];
        let mut touched = vec![false; m];
        let mut next_refine = opts.warmup_iters.max(1);
        let mut iterations = 0;
        let mut converged = false;

        while iterations < opts.max_iter {
            iterations += 1;
            let mut accepted = None;
            for _ in 0..30 {
                let y: Vec<f64> = eta
                    .iter()
                    .zip(self.delta)
                    .zip(&self.mdiag)
                    .map(|((e, d), m)| e + step * (d - 2.0 * self.eps * m * e))
                    .collect();
                let cand = self.dykstra(&y, opts.dykstra_cycles, &mut incr, &mut touched);
                let cobj = self.objective(&cand);
                if cobj >= obj - 1e-14 * (1.0 + obj.abs()) || feas > opts.tol_feas {
                    accepted = Some((cand, cobj));
                    break;
                }
                step *= 0.5;
            }
            let Some((cand, cobj)) = accepted else { break };
            let improvement = (cobj - obj).abs();
            eta = cand;
            obj = cobj;
            feas = self.max_violation(&eta);
            let stalled = improvement < opts.tol_obj && feas < opts.tol_feas;
            if opts.refine && (stalled || iterations >= next_refine) {
                next_refine = iterations * 2;
                let hint = self.dykstra_multipliers(&eta, &incr, &touched, step);
                if let Some((eta, set, lam)) = self.polish(&hint) {
                    return self.finish(eta, iterations, true, set, lam);
                }
            }
            if stalled {
                converged = true;
                break;
            }
        }
        let hint = self.dykstra_multipliers(&eta, &incr, &touched, step);
        let (active, mult): (Vec<usize>, Vec<f64>) = hint.into_iter().unzip();
        self.finish(eta, iterations, converged, active, mult)
    }

    /// At a fixed point `η = P(η + s∇f(η))` the Dykstra increment of set `j`
    /// equals `2 s λ_j K_j η`, which gives a multiplier estimate.
    fn dykstra_multipliers(&self, eta: &[f64], incr: &[f64], touched: &[bool], step: f64) -> Vec<(usize, f64)> {
        let q = self.q;
        let mut hint = (0..self.grid.len())
            .filter(|&j| touched[j])
            .filter_map(|j| {
                let mut kv = vec![0.0; q];
                for row in self.grid.free_block(j).chunks_exact(q) {
                    let s = dot(row, eta);
                    for (k, r) in kv.iter_mut().zip(row) {
                        *k += s * r;
                    }
                }
                let denom = 2.0 * step * dot(&kv, &kv).sqrt();
                let inc = &incr[j * q..(j + 1) * q];
                let lam = dot(inc, inc).sqrt() / denom;
                (denom > 0.0 && lam.is_finite() && lam > 0.0).then_some((j, lam))
            })
            .collect::<Vec<_>>();
        // Keep one representative per touching region.
        let c: Vec<f64> = (0..self.grid.len()).map(|j| self.grid.free_quad(j, eta)).collect();
        hint.retain(|&(j, _)| self.grid.neighbors(j).all(|k| c[k] <= c[j]));
        hint.sort_by(|a, b| b.1.total_cmp(&a.1));
        hint.truncate(q);
        hint
    }

    /// Euclidean projection of `y` onto `∩_j {‖J_j z‖ ≤ 1}` by Dykstra's
    /// algorithm. `incr`/`touched` are scratch buffers reset on entry.
    fn dykstra(&self, y: &[f64], max_cycles: usize, incr: &mut [f64], touched: &mut [bool]) -> Vec<f64> {
        let q = self.q;
        incr.iter_mut().for_each(|v| *v = 0.0);
        touched.iter_mut().for_each(|v| *v = false);
        let mut x = y.to_vec();
        let mut z = vec![0.0; q];
        let mut p = vec![0.0; q];
        for _ in 0..max_cycles.max(1) {
            let mut moved = 0.0;
            for j in 0..self.grid.len() {
                let inc = &mut incr[j * q..(j + 1) * q];
                if touched[j] {
                    for i in 0..q {
                        z[i] = x[i] + inc[i];
                    }
                } else {
                    z.copy_from_slice(&x);
                }
                if !self.project_cylinder(j, &z, &mut p) {
                    if touched[j] {
                        // z is feasible for this set: the projection is z itself.
                        for i in 0..q {
                            moved += (z[i] - x[i]).powi(2);
                            inc[i] = 0.0;
                        }
                        x.copy_from_slice(&z);
                        touched[j] = false;
                    }
                    continue;
                }
                touched[j] = true;
                for i in 0..q {
                    inc[i] = z[i] - p[i];
                    moved += (p[i] - x[i]).powi(2);
                }
                x.copy_from_slice(&p);
            }
            if moved <= 1e-30 * (1.0 + dot(&x, &x)) {
                break;
            }
        }
        x
    }

    /// Projects `z` onto cylinder `j`; returns false (leaving `out`
    /// untouched) when `z` is already inside.
    fn project_cylinder(&self, j: usize, z: &[f64], out: &mut [f64]) -> bool {
        let f = &self.grid.factors[j];
        let q = self.q;
        let r = f.s2.len();
        let mut c = [0.0; 8];
        let mut cv = Vec::new();
        let coords: &mut [f64] = if r <= 8 {
            &mut c[..r]
        } else {
            cv.resize(r, 0.0);
            &mut cv
        };
        for (k, ck) in coords.iter_mut().enumerate() {
            *ck = dot(&f.vt[k * q..(k + 1) * q], z);
        }
        let norm2: f64 = coords.iter().zip(&f.s2).map(|(c, s)| s * c * c).sum();
        if norm2 <= 1.0 {
            return false;
        }
        // Solve Σ s² c² / (1 + μ s²)² = 1 for μ > 0 (Newton from the left).
        let mu = if r == 1 {
            (norm2.sqrt() - 1.0) / f.s2[0]
        } else {
            let mut mu = 0.0;
            for _ in 0..100 {
                let (mut val, mut der) = (-1.0, 0.0);
                for (ck, s) in coords.iter().zip(&f.s2) {
                    let den = 1.0 + mu * s;
                    val += s * ck * ck / (den * den);
                    der -= 2.0 * s * s * ck * ck / (den * den * den);
                }
                let stepn = val / der;
                mu -= stepn;
                if stepn.abs() <= 1e-15 * (1.0 + mu.abs()) {
                    break;
                }
            }
            mu
        };
        out.copy_from_slice(z);
        for (k, (ck, s)) in coords.iter().zip(&f.s2).enumerate() {
            let shrink = ck * mu * s / (1.0 + mu * s);
            for (o, v) in out.iter_mut().zip(&f.vt[k * q..(k + 1) * q]) {
                *o -= shrink * v;
            }
        }
        true
    }

    /// Active-set Newton on the dual multipliers, seeded with `(index, λ)`
    /// pairs. Succeeds only with a certified KKT point on the whole grid.
    fn polish(&self, hint: &[(usize, f64)]) -> Option<(Vec<f64>, Vec<usize>, Vec<f64>)> {
        let mut set: Vec<(usize, f64)> = hint.to_vec();
        for _ in 0..POLISH_ROUNDS {
            let (eta, lambda) = self.newton_multipliers(&set)?;
            for (slot, lam) in set.iter_mut().zip(&lambda) {
                slot.1 = *lam;
            }
            let violators = self.peak_violators(&eta, &set);
            if violators.is_empty() {
                let inside = set
                    .iter()
                    .all(|&(j, _)| self.grid.free_quad(j, &eta) <= 1.0 + POLISH_FEAS);
                let primal = self.objective(&eta);
                let gap: f64 = set
                    .iter()
                    .map(|&(j, lam)| lam * (1.0 - self.grid.free_quad(j, &eta)))
                    .sum::<f64>()
                    .abs();
                if !inside || gap > 1e-10 * (1.0 + primal.abs()) {
                    return None;
                }
                let (active, mult): (Vec<usize>, Vec<f64>) =
                    set.into_iter().filter(|&(_, lam)| lam > 0.0).unzip();
                return Some((eta, active, mult));
            }
            set.retain(|&(_, lam)| lam > 0.0);
            set.extend(violators.into_iter().map(|j| (j, 0.0)));
        }
        None
    }

    /// Violated constraints outside `set` that are local maxima of the
    /// violation. Neighbouring grid points of one peak carry nearly parallel
    /// constraints; adding them all makes the multiplier problem degenerate.
    fn peak_violators(&self, eta: &[f64], set: &[(usize, f64)]) -> Vec<usize> {
        let c: Vec<f64> = (0..self.grid.len()).map(|j| self.grid.free_quad(j, eta)).collect();
        (0..self.grid.len())
            .filter(|&j| c[j] > 1.0 + POLISH_FEAS)
            .filter(|&j| self.grid.neighbors(j).all(|k| c[k] <= c[j]))
            .filter(|j| !set.iter().any(|&(k, _)| k == *j))
            .collect()
    }

    /// Hessian `H(λ) = ε K∘G + Σ λ_j K_j` and `η(λ) = ½ H^{-1} δ`.
    fn eval_multipliers(&self, set: &[(usize, f64)], lambda: &[f64]) -> Option<(Cholesky<f64, Dyn>, Vec<f64>, f64)> {
        let q = self.q;
        let mut h = DMatrix::<f64>::zeros(q, q);
        for i in 0..q {
            h[(i, i)] = self.eps * self.mdiag[i];
        }
        for (&(j, _), &lam) in set.iter().zip(lambda) {
            if lam <= 0.0 {
                continue;
            }
            for row in self.grid.free_block(j).chunks_exact(q) {
                for b in 0..q {
                    let rb = lam * row[b];
                    if rb == 0.0 {
                        continue;
                    }
                    for a in b..q {
                        h[(a, b)] += rb * row[a];
                    }
                }
            }
        }
        for b in 0..q {
            for a in b + 1..q {
                h[(b, a)] = h[(a, b)];
            }
        }
        let chol = Cholesky::new(h)?;
        let rhs = DVector::from_column_slice(self.delta) * 0.5;
        let eta = chol.solve(&rhs);
        let g = lambda.iter().sum::<f64>() + dot(eta.as_slice(), self.delta) * 0.5;
        Some((chol, eta.as_slice().to_vec(), g))
    }

    fn multiplier_grad(&self, set: &[(usize, f64)], eta: &[f64]) -> Vec<f64> {
        set.iter().map(|&(j, _)| 1.0 - self.grid.free_quad(j, eta)).collect()
    }

    /// Projected Newton for `min g(λ)` over `λ ≥ 0` restricted to `set`.
    /// Zero multipliers whose Newton step points outward are pinned and the
    /// step is recomputed on the remaining face.
    fn newton_multipliers(&self, set: &[(usize, f64)]) -> Option<(Vec<f64>, Vec<f64>)> {
        let q = self.q;
        let n = set.len();
        let mut lambda: Vec<f64> = set.iter().map(|&(_, l)| l.max(0.0)).collect();
        let (mut chol, mut eta, mut g) = self.eval_multipliers(set, &lambda)?;
        if n == 0 {
            return Some((eta, lambda));
        }
        let mut mu = 1e-14;
        for _ in 0..NEWTON_ITERS {
            let grad = self.multiplier_grad(set, &eta);
            let pg = projected_grad_norm(&lambda, &grad);
            if pg <= NEWTON_TOL {
                return Some((eta, lambda));
            }
            // w_j = K_j η, Q = 2 Wᵀ H^{-1} W
            let mut w = DMatrix::<f64>::zeros(q, n);
            for (c, &(j, _)) in set.iter().enumerate() {
                for row in self.grid.free_block(j).chunks_exact(q) {
                    let s = dot(row, &eta);
                    for a in 0..q {
                        w[(a, c)] += s * row[a];
                    }
                }
            }
            let hw = chol.solve(&w);
            let qfull = (w.transpose() * hw) * 2.0;
            let diag_scale = qfull.diagonal().amax().max(1e-300);

            let mut free: Vec<usize> = (0..n).filter(|&i| lambda[i] > 0.0 || grad[i] < 0.0).collect();
            let mut dir = vec![0.0; n];
            loop {
                let k = free.len();
                let mut sub = DMatrix::from_fn(k, k, |a, b| qfull[(free[a], free[b])]);
                for i in 0..k {
                    sub[(i, i)] += mu * diag_scale;
                }
                let Some(rc) = Cholesky::new(sub) else {
                    mu *= 1e3;
                    if mu > 1e-2 {
                        return None;
                    }
                    continue;
                };
                let d = rc.solve(&DVector::from_iterator(k, free.iter().map(|&i| -grad[i])));
                dir.iter_mut().for_each(|v| *v = 0.0);
                for (c, &i) in free.iter().enumerate() {
                    dir[i] = d[c];
                }
                let before = free.len();
                free.retain(|&i| !(lambda[i] == 0.0 && dir[i] < 0.0));
                if free.len() == before || free.is_empty() {
                    break;
                }
            }
            if free.is_empty() {
                return (pg <= NEWTON_STALL).then_some((eta, lambda));
            }

            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-12 {
                let trial: Vec<f64> = lambda.iter().zip(&dir).map(|(l, d)| (l + t * d).max(0.0)).collect();
                let decrease: f64 = trial.iter().zip(&lambda).zip(&grad).map(|((a, b), gr)| gr * (a - b)).sum();
                if let Some((c2, e2, g2)) = self.eval_multipliers(set, &trial) {
                    // Close to the optimum the change in g is lost to rounding;
                    // a halved projected gradient is then the better test.
                    let armijo = g2 <= g + 1e-4 * decrease && decrease < 0.0;
                    if armijo || projected_grad_norm(&trial, &self.multiplier_grad(set, &e2)) <= 0.5 * pg {
                        lambda = trial;
                        chol = c2;
                        eta = e2;
                        g = g2;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                if pg <= NEWTON_STALL {
                    return Some((eta, lambda));
                }
                mu *= 1e3;
                if mu > 1e-2 {
                    return None;
                }
            } else if t == 1.0 {
                mu = (mu * 0.1).max(1e-14);
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{constraint_grid, BasisSpec};
    use std::sync::Arc;

    fn setup(k: usize, m: usize) -> (Arc<BasisSpec>, ConstraintGrid) {
        let spec = Arc::new(BasisSpec::new(1, 1.0, k).unwrap());
        let grid = constraint_grid(&spec, m).unwrap();
        (spec, grid)
    }

    fn delta(spec: &Arc<BasisSpec>, f: impl Fn(usize) -> f64) -> FourierVec {
        let mut c = DVector::from_fn(spec.p(), |i, _| f(i));
        c[0] = 0.0;
        FourierVec::new(spec.clone(), c).unwrap()
    }

    #[test]
    fn zero_difference_short_circuits() {
        let (spec, grid) = setup(3, 32);
        let sol = solve_dual(&FourierVec::zeros(spec), 1e-2, &grid, &DualOptions::default()).unwrap();
        assert_eq!(sol.value, 0.0);
        assert_eq!(sol.iterations, 0);
        assert!(sol.eta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nonzero_mass_difference_is_rejected() {
        let (spec, grid) = setup(2, 16);
        let d = FourierVec::uniform(spec);
        assert!(matches!(
            solve_dual(&d, 1e-2, &grid, &DualOptions::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn unconstrained_branch_is_quadratic() {
        // Tiny δ: the maximizer ½ M^{-1} δ / ε is strictly feasible.
        let (spec, grid) = setup(3, 64);
        let eps = 0.1;
        let d = delta(&spec, |i| 1e-3 * (i as f64).cos());
        let sol = solve_dual(&d, eps, &grid, &DualOptions::default()).unwrap();
        assert!(sol.converged);
        for k in 1..spec.p() {
            let expect = d.coeffs()[k] / (2.0 * eps * spec.gradient_energy(k));
            assert!((sol.eta[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn active_set_and_plain_ascent_agree() {
        let (spec, grid) = setup(3, 48);
        let d = delta(&spec, |i| 0.3 * ((i * 7) as f64).sin());
        let fast = solve_dual(&d, 1e-2, &grid, &DualOptions::default()).unwrap();
        assert!(fast.converged);
        assert!(fast.feasibility_residual <= 1e-10);
        let plain = DualOptions {
            refine: false,
            max_iter: 2000,
            ..DualOptions::default()
        };
        let slow = solve_dual(&d, 1e-2, &grid, &plain).unwrap();
        // The certified optimum dominates any feasible ascent iterate.
        assert!(slow.value <= fast.value + 1e-9);
        assert!(fast.value - slow.value < 1e-2 * fast.value);
        assert!((&fast.eta - &slow.eta).amax() < 5e-2);
    }

    #[test]
    fn kkt_certificate_holds() {
        let (spec, grid) = setup(5, 64);
        let d = delta(&spec, |i| 0.4 * ((i * 5) as f64).cos());
        let eps = 1e-3;
        let sol = solve_dual(&d, eps, &grid, &DualOptions::default()).unwrap();
        let q = spec.free_dim();
        // δ − 2ε M η − 2 Σ λ_j K_j η = 0
        let mut resid: Vec<f64> = (0..q)
            .map(|i| d.coeffs()[i + 1] - 2.0 * eps * spec.gradient_energy(i + 1) * sol.eta[i + 1])
            .collect();
        for (&j, &lam) in sol.active.iter().zip(&sol.multipliers) {
            assert!(lam > 0.0);
            assert!((grid.quad_form(j, &sol.eta) - 1.0).abs() < 1e-9);
            let jac = grid.jacobian(j);
            let jeta = jac * &sol.eta;
            let kj = jac.transpose() * jeta;
            for i in 0..q {
                resid[i] -= 2.0 * lam * kj[i + 1];
            }
        }
        assert!(resid.iter().all(|r| r.abs() < 1e-9), "{resid:?}");
    }

    #[test]
    fn relaxed_mode_matches_closed_form() {
        let (spec, grid) = setup(4, 32);
        let d = delta(&spec, |i| 0.1 / (1.0 + i as f64));
        let opts = DualOptions {
            mode: DualMode::Relaxed,
            ..DualOptions::default()
        };
        let sol = solve_dual(&d, 0.0, &grid, &opts).unwrap();
        let expect: f64 = (1..spec.p())
            .map(|k| d.coeffs()[k].powi(2) / spec.gradient_energy(k))
            .sum::<f64>()
            .sqrt();
        assert!((sol.value - expect).abs() < 1e-12);
        assert!((sol.grad_norm_kg - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warm_start_reproduces_cold_solution() {
        let (spec, grid) = setup(4, 64);
        let d = delta(&spec, |i| 0.2 * ((i * 3) as f64).cos());
        let cold = solve_dual(&d, 1e-3, &grid, &DualOptions::default()).unwrap();
        let warm = solve_dual_warm(&d, 1e-3, &grid, &DualOptions::default(), Some(&cold.warm_start())).unwrap();
        assert_eq!(warm.iterations, 0);
        assert!((&cold.eta - &warm.eta).amax() < 1e-12);
    }

    #[test]
    fn two_dimensional_cylinders() {
        let spec = Arc::new(BasisSpec::new(2, 1.0, 1).unwrap());
        let grid = constraint_grid(&spec, 8).unwrap();
        let d = delta(&spec, |i| 0.2 * ((i * 5) as f64).sin());
        let sol = solve_dual(&d, 1e-2, &grid, &DualOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.feasibility_residual <= 1e-10);
        let plain = DualOptions {
            refine: false,
            max_iter: 2000,
            ..DualOptions::default()
        };
        let slow = solve_dual(&d, 1e-2, &grid, &plain).unwrap();
        assert!(slow.value <= sol.value + 1e-9);
        assert!(sol.value - slow.value < 1e-2 * sol.value);
    }

    #[test]
    fn sharp_boxes_at_small_eps() {
        let (spec, grid) = setup(8, 128);
        let box_coeffs = |lo: f64, hi: f64| {
            crate::density::DensityModel::uniform_1d(lo, hi).coefficients(&spec, 0).unwrap()
        };
        let d = box_coeffs(0.315, 0.513).sub(&box_coeffs(0.583, 0.686)).unwrap();
        for eps in [1e-3, 1e-4] {
            let sol = solve_dual(&d, eps, &grid, &DualOptions::default()).unwrap();
            assert!(sol.converged, "ε = {eps}");
            assert!(sol.feasibility_residual <= 1e-10);
        }
    }
}
