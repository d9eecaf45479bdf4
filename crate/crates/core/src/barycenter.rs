//! Barycenter `θ̂ = argmin_θ L(θ)`, `L(θ) = Σ_i l(θ − θ_i)`, over the free
//! coordinates with the constant mode pinned to 1.
//!
//! Descent directions come from a BFGS inverse-Hessian estimate, every step
//! is accepted by Armijo backtracking on `L`, and `∇L = Σ_i η*_i`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{ConstraintGrid, FourierVec};
use crate::dual::{ensure_converged, solve_dual_warm, DualOptions, DualSolution, WarmStart};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BarycenterOptions {
    /// Gradient-norm target; `None` means `1e-6 · n`.
    pub tol_grad: Option<f64>,
    pub max_outer: usize,
    pub dual: DualOptions,
    /// Solve the inner problems on the rayon pool.
    pub parallel: bool,
}

impl Default for BarycenterOptions {
    fn default() -> Self {
        BarycenterOptions {
            tol_grad: None,
            max_outer: 2000,
            dual: DualOptions::default(),
            parallel: true,
        }
    }
}

impl BarycenterOptions {
    pub fn tol_grad_for(&self, n: usize) -> f64 {
        self.tol_grad.unwrap_or(1e-6 * n as f64)
    }
}

/// Optional starting state: initial point, inverse Hessian and per-measure
/// dual warm starts (same order as the inputs).
#[derive(Debug, Clone, Default)]
pub struct BarycenterStart {
    pub theta: Option<FourierVec>,
    pub inv_hessian: Option<DMatrix<f64>>,
    pub duals: Option<Vec<WarmStart>>,
}

#[derive(Debug, Clone)]
pub struct BarycenterResult {
    pub theta_hat: FourierVec,
    pub objective: f64,
    /// `‖∇L(θ̂)‖` on the free coordinates.
    pub grad_norm: f64,
    pub iterations: usize,
    pub per_measure_values: Vec<f64>,
    pub converged: bool,
    /// `∇L(θ̂)` on the free coordinates.
    pub gradient: DVector<f64>,
    pub inv_hessian: DMatrix<f64>,
    pub duals: Vec<WarmStart>,
}

impl BarycenterResult {
    /// State for a nearby solve (e.g. a bootstrap resample, mapping measure
    /// indices through `picks`).
    pub fn start_for(&self, picks: &[usize]) -> BarycenterStart {
        BarycenterStart {
            theta: Some(self.theta_hat.clone()),
            inv_hessian: Some(self.inv_hessian.clone()),
            duals: Some(picks.iter().map(|&i| self.duals[i].clone()).collect()),
        }
    }
}

/// Anything smaller is treated as `θ = θ_i` and contributes nothing.
const SKIP_DELTA: f64 = 1e-12;

fn check_inputs(thetas: &[FourierVec], grid: &ConstraintGrid) -> Result<()> {
    let Some(first) = thetas.first() else {
        return Err(invalid("barycenter needs at least one measure"));
    };
    for (i, t) in thetas.iter().enumerate() {
        if !t.same_basis(first) || t.spec().as_ref() != grid.spec().as_ref() {
            return Err(invalid(format!("measure {i} uses a different basis")));
        }
        if (t.mass() - 1.0).abs() > 1e-8 {
            return Err(invalid(format!("measure {i} has mass {} instead of 1", t.mass())));
        }
    }
    Ok(())
}

struct Evaluation {
    value: f64,
    grad: DVector<f64>,
    values: Vec<f64>,
    duals: Vec<WarmStart>,
}

fn evaluate(
    free: &DVector<f64>,
    thetas: &[FourierVec],
    eps: f64,
    grid: &ConstraintGrid,
    opts: &BarycenterOptions,
    warm: &[WarmStart],
) -> Result<Evaluation> {
    let spec = grid.spec();
    let theta = FourierVec::from_free(spec.clone(), 1.0, free)?;
    let solve = |i: usize| -> Result<Option<DualSolution>> {
        let delta = theta.sub(&thetas[i])?;
        if delta.coeffs().norm() < SKIP_DELTA {
            return Ok(None);
        }
        let sol = solve_dual_warm(&delta, eps, grid, &opts.dual, warm.get(i))
            .map_err(|e| e.context(format!("dual problem for measure {i}")))?;
        ensure_converged(&sol).map_err(|e| e.context(format!("dual problem for measure {i}")))?;
        Ok(Some(sol))
    };
    let sols: Vec<Result<Option<DualSolution>>> = if opts.parallel {
        (0..thetas.len()).into_par_iter().map(solve).collect()
    } else {
        (0..thetas.len()).map(solve).collect()
    };
    let q = spec.free_dim();
    let mut grad = DVector::zeros(q);
    let mut values = Vec::with_capacity(thetas.len());
    let mut duals = Vec::with_capacity(thetas.len());
    for (i, sol) in sols.into_iter().enumerate() {
        match sol? {
            Some(s) => {
                grad += s.eta.rows(1, q);
                values.push(s.value);
                duals.push(s.warm_start());
            }
            None => {
                values.push(0.0);
                duals.push(warm.get(i).cloned().unwrap_or_default());
            }
        }
    }
    Ok(Evaluation {
        value: values.iter().sum(),
        grad,
        values,
        duals,
    })
}

/// `L(θ) = Σ_i l(θ − θ_i)`.
pub fn objective(
    theta: &FourierVec,
    thetas: &[FourierVec],
    eps: f64,
    grid: &ConstraintGrid,
    opts: &DualOptions,
) -> Result<f64> {
    check_inputs(thetas, grid)?;
    if !theta.same_basis(&thetas[0]) {
        return Err(invalid("barycenter candidate uses a different basis"));
    }
    let mut total = 0.0;
    for (i, t) in thetas.iter().enumerate() {
        let sol = crate::dual::solve_dual(&theta.sub(t)?, eps, grid, opts)
            .map_err(|e| e.context(format!("dual problem for measure {i}")))?;
        ensure_converged(&sol)?;
        total += sol.value;
    }
    Ok(total)
}

pub fn solve_barycenter(
    thetas: &[FourierVec],
    eps: f64,
    grid: &ConstraintGrid,
    opts: &BarycenterOptions,
) -> Result<BarycenterResult> {
    solve_barycenter_from(thetas, eps, grid, opts, &BarycenterStart::default())
}

pub fn solve_barycenter_from(
    thetas: &[FourierVec],
    eps: f64,
    grid: &ConstraintGrid,
    opts: &BarycenterOptions,
    start: &BarycenterStart,
) -> Result<BarycenterResult> {
    check_inputs(thetas, grid)?;
    let spec = grid.spec();
    let n = thetas.len();
    let q = spec.free_dim();
    let tol = opts.tol_grad_for(n);

    let mut x = match &start.theta {
        Some(t) if t.same_basis(&thetas[0]) => t.free(),
        Some(_) => return Err(invalid("starting point uses a different basis")),
        None => thetas.iter().map(|t| t.free()).sum::<DVector<f64>>() / n as f64,
    };
    let warm = start.duals.clone().filter(|d| d.len() == n).unwrap_or_default();
    let mut cur = evaluate(&x, thetas, eps, grid, opts, &warm)?;

    // Largest curvature of L is at most n·(K∘G)^{-1}/(2ε); its inverse is a
    // step that cannot overshoot.
    let h0 = DMatrix::from_diagonal(&DVector::from_fn(q, |i, _| 2.0 * eps * spec.gradient_energy(i + 1) / n as f64));
    let mut hinv = match &start.inv_hessian {
        Some(h) if h.nrows() == q && h.ncols() == q => h.clone(),
        _ => h0.clone(),
    };
    let mut fresh = start.inv_hessian.is_none();
    // Trust radius. Quasi-Newton curvature collected where L is nearly flat
    // can propose steps far outside the region spanned by the inputs.
    let centre = thetas.iter().map(|t| t.free()).sum::<DVector<f64>>() / n as f64;
    let spread = thetas.iter().map(|t| (t.free() - &centre).norm()).fold(0.0, f64::max);
    let radius = 2.0 * (spread + (&x - &centre).norm()).max(1e-8);
    let mut iterations = 0;
    let mut converged = cur.grad.norm() < tol;

    while !converged && iterations < opts.max_outer {
        iterations += 1;
        let mut dir = -(&hinv * &cur.grad);
        let mut slope = cur.grad.dot(&dir);
        if !(slope < 0.0) {
            hinv = h0.clone();
            fresh = true;
            dir = -(&hinv * &cur.grad);
            slope = cur.grad.dot(&dir);
        }
        let len = dir.norm();
        if len > radius {
            dir *= radius / len;
            slope = cur.grad.dot(&dir);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let trial = &x + &dir * step;
            let ev = evaluate(&trial, thetas, eps, grid, opts, &cur.duals)?;
            if ev.value <= cur.value + 1e-4 * step * slope {
                accepted = Some((trial, ev));
                break;
            }
            step *= 0.5;
        }
        let Some((next, ev)) = accepted else {
            if fresh {
                break;
            }
            // A stale curvature estimate: restart from the safe scaling.
            hinv = h0.clone();
            fresh = true;
            continue;
        };
        let s = &next - &x;
        let y = &ev.grad - &cur.grad;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                let hy = &hinv * &y;
                hinv *= sy / y.dot(&hy);
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        x = next;
        cur = ev;
        converged = cur.grad.norm() < tol;
    }

    let grad_norm = cur.grad.norm();
    if !converged {
        log::warn!("barycenter stopped after {iterations} iterations with gradient norm {grad_norm:e} (target {tol:e})");
    }
    Ok(BarycenterResult {
        theta_hat: FourierVec::from_free(spec.clone(), 1.0, &x)?,
        objective: cur.value,
        grad_norm,
        iterations,
        per_measure_values: cur.values,
        converged,
        gradient: cur.grad,
        inv_hessian: hinv,
        duals: cur.duals,
    })
}

/// Fails with [`Error::BarycenterNonConverged`] unless the result converged.
pub fn require_converged(res: BarycenterResult) -> Result<BarycenterResult> {
    if res.converged {
        Ok(res)
    } else {
        Err(Error::BarycenterNonConverged {
            iterations: res.iterations,
            grad_norm: res.grad_norm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{constraint_grid, BasisSpec};
    use crate::density::DensityModel;
    use std::sync::Arc;

    fn setup() -> (Arc<BasisSpec>, ConstraintGrid) {
        let spec = Arc::new(BasisSpec::new(1, 1.0, 4).unwrap());
        let grid = constraint_grid(&spec, 64).unwrap();
        (spec, grid)
    }

    fn gaussians(spec: &Arc<BasisSpec>, means: &[f64]) -> Vec<FourierVec> {
        means
            .iter()
            .map(|&m| DensityModel::wrapped_gaussian_1d(m, 0.08).coefficients(spec, 0).unwrap())
            .collect()
    }

    #[test]
    fn identical_inputs_are_their_own_barycenter() {
        let (spec, grid) = setup();
        let thetas = gaussians(&spec, &[0.3, 0.3, 0.3]);
        let res = solve_barycenter(&thetas, 1e-2, &grid, &BarycenterOptions::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 0);
        assert_eq!(res.objective, 0.0);
        assert!((res.theta_hat.coeffs() - thetas[0].coeffs()).amax() < 1e-15);
    }

    #[test]
    fn converges_and_beats_every_input() {
        let (spec, grid) = setup();
        let thetas = gaussians(&spec, &[0.3, 0.4, 0.45, 0.6]);
        let eps = 1e-2;
        let res = solve_barycenter(&thetas, eps, &grid, &BarycenterOptions::default()).unwrap();
        assert!(res.converged, "grad {} after {}", res.grad_norm, res.iterations);
        assert!(res.grad_norm < 4e-6);
        for t in &thetas {
            let at_input = objective(t, &thetas, eps, &grid, &DualOptions::default()).unwrap();
            assert!(res.objective <= at_input + 1e-12);
        }
        let direct = objective(&res.theta_hat, &thetas, eps, &grid, &DualOptions::default()).unwrap();
        assert!((direct - res.objective).abs() < 1e-10);
    }

    #[test]
    fn permutation_invariance() {
        let (spec, grid) = setup();
        let thetas = gaussians(&spec, &[0.25, 0.5, 0.55]);
        let mut shuffled = thetas.clone();
        shuffled.rotate_left(1);
        let opts = BarycenterOptions {
            tol_grad: Some(1e-9),
            ..BarycenterOptions::default()
        };
        let a = solve_barycenter(&thetas, 1e-2, &grid, &opts).unwrap();
        let b = solve_barycenter(&shuffled, 1e-2, &grid, &opts).unwrap();
        assert!((a.theta_hat.coeffs() - b.theta_hat.coeffs()).amax() < 1e-6);
    }

    #[test]
    fn warm_restart_stays_put() {
        let (spec, grid) = setup();
        let thetas = gaussians(&spec, &[0.3, 0.5, 0.52, 0.7]);
        let opts = BarycenterOptions::default();
        let first = solve_barycenter(&thetas, 1e-2, &grid, &opts).unwrap();
        let again = solve_barycenter_from(&thetas, 1e-2, &grid, &opts, &first.start_for(&[0, 1, 2, 3])).unwrap();
        assert_eq!(again.iterations, 0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (spec, grid) = setup();
        assert!(solve_barycenter(&[], 1e-2, &grid, &BarycenterOptions::default()).is_err());
        let half = FourierVec::new(spec.clone(), FourierVec::uniform(spec.clone()).coeffs() * 0.5).unwrap();
        assert!(solve_barycenter(&[half], 1e-2, &grid, &BarycenterOptions::default()).is_err());
        let other = Arc::new(BasisSpec::new(1, 1.0, 3).unwrap());
        let mixed = vec![FourierVec::uniform(spec), FourierVec::uniform(other)];
        assert!(solve_barycenter(&mixed, 1e-2, &grid, &BarycenterOptions::default()).is_err());
    }
}
