//! Fisher matrix `D² = ∇²L(θ*)` on the free coordinates, its Schur-complement
//! projection `D̆²` onto the leading `p_split` coordinates, and the matching
//! projected gradient `∇̆`.
//!
//! All vectors and matrices here live on the `p − 1` free coordinates (the
//! constant mode is pinned and has no curvature).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::{ConstraintGrid, FourierVec};
use crate::dual::{hessian_fd, DualOptions};
use crate::error::{invalid, Error, Result};
use crate::linalg::{condition_number, sym_apply, sym_eigen, sym_sqrt, symmetrize};

/// Eigenvalues below this are clipped up to it.
pub const EIGEN_FLOOR: f64 = 1e-8;
/// Sign `s` in `D(θ̂ − θ*) − s D^{-1}∇L(θ*)` for a minimized objective.
pub const RESIDUAL_SIGN: f64 = -1.0;
/// Largest acceptable condition number of the `v` block.
pub const MAX_BLOCK_CONDITION: f64 = 1e10;

#[derive(Debug, Clone)]
pub struct FisherEstimate {
    pub d2: DMatrix<f64>,
    /// Ascending.
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    /// `λ_min(D (K∘G) D)`.
    pub lambda_min_dkgd: f64,
    pub p_split: usize,
    pub condition: f64,
    /// Eigenvalues raised to [`EIGEN_FLOOR`].
    pub clipped: usize,
}

impl FisherEstimate {
    /// Builds the estimate from an assembled `D²` and the free diagonal of `K∘G`.
    pub fn from_matrix(d2: DMatrix<f64>, kg_free: &DVector<f64>, p_split: usize) -> Result<Self> {
        let q = d2.nrows();
        if d2.ncols() != q || kg_free.len() != q {
            return Err(Error::ShapeMismatch {
                expected: q,
                got: kg_free.len(),
            });
        }
        if p_split == 0 || p_split > q {
            return Err(invalid(format!("p_split {p_split} must lie in 1..={q}")));
        }
        if d2.iter().any(|v| !v.is_finite()) {
            return Err(invalid("Fisher matrix has non-finite entries"));
        }
        let (vals, vecs) = sym_eigen(&symmetrize(&d2));
        let clipped = vals.iter().filter(|&&v| v < EIGEN_FLOOR).count();
        if clipped > 0 {
            log::warn!(
                "clipping {clipped} Fisher eigenvalue(s) below {EIGEN_FLOOR:e} (smallest {:e})",
                vals[0]
            );
        }
        let vals = vals.map(|v| v.max(EIGEN_FLOOR));
        let d2 = symmetrize(&(&vecs * DMatrix::from_diagonal(&vals) * vecs.transpose()));
        let d = sym_sqrt(&d2);
        let dkgd = &d * DMatrix::from_diagonal(kg_free) * &d;
        let lambda_min_dkgd = sym_eigen(&dkgd).0[0];
        Ok(FisherEstimate {
            condition: vals[q - 1] / vals[0],
            d2,
            eigenvalues: vals,
            eigenvectors: vecs,
            lambda_min_dkgd,
            p_split,
            clipped,
        })
    }

    pub fn dim(&self) -> usize {
        self.d2.nrows()
    }

    /// `D = (D²)^{1/2}`.
    pub fn d(&self) -> DMatrix<f64> {
        self.spectral(|v| v.sqrt())
    }

    pub fn d_inv(&self) -> DMatrix<f64> {
        self.spectral(|v| 1.0 / v.sqrt())
    }

    pub fn d2_inv(&self) -> DMatrix<f64> {
        self.spectral(|v| 1.0 / v)
    }

    /// Eigenvalues of `D`.
    pub fn d_eigenvalues(&self) -> DVector<f64> {
        self.eigenvalues.map(f64::sqrt)
    }

    fn spectral(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        let scaled = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * f(self.eigenvalues[j]));
        &scaled * v.transpose()
    }

    /// `factor · D²` (e.g. rescaling a per-measure estimate to `n` measures).
    pub fn scaled(&self, factor: f64, kg_free: &DVector<f64>) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(invalid(format!("Fisher scale factor {factor} must be positive")));
        }
        Self::from_matrix(&self.d2 * factor, kg_free, self.p_split)
    }
}

/// Free-coordinate diagonal of `K∘G` for the grid's basis.
pub fn kg_free_diagonal(grid: &ConstraintGrid) -> DVector<f64> {
    let spec = grid.spec();
    DVector::from_fn(spec.free_dim(), |i, _| spec.gradient_energy(i + 1))
}

/// `D² = Σ_i H_i` with `H_i` the finite-difference Hessian of
/// `l(θ_ref − θ_i)`.
pub fn estimate_fisher(
    theta_ref: &FourierVec,
    thetas: &[FourierVec],
    eps: f64,
    grid: &ConstraintGrid,
    opts: &DualOptions,
    p_split: usize,
) -> Result<FisherEstimate> {
    let d2 = hessian_sum(theta_ref, thetas, eps, grid, opts)?;
    FisherEstimate::from_matrix(d2, &kg_free_diagonal(grid), p_split)
}

/// Unclipped `Σ_i H_i`.
pub fn hessian_sum(
    theta_ref: &FourierVec,
    thetas: &[FourierVec],
    eps: f64,
    grid: &ConstraintGrid,
    opts: &DualOptions,
) -> Result<DMatrix<f64>> {
    if thetas.is_empty() {
        return Err(invalid("Fisher estimate needs at least one measure"));
    }
    let q = grid.spec().free_dim();
    let hessians: Vec<Result<DMatrix<f64>>> = thetas
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let delta = theta_ref.sub(t)?;
            hessian_fd(&delta, eps, grid, opts).map_err(|e| e.context(format!("Hessian for measure {i}")))
        })
        .collect();
    let mut d2 = DMatrix::zeros(q, q);
    for h in hessians {
        d2 += h?;
    }
    Ok(d2)
}

struct Blocks {
    u: DMatrix<f64>,
    uv: DMatrix<f64>,
    v_inv: Option<DMatrix<f64>>,
}

fn blocks(f: &FisherEstimate, p_split: usize) -> Result<Blocks> {
    let q = f.dim();
    if p_split == 0 || p_split > q {
        return Err(invalid(format!("p_split {p_split} must lie in 1..={q}")));
    }
    let u = f.d2.view((0, 0), (p_split, p_split)).into_owned();
    if p_split == q {
        return Ok(Blocks {
            u,
            uv: DMatrix::zeros(p_split, 0),
            v_inv: None,
        });
    }
    let r = q - p_split;
    let v = f.d2.view((p_split, p_split), (r, r)).into_owned();
    let condition = condition_number(&v);
    if !(condition < MAX_BLOCK_CONDITION) {
        return Err(Error::SingularBlock {
            condition,
            limit: MAX_BLOCK_CONDITION,
        });
    }
    Ok(Blocks {
        u,
        uv: f.d2.view((0, p_split), (p_split, r)).into_owned(),
        v_inv: Some(sym_apply(&v, |x| 1.0 / x)),
    })
}

/// `D̆² = D²_u − D²_{uv} (D²_v)^{-1} D²_{vu}`.
pub fn schur_breve(f: &FisherEstimate, p_split: usize) -> Result<DMatrix<f64>> {
    let b = blocks(f, p_split)?;
    Ok(match b.v_inv {
        Some(vi) => symmetrize(&(&b.u - &b.uv * vi * b.uv.transpose())),
        None => b.u,
    })
}

/// `∇̆ = g_u − D²_{uv} (D²_v)^{-1} g_v`.
pub fn breve_grad(g: &DVector<f64>, f: &FisherEstimate, p_split: usize) -> Result<DVector<f64>> {
    if g.len() != f.dim() {
        return Err(Error::ShapeMismatch {
            expected: f.dim(),
            got: g.len(),
        });
    }
    let b = blocks(f, p_split)?;
    let gu = g.rows(0, p_split).into_owned();
    Ok(match b.v_inv {
        Some(vi) => gu - &b.uv * (vi * g.rows(p_split, g.len() - p_split)),
        None => gu,
    })
}

/// Both sides of the projection inequality for a deviation `x = θ̂ − θ*` and
/// gradient `g = ∇L(θ*)`:
/// `(‖D̆ x_u − s D̆^{-1} ∇̆‖, ‖D x − s D^{-1} g‖)`.
///
/// Minimization gives `θ̂ − θ* ≈ −D^{-2} g`, so [`RESIDUAL_SIGN`] makes both
/// norms linearization residuals.
pub fn deviation_norms(
    x: &DVector<f64>,
    g: &DVector<f64>,
    f: &FisherEstimate,
    p_split: usize,
    sign: f64,
) -> Result<(f64, f64)> {
    if x.len() != f.dim() {
        return Err(Error::ShapeMismatch {
            expected: f.dim(),
            got: x.len(),
        });
    }
    // ‖D x − s D^{-1} g‖² = (D²x − s g)ᵀ D^{-2} (D²x − s g)
    let y = &f.d2 * x - g * sign;
    let full = y.dot(&(f.d2_inv() * &y)).max(0.0).sqrt();
    let breve = schur_breve(f, p_split)?;
    let yb = &breve * x.rows(0, p_split) + breve_grad(g, f, p_split)? * (-sign);
    let breve_inv = sym_apply(&breve, |v| 1.0 / v);
    let projected = yb.dot(&(breve_inv * &yb)).max(0.0).sqrt();
    Ok((projected, full))
}

/// `‖D̆ v‖` for `v` on the leading `p_split` coordinates.
pub fn breve_norm(v: &DVector<f64>, breve: &DMatrix<f64>) -> f64 {
    v.dot(&(breve * v)).max(0.0).sqrt()
}
