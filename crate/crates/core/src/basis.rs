//! Real trigonometric basis on the periodic box `[0, T]^d`.
//!
//! Every basis function is a tensor product of one-dimensional factors
//! `1`, `√2 cos(2πkx/T)` and `√2 sin(2πkx/T)`, so the family is orthonormal
//! under the uniform Gram weight `G(x) = 1/T^d`. A density `φ` is represented
//! by `θ_k = ∫ φ ψ_k dx`; with this normalization the constant coefficient is
//! the total mass and `φ = G · Σ θ_k ψ_k` on the span.
//!
//! Gradients pick up the angular frequency `2πk/T`, so the Gram operator
//! `K∘G = ∫ ∇ψ ∇ψᵀ G dx` is diagonal with entry `Σ_a (2π k_a / T)²`
//! (the normalization constant is 1 under `‖ψ_k‖_G = 1`).

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub dim: usize,
    pub period: f64,
    pub max_freq: usize,
}

/// Truncated tensor-product trigonometric basis.
///
/// Modes are ordered by squared frequency and then lexicographically, so the
/// constant mode is always index 0 and low frequencies come first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisConfig", into = "BasisConfig")]
pub struct BasisSpec {
    dim: usize,
    period: f64,
    max_freq: usize,
    /// `p × dim` axis-factor indices: 0 constant, `2k-1` cosine, `2k` sine.
    modes: Vec<usize>,
}

impl TryFrom<BasisConfig> for BasisSpec {
    type Error = Error;

    fn try_from(c: BasisConfig) -> Result<Self> {
        BasisSpec::new(c.dim, c.period, c.max_freq)
    }
}

impl From<BasisSpec> for BasisConfig {
    fn from(s: BasisSpec) -> Self {
        BasisConfig {
            dim: s.dim,
            period: s.period,
            max_freq: s.max_freq,
        }
    }
}

#[inline]
fn axis_freq(i: usize) -> usize {
    (i + 1) / 2
}

impl BasisSpec {
    pub fn new(dim: usize, period: f64, max_freq: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("basis dimension must be positive"));
        }
        if !(period.is_finite() && period > 0.0) {
            return Err(invalid(format!("period must be positive and finite, got {period}")));
        }
        if max_freq == 0 {
            return Err(invalid("max_freq must be at least 1"));
        }
        let per_axis = 2 * max_freq + 1;
        let p = per_axis
            .checked_pow(dim as u32)
            .filter(|&p| p <= 1 << 16)
            .ok_or_else(|| invalid("basis too large"))?;

        let mut multi: Vec<Vec<usize>> = (0..p)
            .map(|mut flat| {
                let mut idx = vec![0; dim];
                for slot in idx.iter_mut() {
                    *slot = flat % per_axis;
                    flat /= per_axis;
                }
                idx
            })
            .collect();
        multi.sort_by_key(|idx| {
            let f2: usize = idx.iter().map(|&i| axis_freq(i).pow(2)).sum();
            (f2, idx.clone())
        });
        Ok(BasisSpec {
            dim,
            period,
            max_freq,
            modes: multi.into_iter().flatten().collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn max_freq(&self) -> usize {
        self.max_freq
    }

    /// Total coefficient count `(2·max_freq + 1)^d`.
    pub fn p(&self) -> usize {
        self.modes.len() / self.dim
    }

    /// Number of non-constant modes.
    pub fn free_dim(&self) -> usize {
        self.p() - 1
    }

    /// Per-axis factor indices of mode `k`.
    pub fn mode(&self, k: usize) -> &[usize] {
        &self.modes[k * self.dim..(k + 1) * self.dim]
    }

    /// Integer frequency vector of mode `k`.
    pub fn frequency(&self, k: usize) -> Vec<usize> {
        self.mode(k).iter().map(|&i| axis_freq(i)).collect()
    }

    /// Human-readable label such as `cos1`, `sin2·cos1` or `const`.
    pub fn mode_label(&self, k: usize) -> String {
        let parts: Vec<String> = self
            .mode(k)
            .iter()
            .map(|&i| match i {
                0 => "1".to_string(),
                i if i % 2 == 1 => format!("cos{}", axis_freq(i)),
                i => format!("sin{}", axis_freq(i)),
            })
            .collect();
        if parts.iter().all(|s| s == "1") {
            "const".into()
        } else {
            parts.join("*")
        }
    }

    /// `G(x) = 1/T^d`.
    pub fn gram_weight(&self) -> f64 {
        self.period.powi(-(self.dim as i32))
    }

    /// `‖∇ψ_k‖²_G = Σ_a (2π k_a / T)²`.
    pub fn gradient_energy(&self, k: usize) -> f64 {
        let w = 2.0 * PI / self.period;
        self.mode(k)
            .iter()
            .map(|&i| (w * axis_freq(i) as f64).powi(2))
            .sum()
    }

    /// Values and derivatives of the `2K+1` one-dimensional factors at `x`.
    fn axis_tables(&self, x: f64, vals: &mut [f64], ders: &mut [f64]) {
        let w = 2.0 * PI / self.period;
        vals[0] = 1.0;
        ders[0] = 0.0;
        for k in 1..=self.max_freq {
            let om = w * k as f64;
            let (s, c) = (om * x).sin_cos();
            vals[2 * k - 1] = SQRT_2 * c;
            vals[2 * k] = SQRT_2 * s;
            ders[2 * k - 1] = -SQRT_2 * om * s;
            ders[2 * k] = SQRT_2 * om * c;
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::ShapeMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `ψ(x)`, length `p`.
    pub fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.eval_with_grad(x)?.0)
    }

    /// `(ψ(x), ∇ψ(x))` with the gradient as a `d × p` matrix whose column `k`
    /// is `∇ψ_k(x)`.
    pub fn eval_with_grad(&self, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_point(x)?;
        let per_axis = 2 * self.max_freq + 1;
        let mut vals = vec![0.0; per_axis * self.dim];
        let mut ders = vec![0.0; per_axis * self.dim];
        for a in 0..self.dim {
            let r = a * per_axis..(a + 1) * per_axis;
            let (v, d) = (&mut vals[r.clone()], &mut ders[r]);
            self.axis_tables(x[a], v, d);
        }
        let p = self.p();
        let mut psi = DVector::zeros(p);
        let mut grad = DMatrix::zeros(self.dim, p);
        for k in 0..p {
            let mode = self.mode(k);
            let mut prod = 1.0;
            for (a, &i) in mode.iter().enumerate() {
                prod *= vals[a * per_axis + i];
            }
            psi[k] = prod;
            for b in 0..self.dim {
                let mut g = ders[b * per_axis + mode[b]];
                for (a, &i) in mode.iter().enumerate() {
                    if a != b {
                        g *= vals[a * per_axis + i];
                    }
                }
                grad[(b, k)] = g;
            }
        }
        Ok((psi, grad))
    }

    /// Uniform tensor grid with `n` points per axis, `x = i·T/n`.
    pub fn tensor_grid(&self, n: usize) -> Vec<Vec<f64>> {
        let h = self.period / n as f64;
        let total = n.pow(self.dim as u32);
        (0..total)
            .map(|mut flat| {
                (0..self.dim)
                    .map(|_| {
                        let i = flat % n;
                        flat /= n;
                        i as f64 * h
                    })
                    .collect()
            })
            .collect()
    }
}

/// Fourier coefficients `θ` of a (possibly signed) measure.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierVec {
    coeffs: DVector<f64>,
    spec: Arc<BasisSpec>,
}

impl FourierVec {
    pub fn new(spec: Arc<BasisSpec>, coeffs: DVector<f64>) -> Result<Self> {
        if coeffs.len() != spec.p() {
            return Err(Error::ShapeMismatch {
                expected: spec.p(),
                got: coeffs.len(),
            });
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(invalid("Fourier coefficients must be finite"));
        }
        Ok(FourierVec { coeffs, spec })
    }

    pub fn zeros(spec: Arc<BasisSpec>) -> Self {
        let p = spec.p();
        FourierVec {
            coeffs: DVector::zeros(p),
            spec,
        }
    }

    /// Coefficients of the uniform probability density.
    pub fn uniform(spec: Arc<BasisSpec>) -> Self {
        let mut v = Self::zeros(spec);
        v.coeffs[0] = 1.0;
        v
    }

    pub fn coeffs(&self) -> &DVector<f64> {
        &self.coeffs
    }

    pub fn spec(&self) -> &Arc<BasisSpec> {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Total mass (the constant-mode coefficient).
    pub fn mass(&self) -> f64 {
        self.coeffs[0]
    }

    /// Non-constant coordinates.
    pub fn free(&self) -> DVector<f64> {
        self.coeffs.rows(1, self.coeffs.len() - 1).into_owned()
    }

    /// Rebuilds a vector from a mass and its non-constant coordinates.
    pub fn from_free(spec: Arc<BasisSpec>, mass: f64, free: &DVector<f64>) -> Result<Self> {
        let mut c = DVector::zeros(free.len() + 1);
        c[0] = mass;
        c.rows_mut(1, free.len()).copy_from(free);
        Self::new(spec, c)
    }

    pub fn same_basis(&self, other: &FourierVec) -> bool {
        Arc::ptr_eq(&self.spec, &other.spec) || *self.spec == *other.spec
    }

    pub fn sub(&self, other: &FourierVec) -> Result<FourierVec> {
        if !self.same_basis(other) {
            return Err(invalid("Fourier vectors live in different bases"));
        }
        Ok(FourierVec {
            coeffs: &self.coeffs - &other.coeffs,
            spec: self.spec.clone(),
        })
    }
}

/// Grid samples of a density, e.g. read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledDensity {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

fn check_quadrature(spec: &BasisSpec, n: usize) -> Result<()> {
    let need = 2 * spec.max_freq() + 1;
    if n < need {
        return Err(Error::Aliasing {
            got: n,
            max_freq: spec.max_freq(),
            need,
        });
    }
    Ok(())
}

/// `θ_k = ∫ φ ψ_k dx` by the periodic trapezoid rule with `quad_n` points per
/// axis. Exact for band-limited `φ` once `quad_n ≥ 2·max_freq + 1`.
pub fn project_density<F>(density: F, spec: &Arc<BasisSpec>, quad_n: usize) -> Result<FourierVec>
where
    F: Fn(&[f64]) -> f64,
{
    check_quadrature(spec, quad_n)?;
    let points = spec.tensor_grid(quad_n);
    let values: Vec<f64> = points.iter().map(|x| density(x)).collect();
    project_on_grid(spec, &points, &values)
}

/// Projects samples taken on a uniform periodic grid (`N^d` points).
pub fn project_samples(samples: &SampledDensity, spec: &Arc<BasisSpec>) -> Result<FourierVec> {
    let count = samples.points.len();
    if count != samples.values.len() {
        return Err(Error::ShapeMismatch {
            expected: count,
            got: samples.values.len(),
        });
    }
    let n = (count as f64).powf(1.0 / spec.dim() as f64).round() as usize;
    if n.pow(spec.dim() as u32) != count {
        return Err(invalid(format!(
            "{count} samples do not form a {}-dimensional tensor grid",
            spec.dim()
        )));
    }
    check_quadrature(spec, n)?;
    project_on_grid(spec, &samples.points, &samples.values)
}

fn project_on_grid(spec: &Arc<BasisSpec>, points: &[Vec<f64>], values: &[f64]) -> Result<FourierVec> {
    let cell = spec.period().powi(spec.dim() as i32) / points.len() as f64;
    let mut theta = DVector::zeros(spec.p());
    for (x, &v) in points.iter().zip(values) {
        if !v.is_finite() {
            return Err(invalid(format!("non-finite density value {v} at {x:?}")));
        }
        let psi = spec.eval(x)?;
        theta.axpy(v * cell, &psi, 1.0);
    }
    FourierVec::new(spec.clone(), theta)
}

/// `Σ θ_k ψ_k(x)`, the expansion of `φ/G`.
pub fn series_value(theta: &FourierVec, x: &[f64]) -> Result<f64> {
    Ok(theta.spec().eval(x)?.dot(theta.coeffs()))
}

/// Density value `G(x) · Σ θ_k ψ_k(x)`. Truncated expansions can be negative;
/// the value is returned as is.
pub fn reconstruct_density(theta: &FourierVec, x: &[f64]) -> Result<f64> {
    Ok(theta.spec().gram_weight() * series_value(theta, x)?)
}

/// The regularizer metric `K∘G = ∫ K_x G(x) dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramOperator {
    matrix: DMatrix<f64>,
    null_mask: Vec<bool>,
}

/// Analytic `K∘G` for the uniform Gram weight: diagonal, zero on the constant mode.
pub fn gram_operator(spec: &BasisSpec) -> GramOperator {
    let diag = DVector::from_iterator(spec.p(), (0..spec.p()).map(|k| spec.gradient_energy(k)));
    GramOperator::from_matrix(DMatrix::from_diagonal(&diag))
}

impl GramOperator {
    fn from_matrix(matrix: DMatrix<f64>) -> Self {
        let scale = matrix.diagonal().amax().max(1.0);
        let null_mask = matrix.diagonal().iter().map(|&d| d.abs() <= 1e-12 * scale).collect();
        GramOperator { matrix, null_mask }
    }

    /// `∫ J_xᵀ J_x G(x) dx` by the trapezoid rule, for a general Gram weight.
    pub fn from_quadrature<G>(spec: &BasisSpec, weight: G, quad_n: usize) -> Result<Self>
    where
        G: Fn(&[f64]) -> f64,
    {
        check_quadrature(spec, quad_n)?;
        let points = spec.tensor_grid(quad_n);
        let cell = spec.period().powi(spec.dim() as i32) / points.len() as f64;
        let p = spec.p();
        let mut acc = DMatrix::zeros(p, p);
        for x in &points {
            let (_, jac) = spec.eval_with_grad(x)?;
            acc += jac.transpose() * &jac * (weight(x) * cell);
        }
        Ok(Self::from_matrix(linalg::symmetrize(&acc)))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn null_mask(&self) -> &[bool] {
        &self.null_mask
    }

    /// Block on the non-constant coordinates.
    pub fn free_block(&self) -> DMatrix<f64> {
        let q = self.matrix.nrows() - 1;
        self.matrix.view((1, 1), (q, q)).into_owned()
    }

    /// `(K∘G)^{-1/2}` on the positive-definite free block.
    pub fn inverse_sqrt_free(&self) -> DMatrix<f64> {
        linalg::sym_inv_sqrt(&self.free_block(), 0.0)
    }

    pub fn sqrt_free(&self) -> DMatrix<f64> {
        linalg::sym_sqrt(&self.free_block())
    }

    pub fn lambda_max_free(&self) -> f64 {
        linalg::spectral_norm_sym(&self.free_block())
    }
}

/// Projection data for one cylinder `{z : ‖J z‖ ≤ 1}` in free coordinates:
/// `J = U S Vᵀ` with orthonormal rows of `vt` and squared singular values `s2`.
#[derive(Debug, Clone)]
pub(crate) struct CylinderFactor {
    pub vt: Vec<f64>,
    pub s2: Vec<f64>,
}

/// Point set `{x_j}` with Jacobians `J_j = ∇ψ(x_j)ᵀ` so that
/// `ηᵀ K_{x_j} η = ‖J_j η‖²`.
#[derive(Debug, Clone)]
pub struct ConstraintGrid {
    spec: Arc<BasisSpec>,
    m_per_axis: usize,
    points: Vec<Vec<f64>>,
    jacobians: Vec<DMatrix<f64>>,
    under_resolved: bool,
    /// `m × d × q` row-major Jacobians restricted to the free coordinates.
    pub(crate) free_rows: Vec<f64>,
    pub(crate) factors: Vec<CylinderFactor>,
}

/// Uniform grid of `m_per_axis^d` constraint points.
pub fn constraint_grid(spec: &Arc<BasisSpec>, m_per_axis: usize) -> Result<ConstraintGrid> {
    if m_per_axis == 0 {
        return Err(invalid("constraint grid needs at least one point per axis"));
    }
    let under_resolved = m_per_axis < 2 * spec.max_freq() + 1;
    if under_resolved {
        log::warn!(
            "constraint grid with {m_per_axis} points per axis under-resolves max frequency {}",
            spec.max_freq()
        );
    }
    let points = spec.tensor_grid(m_per_axis);
    let d = spec.dim();
    let q = spec.free_dim();
    let mut jacobians = Vec::with_capacity(points.len());
    let mut free_rows = Vec::with_capacity(points.len() * d * q);
    let mut factors = Vec::with_capacity(points.len());
    for x in &points {
        let (_, jac) = spec.eval_with_grad(x)?;
        for r in 0..d {
            free_rows.extend((1..=q).map(|k| jac[(r, k)]));
        }
        let jf = jac.view((0, 1), (d, q)).into_owned();
        factors.push(cylinder_factor(&jf));
        jacobians.push(jac);
    }
    Ok(ConstraintGrid {
        spec: spec.clone(),
        m_per_axis,
        points,
        jacobians,
        under_resolved,
        free_rows,
        factors,
    })
}

fn cylinder_factor(j: &DMatrix<f64>) -> CylinderFactor {
    let (vals, vecs) = linalg::sym_eigen(&(j * j.transpose()));
    let top = vals.iter().cloned().fold(0.0, f64::max);
    let q = j.ncols();
    let mut vt = Vec::new();
    let mut s2 = Vec::new();
    for (r, &lam) in vals.iter().enumerate() {
        if lam > 1e-14 * top.max(1e-300) {
            let v = j.transpose() * vecs.column(r) / lam.sqrt();
            vt.extend(v.iter());
            s2.push(lam);
        }
    }
    debug_assert_eq!(vt.len(), s2.len() * q);
    CylinderFactor { vt, s2 }
}

impl ConstraintGrid {
    pub fn spec(&self) -> &Arc<BasisSpec> {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn m_per_axis(&self) -> usize {
        self.m_per_axis
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// `d × p` Jacobian at grid point `j`.
    pub fn jacobian(&self, j: usize) -> &DMatrix<f64> {
        &self.jacobians[j]
    }

    /// Fewer than `2·max_freq + 1` points per axis: the feasible set is only
    /// loosely constrained and the Gram nesting bound is not exact.
    pub fn under_resolved(&self) -> bool {
        self.under_resolved
    }

    pub(crate) fn free_block(&self, j: usize) -> &[f64] {
        let d = self.spec.dim();
        let q = self.spec.free_dim();
        &self.free_rows[j * d * q..(j + 1) * d * q]
    }

    /// Periodic axis neighbours of grid point `j`.
    pub(crate) fn neighbors(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        let m = self.m_per_axis;
        (0..self.spec.dim()).flat_map(move |a| {
            let stride = m.pow(a as u32);
            let i = (j / stride) % m;
            let base = j - i * stride;
            [base + ((i + 1) % m) * stride, base + ((i + m - 1) % m) * stride]
        })
    }

    /// `‖J_j η‖²` for a free-coordinate vector `η`.
    pub(crate) fn free_quad(&self, j: usize, eta: &[f64]) -> f64 {
        let q = self.spec.free_dim();
        self.free_block(j)
            .chunks_exact(q)
            .map(|row| {
                let s: f64 = row.iter().zip(eta).map(|(a, b)| a * b).sum();
                s * s
            })
            .sum()
    }

    /// `ηᵀ K_{x_j} η` for a full-length coefficient vector.
    pub fn quad_form(&self, j: usize, eta: &DVector<f64>) -> f64 {
        (&self.jacobians[j] * eta).norm_squared()
    }

    /// `max_j (ηᵀ K_{x_j} η − 1)_+`.
    pub fn max_violation(&self, eta: &DVector<f64>) -> f64 {
        (0..self.len())
            .map(|j| self.quad_form(j, eta) - 1.0)
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec1(k: usize, t: f64) -> Arc<BasisSpec> {
        Arc::new(BasisSpec::new(1, t, k).unwrap())
    }

    #[test]
    fn coefficient_count() {
        assert_eq!(BasisSpec::new(1, 1.0, 4).unwrap().p(), 9);
        assert_eq!(BasisSpec::new(2, 1.0, 2).unwrap().p(), 25);
        assert_eq!(BasisSpec::new(3, 2.0, 1).unwrap().p(), 27);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(BasisSpec::new(0, 1.0, 2).is_err());
        assert!(BasisSpec::new(1, -1.0, 2).is_err());
        assert!(BasisSpec::new(1, 1.0, 0).is_err());
    }

    #[test]
    fn constant_mode_first_and_low_frequencies_next() {
        let s = BasisSpec::new(2, 1.0, 2).unwrap();
        assert_eq!(s.mode(0), &[0, 0]);
        assert_eq!(s.frequency(1).iter().sum::<usize>(), 1);
        assert_eq!(s.mode_label(0), "const");
        let last = s.frequency(s.p() - 1);
        assert_eq!(last, vec![2, 2]);
    }

    #[test]
    fn orthonormal_under_uniform_weight() {
        for spec in [spec1(3, 2.5), Arc::new(BasisSpec::new(2, 1.5, 2).unwrap())] {
            let n = 4 * spec.max_freq() + 3;
            let pts = spec.tensor_grid(n);
            let w = spec.gram_weight() * spec.period().powi(spec.dim() as i32) / pts.len() as f64;
            let mut gram = DMatrix::zeros(spec.p(), spec.p());
            for x in &pts {
                let psi = spec.eval(x).unwrap();
                gram += &psi * psi.transpose() * w;
            }
            assert_relative_eq!(gram, DMatrix::identity(spec.p(), spec.p()), epsilon = 1e-6);
        }
    }

    #[test]
    fn uniform_density_projects_to_unit_constant() {
        let t = 3.0;
        let spec = spec1(4, t);
        let theta = project_density(|_| 1.0 / t, &spec, 64).unwrap();
        assert_relative_eq!(theta.coeffs()[0], 1.0, epsilon = 1e-12);
        assert!(theta.free().amax() < 1e-12);
    }

    #[test]
    fn single_cosine_perturbation() {
        // (1/T)(1 + cos(2πx/T)): θ_cos1 = ∫ (1/T) cos · √2 cos dx = √2/2.
        let t = 2.0;
        let spec = spec1(3, t);
        let theta =
            project_density(|x| (1.0 + (2.0 * PI * x[0] / t).cos()) / t, &spec, 32).unwrap();
        assert_relative_eq!(theta.coeffs()[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(theta.coeffs()[1], SQRT_2 / 2.0, epsilon = 1e-12);
        for k in 2..spec.p() {
            assert!(theta.coeffs()[k].abs() < 1e-12, "mode {k}");
        }
    }

    #[test]
    fn aliasing_is_rejected() {
        let spec = spec1(4, 1.0);
        match project_density(|_| 1.0, &spec, 8) {
            Err(Error::Aliasing { need, .. }) => assert_eq!(need, 9),
            other => panic!("expected aliasing error, got {other:?}"),
        }
        assert!(project_density(|_| 1.0, &spec, 9).is_ok());
    }

    #[test]
    fn non_finite_density_is_rejected() {
        let spec = spec1(2, 1.0);
        assert!(project_density(|x| if x[0] > 0.5 { f64::NAN } else { 1.0 }, &spec, 16).is_err());
    }

    #[test]
    fn reconstruct_constant_mode() {
        let t = 4.0;
        let spec = spec1(2, t);
        let theta = FourierVec::uniform(spec);
        for x in [0.0, 0.7, 3.9] {
            assert_relative_eq!(reconstruct_density(&theta, &[x]).unwrap(), 1.0 / t);
            assert_relative_eq!(series_value(&theta, &[x]).unwrap(), 1.0);
        }
    }

    #[test]
    fn reconstruct_rejects_wrong_dimension() {
        let theta = FourierVec::uniform(spec1(2, 1.0));
        assert!(reconstruct_density(&theta, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn gram_diagonal_for_unit_circle() {
        let spec = BasisSpec::new(1, 2.0 * PI, 3).unwrap();
        let g = gram_operator(&spec);
        let diag: Vec<f64> = g.matrix().diagonal().iter().cloned().collect();
        let expect = [0.0, 1.0, 1.0, 4.0, 4.0, 9.0, 9.0];
        for (a, b) in diag.iter().zip(expect) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
        assert_eq!(g.null_mask()[0], true);
        assert!(g.null_mask()[1..].iter().all(|m| !m));
    }

    #[test]
    fn gram_matches_quadrature_of_jacobians() {
        for spec in [spec1(4, 1.3), Arc::new(BasisSpec::new(2, 1.0, 2).unwrap())] {
            let analytic = gram_operator(&spec);
            let g = spec.gram_weight();
            let numeric = GramOperator::from_quadrature(&spec, |_| g, 4 * spec.max_freq() + 5).unwrap();
            let scale = analytic.matrix().amax();
            assert!((analytic.matrix() - numeric.matrix()).amax() <= 1e-6 * scale);
        }
    }

    #[test]
    fn zero_is_feasible_on_every_grid() {
        let spec = spec1(3, 1.0);
        for m in [2, 7, 50] {
            let grid = constraint_grid(&spec, m).unwrap();
            assert_eq!(grid.max_violation(&DVector::zeros(spec.p())), 0.0);
            assert_eq!(grid.under_resolved(), m < 7);
        }
    }

    #[test]
    fn single_cosine_feasibility_radius() {
        // f = η √2 cos(2πx/T): max |f'| = η √2 · 2π/T, so |η| ≤ T/(2π√2).
        let t = 1.7;
        let spec = spec1(1, t);
        let grid = constraint_grid(&spec, 64).unwrap();
        let limit = t / (2.0 * PI * SQRT_2);
        let mut eta = DVector::zeros(3);
        eta[1] = limit * (1.0 - 1e-9);
        assert_eq!(grid.max_violation(&eta), 0.0);
        eta[1] = limit * (1.0 + 1e-6);
        assert!(grid.max_violation(&eta) > 0.0);
    }

    #[test]
    fn jacobian_factor_matches_quad_form() {
        let spec = Arc::new(BasisSpec::new(2, 1.0, 1).unwrap());
        let grid = constraint_grid(&spec, 5).unwrap();
        let eta = DVector::from_fn(spec.p(), |i, _| (i as f64 * 0.37).sin());
        let free: Vec<f64> = eta.iter().skip(1).cloned().collect();
        for j in 0..grid.len() {
            let a = grid.quad_form(j, &eta);
            let b = grid.free_quad(j, &free);
            assert_relative_eq!(a, b, epsilon = 1e-12);
            let f = &grid.factors[j];
            let q = spec.free_dim();
            let c: f64 = f
                .s2
                .iter()
                .enumerate()
                .map(|(r, s2)| {
                    let dot: f64 = f.vt[r * q..(r + 1) * q].iter().zip(&free).map(|(x, y)| x * y).sum();
                    s2 * dot * dot
                })
                .sum();
            assert_relative_eq!(a, c, epsilon = 1e-10);
        }
    }
}
