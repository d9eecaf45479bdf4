//! Monte-Carlo experiment engine: sample a measure family, fit barycenters,
//! compare against the Fisher linearization and the matched Gaussian, and fit
//! log-log rates in `n`.
//!
//! Per basis size the engine first draws a calibration sample at `θ*` and
//! estimates the per-measure Fisher matrix `D₁²` and score covariance `Σ`.
//! With `n` measures `D² = n D₁²`, and the score sum `D̆^{-1}∇̆L(θ*)` has
//! covariance `Σ` for every `n`, so a single reference Gaussian serves the
//! whole sweep.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barycenter::{solve_barycenter, BarycenterOptions};
use crate::basis::{constraint_grid, BasisSpec, ConstraintGrid, FourierVec};
use crate::bounds::{compute_bounds, r_bound, BoundInputs, BoundReport};
use crate::density::{DensityModel, TrigTerm};
use crate::dual::{solve_dual, DualOptions};
use crate::error::{invalid, Error, Result};
use crate::fisher::{
    breve_grad, deviation_norms, hessian_sum, schur_breve, FisherEstimate, RESIDUAL_SIGN,
};
use crate::gaussdiag::{
    anticoncentration, bootstrap_region, gaussian_reference, ks_distance, mu_moments, quantile, stream_rng,
    w1_proj, CopyDraws, ScoreSet,
};
use crate::linalg::{sym_apply, sym_sqrt};

pub const SCHEMA_VERSION: u32 = 1;
/// Cells with a larger failure fraction mark the experiment invalid.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;
/// Fewer replications per cell than this and no rates are fitted.
pub const MIN_REPLICATIONS_FOR_RATES: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilySpec {
    /// Uniform on an interval (box) with uniform random location and a width
    /// drawn from `[min_width, max_width]` (fractions of the period).
    SubInterval { min_width: f64, max_width: f64 },
    /// Uniform plus a trigonometric perturbation with independent coefficients
    /// of size at most `amplitude` on frequencies `1..=max_freq` along each axis.
    TrigPerturbed {
        amplitude: f64,
        max_freq: usize,
        #[serde(default)]
        law: CoefficientLaw,
    },
    /// Wrapped Gaussian with uniform random location and std drawn from
    /// `[std_lo, std_hi]` (fractions of the period).
    WrappedGaussian { std_lo: f64, std_hi: f64 },
    /// Every measure equal to `density`.
    Fixed { density: DensityModel },
}

/// Distribution of the perturbation coefficients, scaled by the amplitude.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientLaw {
    /// `U[−1, 1]`.
    #[default]
    Uniform,
    /// Random signs `±1`.
    Rademacher,
}

impl CoefficientLaw {
    fn draw(self, rng: &mut impl Rng) -> f64 {
        match self {
            CoefficientLaw::Uniform => 2.0 * rng.random::<f64>() - 1.0,
            CoefficientLaw::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

impl FamilySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            FamilySpec::SubInterval { min_width, max_width } => {
                if !(0.0 < *min_width && min_width <= max_width && *max_width <= 1.0) {
                    return Err(invalid("sub_interval widths must satisfy 0 < min <= max <= 1"));
                }
            }
            FamilySpec::TrigPerturbed { amplitude, max_freq, .. } => {
                if *max_freq == 0 || !(*amplitude >= 0.0) {
                    return Err(invalid("trig_perturbed needs max_freq >= 1 and amplitude >= 0"));
                }
                // Worst case Σ(|a| + |b|) over all axes and frequencies.
                if 2.0 * *amplitude * *max_freq as f64 >= 1.0 {
                    return Err(invalid(format!(
                        "amplitude {amplitude} with max_freq {max_freq} can make the density negative"
                    )));
                }
            }
            FamilySpec::WrappedGaussian { std_lo, std_hi } => {
                if !(0.0 < *std_lo && std_lo <= std_hi) {
                    return Err(invalid("wrapped_gaussian needs 0 < std_lo <= std_hi"));
                }
            }
            FamilySpec::Fixed { .. } => {}
        }
        Ok(())
    }

    pub fn sample_model(&self, rng: &mut impl Rng, spec: &BasisSpec) -> DensityModel {
        let (d, t) = (spec.dim(), spec.period());
        match self {
            FamilySpec::SubInterval { min_width, max_width } => {
                let lo: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * t).collect();
                let hi = lo
                    .iter()
                    .map(|l| l + t * (min_width + (max_width - min_width) * rng.random::<f64>()))
                    .collect();
                DensityModel::Uniform {
                    lo: crate::density::AxisValues::PerAxis(lo),
                    hi: crate::density::AxisValues::PerAxis(hi),
                }
            }
            FamilySpec::TrigPerturbed { amplitude, max_freq, law } => {
                let mut terms = Vec::with_capacity(d * max_freq);
                for axis in 0..d {
                    for k in 1..=*max_freq {
                        let mut freq = vec![0i64; d];
                        freq[axis] = k as i64;
                        terms.push(TrigTerm {
                            freq,
                            cos: amplitude * law.draw(rng),
                            sin: amplitude * law.draw(rng),
                        });
                    }
                }
                DensityModel::TrigPerturbed { terms }
            }
            FamilySpec::WrappedGaussian { std_lo, std_hi } => {
                let mean: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * t).collect();
                let std = (0..d)
                    .map(|_| t * (std_lo + (std_hi - std_lo) * rng.random::<f64>()))
                    .collect();
                DensityModel::WrappedGaussian {
                    mean: crate::density::AxisValues::PerAxis(mean),
                    std: crate::density::AxisValues::PerAxis(std),
                }
            }
            FamilySpec::Fixed { density } => density.clone(),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng, spec: &Arc<BasisSpec>) -> Result<FourierVec> {
        self.sample_model(rng, spec).coefficients(spec, 0)
    }

    /// Barycenter of the population when it is known in closed form.
    /// Sub-interval and wrapped-Gaussian laws are invariant under every
    /// translation of the torus. The perturbation law is symmetric about the
    /// uniform density and `l` is even, so with a unique minimizer `θ*` is
    /// uniform in all three cases.
    pub fn analytic_center(&self, spec: &Arc<BasisSpec>) -> Result<Option<FourierVec>> {
        Ok(match self {
            FamilySpec::Fixed { density } => Some(density.coefficients(spec, 0)?),
            _ => Some(FourierVec::uniform(spec.clone())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThetaStarMode {
    #[default]
    Analytic,
    /// Barycenter of the calibration sample.
    Calibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub family: FamilySpec,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_period")]
    pub period: f64,
    pub n_list: Vec<usize>,
    /// Basis sizes `p = (2K + 1)^dim`.
    pub p_list: Vec<usize>,
    pub replications: usize,
    pub eps: f64,
    pub grid_m: usize,
    /// Leading free coordinates kept by the projected statistic; all when absent.
    #[serde(default)]
    pub p_split: Option<usize>,
    #[serde(default)]
    pub theta_star_mode: ThetaStarMode,
    #[serde(default = "default_calibration")]
    pub calibration_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub barycenter: BarycenterOptions,
    /// Bootstrap replications per Monte-Carlo replication (coverage study).
    #[serde(default)]
    pub bootstrap_replications: Option<usize>,
    #[serde(default = "default_gaussian_draws")]
    pub gaussian_draws: usize,
    #[serde(default = "default_rate_resamples")]
    pub rate_resamples: usize,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    #[serde(default = "default_t")]
    pub t: f64,
    #[serde(default)]
    pub c_q: f64,
    /// Localization radius for the bound report; the `r` bound when absent.
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default = "default_directions")]
    pub projections: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_dim() -> usize {
    1
}
fn default_period() -> f64 {
    1.0
}
fn default_calibration() -> usize {
    2000
}
fn default_gaussian_draws() -> usize {
    20_000
}
fn default_rate_resamples() -> usize {
    1000
}
fn default_ci_level() -> f64 {
    0.9
}
fn default_t() -> f64 {
    2.0
}
fn default_directions() -> usize {
    32
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| e.context(format!("config {}", path.display())))?;
        if let (Some(out), Some(base)) = (&cfg.output_dir, path.parent()) {
            if out.is_relative() {
                cfg.output_dir = Some(base.join(out));
            }
        }
        if let FamilySpec::Fixed { density } = &mut cfg.family {
            density.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.family.validate()?;
        if self.n_list.is_empty() || self.p_list.is_empty() {
            return Err(invalid("n_list and p_list must be nonempty"));
        }
        if self.n_list.contains(&0) {
            return Err(invalid("n_list entries must be positive"));
        }
        if self.replications == 0 {
            return Err(invalid("replications must be positive"));
        }
        if !(self.eps > 0.0) || !(self.period > 0.0) || self.dim == 0 {
            return Err(invalid("eps, period and dim must be positive"));
        }
        if self.calibration_size < 2 {
            return Err(invalid("calibration_size must be at least 2"));
        }
        if !(0.0 < self.ci_level && self.ci_level < 1.0) {
            return Err(invalid("ci_level must lie in (0, 1)"));
        }
        if let Some(b) = self.bootstrap_replications {
            if b < 100 {
                return Err(invalid("bootstrap_replications must be at least 100"));
            }
        }
        for &p in &self.p_list {
            self.max_freq_for(p)?;
        }
        Ok(())
    }

    /// `K` with `(2K + 1)^dim = p`.
    pub fn max_freq_for(&self, p: usize) -> Result<usize> {
        let side = (p as f64).powf(1.0 / self.dim as f64).round() as usize;
        if side < 3 || side % 2 == 0 || side.pow(self.dim as u32) != p {
            return Err(invalid(format!("p = {p} is not (2K + 1)^{} with K >= 1", self.dim)));
        }
        Ok((side - 1) / 2)
    }
}

/// One successful Monte-Carlo replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub seed: u64,
    pub n: usize,
    pub p: usize,
    pub rep: usize,
    /// `‖D̆(θ̂_u − θ*_u)‖`.
    pub stat_norm: f64,
    /// `‖D̆(θ̂_u − θ*_u) − s D̆^{-1}∇̆L(θ*)‖`.
    pub residual_norm: f64,
    /// `‖D̆^{-1}∇̆L(θ*)‖`.
    pub score_norm: f64,
    pub ratio: f64,
    pub full_stat_norm: f64,
    pub full_residual_norm: f64,
    pub full_score_norm: f64,
    pub devbound_ok: bool,
    pub r_ok: bool,
    pub boot_q90: Option<f64>,
    pub covered_90: Option<bool>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub level: f64,
    /// Nonpositive values left out of the log fit.
    pub excluded: usize,
    /// `(x, y, ci_lo, ci_hi)` per group.
    pub points: Vec<(f64, f64, f64, f64)>,
}

impl RateFit {
    pub fn defined(&self) -> bool {
        self.slope.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct RateGroup {
    pub x: f64,
    pub values: Vec<f64>,
}

/// Least squares of `log y` on `log x` over points with `y > 0`.
pub fn log_log_ols(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Log-log fit of group medians (nonpositive values dropped first) with a
/// percentile bootstrap CI from resampling each group's values.
pub fn fit_rate(groups: &[RateGroup], resamples: usize, level: f64, seed: u64) -> Result<RateFit> {
    let excluded: usize = groups.iter().map(|g| g.values.iter().filter(|&&v| !(v > 0.0)).count()).sum();
    let cleaned: Vec<RateGroup> = groups
        .iter()
        .map(|g| RateGroup {
            x: g.x,
            values: g.values.iter().copied().filter(|&v| v > 0.0).collect(),
        })
        .collect();
    let mut fit = fit_rate_by(&cleaned, median, resamples, level, seed)?;
    fit.excluded += excluded;
    Ok(fit)
}

/// Same as [`fit_rate`] with an arbitrary per-group statistic.
pub fn fit_rate_by<F>(groups: &[RateGroup], stat: F, resamples: usize, level: f64, seed: u64) -> Result<RateFit>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let mut xs: Vec<f64> = groups.iter().map(|g| g.x).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(invalid(format!("rate fit needs at least 3 distinct x values, got {}", xs.len())));
    }
    let centre: Vec<(f64, f64)> = groups
        .iter()
        .map(|g| (g.x, if g.values.is_empty() { f64::NAN } else { stat(&g.values) }))
        .collect();
    let excluded = centre.iter().filter(|(_, y)| !(*y > 0.0)).count();
    let base = log_log_ols(&centre);
    // Each resample draws every group with replacement from its own values.
    let draws: Vec<(Option<(f64, f64)>, Vec<f64>)> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            let ys: Vec<f64> = groups
                .iter()
                .map(|g| {
                    if g.values.is_empty() {
                        return f64::NAN;
                    }
                    let v: Vec<f64> = (0..g.values.len())
                        .map(|_| g.values[rng.random_range(0..g.values.len())])
                        .collect();
                    stat(&v)
                })
                .collect();
            let pts: Vec<(f64, f64)> = groups.iter().zip(&ys).map(|(g, &y)| (g.x, y)).collect();
            (log_log_ols(&pts), ys)
        })
        .collect();
    let lo_q = (1.0 - level) / 2.0;
    let hi_q = 1.0 - lo_q;
    let mut slopes: Vec<f64> = draws.iter().filter_map(|d| d.0.map(|s| s.0)).collect();
    slopes.sort_by(f64::total_cmp);
    let (ci_lo, ci_hi) = if base.is_some() && !slopes.is_empty() {
        (Some(quantile(&slopes, lo_q)), Some(quantile(&slopes, hi_q)))
    } else {
        (None, None)
    };
    let points = centre
        .iter()
        .enumerate()
        .map(|(k, &(x, y))| {
            let mut col: Vec<f64> = draws.iter().map(|d| d.1[k]).filter(|v| v.is_finite()).collect();
            col.sort_by(f64::total_cmp);
            (x, y, quantile(&col, lo_q), quantile(&col, hi_q))
        })
        .collect();
    Ok(RateFit {
        slope: base.map(|b| b.0),
        intercept: base.map(|b| b.1),
        ci_lo,
        ci_hi,
        level,
        excluded,
        points,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub n: usize,
    pub p: usize,
    pub records: usize,
    pub failures: usize,
    pub invalid: bool,
    pub median_stat: f64,
    pub median_residual: f64,
    pub median_ratio: f64,
    pub median_full_ratio: f64,
    pub ks_norm: f64,
    pub w1_proj: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub mu3_bound: f64,
    pub c_a: f64,
    pub devbound_fraction: f64,
    pub r_fraction: f64,
    pub coverage_90: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub p: usize,
    pub p_split: usize,
    pub size: usize,
    pub lambda_min_dkgd: f64,
    pub clipped: usize,
    pub d_eigenvalues: Vec<f64>,
    /// `‖mean score‖ / sqrt(tr Σ / size)`; of order one when `θ*` is right.
    pub score_mean_z: f64,
    pub sigma_trace: f64,
    pub theta_star: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PRates {
    pub p: usize,
    pub ks: Option<RateFit>,
    pub ratio: Option<RateFit>,
    pub stat: Option<RateFit>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateReport {
    pub schema_version: u32,
    pub valid: bool,
    pub seed: u64,
    pub replications: usize,
    pub failures: usize,
    pub calibration: Vec<CalibrationSummary>,
    pub cells: Vec<CellReport>,
    pub rates: Vec<PRates>,
    #[serde(skip)]
    pub records: Vec<Record>,
    #[serde(skip)]
    pub bounds: Vec<BoundReport>,
}

impl RateReport {
    pub fn cell(&self, n: usize, p: usize) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.n == n && c.p == p)
    }

    pub fn rates_for(&self, p: usize) -> Option<&PRates> {
        self.rates.iter().find(|r| r.p == p)
    }
}

/// Per-basis quantities shared by every `n`.
struct Setup {
    p: usize,
    p_split: usize,
    grid: ConstraintGrid,
    theta_star: FourierVec,
    fisher1: FisherEstimate,
    sigma: DMatrix<f64>,
    calib_scores: Vec<DVector<f64>>,
    reference: Vec<f64>,
    summary: CalibrationSummary,
}

fn stream(p_idx: usize, block: usize, index: usize) -> u64 {
    ((p_idx as u64) << 48) | ((block as u64) << 32) | index as u64
}

fn setup(cfg: &ExperimentConfig, p_idx: usize, p: usize) -> Result<Setup> {
    let spec = Arc::new(BasisSpec::new(cfg.dim, cfg.period, cfg.max_freq_for(p)?)?);
    let grid = constraint_grid(&spec, cfg.grid_m)?;
    let q = spec.free_dim();
    let p_split = cfg.p_split.unwrap_or(q).min(q);
    let calib: Vec<FourierVec> = (0..cfg.calibration_size)
        .into_par_iter()
        .map(|j| cfg.family.sample(&mut stream_rng(cfg.seed, stream(p_idx, 0, j)), &spec))
        .collect::<Result<_>>()?;
    let theta_star = match cfg.theta_star_mode {
        ThetaStarMode::Analytic => cfg
            .family
            .analytic_center(&spec)?
            .ok_or_else(|| invalid("family has no analytic center"))?,
        ThetaStarMode::Calibration => {
            let fit = solve_barycenter(&calib, cfg.eps, &grid, &cfg.barycenter)?;
            crate::barycenter::require_converged(fit)
                .map_err(|e| e.context("calibration barycenter"))?
                .theta_hat
        }
    };
    let dual = &cfg.barycenter.dual;
    let h = hessian_sum(&theta_star, &calib, cfg.eps, &grid, dual)? / calib.len() as f64;
    let kg = crate::fisher::kg_free_diagonal(&grid);
    let fisher1 = FisherEstimate::from_matrix(h, &kg, p_split)?;
    let breve1 = schur_breve(&fisher1, p_split)?;
    let breve1_inv_sqrt = sym_apply(&breve1, |v| 1.0 / v.sqrt());
    let calib_scores: Vec<DVector<f64>> = calib
        .par_iter()
        .map(|t| {
            let g = free_gradient(&theta_star, t, cfg.eps, &grid, dual)?;
            Ok(&breve1_inv_sqrt * breve_grad(&g, &fisher1, p_split)?)
        })
        .collect::<Result<_>>()?;
    let size = calib_scores.len() as f64;
    let mut sigma = DMatrix::zeros(p_split, p_split);
    let mut mean = DVector::zeros(p_split);
    for y in &calib_scores {
        sigma.ger(1.0 / size, y, y, 1.0);
        mean += y / size;
    }
    let sigma_trace = sigma.trace();
    let score_mean_z = if sigma_trace > 0.0 {
        mean.norm() / (sigma_trace / size).sqrt()
    } else {
        0.0
    };
    let reference = gaussian_reference(&sigma, cfg.gaussian_draws, cfg.seed ^ stream(p_idx, 1, 0));
    let summary = CalibrationSummary {
        p,
        p_split,
        size: calib_scores.len(),
        lambda_min_dkgd: fisher1.lambda_min_dkgd,
        clipped: fisher1.clipped,
        d_eigenvalues: fisher1.d_eigenvalues().iter().copied().collect(),
        score_mean_z,
        sigma_trace,
        theta_star: theta_star.coeffs().iter().copied().collect(),
    };
    Ok(Setup {
        p,
        p_split,
        grid,
        theta_star,
        fisher1,
        sigma,
        calib_scores,
        reference,
        summary,
    })
}

/// `∇l(θ* − θ)` on the free coordinates.
fn free_gradient(
    theta_star: &FourierVec,
    theta: &FourierVec,
    eps: f64,
    grid: &ConstraintGrid,
    opts: &DualOptions,
) -> Result<DVector<f64>> {
    let sol = solve_dual(&theta_star.sub(theta)?, eps, grid, opts)?;
    if !sol.converged {
        return Err(Error::NonConverged {
            iterations: sol.iterations,
            residual: sol.feasibility_residual,
        });
    }
    Ok(sol.eta.rows(1, sol.eta.len() - 1).into_owned())
}

/// Per-`n` scaled quantities.
struct Scaled {
    fisher: FisherEstimate,
    breve_sqrt: DMatrix<f64>,
    breve_inv_sqrt: DMatrix<f64>,
}

fn scaled(s: &Setup, n: usize, grid: &ConstraintGrid) -> Result<Scaled> {
    let kg = crate::fisher::kg_free_diagonal(grid);
    let fisher = s.fisher1.scaled(n as f64, &kg)?;
    let breve = schur_breve(&fisher, s.p_split)?;
    Ok(Scaled {
        breve_sqrt: sym_sqrt(&breve),
        breve_inv_sqrt: sym_apply(&breve, |v| 1.0 / v.sqrt()),
        fisher,
    })
}

struct RepOutcome {
    record: Record,
    stat: DVector<f64>,
}

fn replicate(
    cfg: &ExperimentConfig,
    s: &Setup,
    sc: &Scaled,
    p_idx: usize,
    n_idx: usize,
    n: usize,
    rep: usize,
) -> Result<RepOutcome> {
    let spec = s.grid.spec().clone();
    let seed_stream = stream(p_idx, n_idx + 2, rep);
    let mut rng = stream_rng(cfg.seed, seed_stream);
    let thetas: Vec<FourierVec> = (0..n).map(|_| cfg.family.sample(&mut rng, &spec)).collect::<Result<_>>()?;
    let opts = BarycenterOptions {
        parallel: false,
        ..cfg.barycenter
    };
    let fit = solve_barycenter(&thetas, cfg.eps, &s.grid, &opts)?;
    let fit = crate::barycenter::require_converged(fit)?;
    let mut g = DVector::zeros(spec.free_dim());
    for t in &thetas {
        g += free_gradient(&s.theta_star, t, cfg.eps, &s.grid, &opts.dual)?;
    }
    let x = fit.theta_hat.free() - s.theta_star.free();
    let xu = x.rows(0, s.p_split).into_owned();
    let stat = &sc.breve_sqrt * &xu;
    let score = &sc.breve_inv_sqrt * breve_grad(&g, &sc.fisher, s.p_split)?;
    let (residual, full_residual) = deviation_norms(&x, &g, &sc.fisher, s.p_split, RESIDUAL_SIGN)?;
    let full_stat = (sc.fisher.d() * &x).norm();
    let full_score = (sc.fisher.d_inv() * &g).norm();
    let (stat_norm, score_norm) = (stat.norm(), score.norm());
    let (boot_q90, covered_90) = match cfg.bootstrap_replications {
        Some(b) => {
            let boot_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ seed_stream;
            let region = bootstrap_region(&thetas, &fit, &sc.fisher, s.p_split, b, cfg.eps, &s.grid, &opts, boot_seed)?;
            let q90 = region.quantile_at(0.9);
            (Some(q90), Some(stat_norm <= q90))
        }
        None => (None, None),
    };
    let record = Record {
        seed: cfg.seed,
        n,
        p: s.p,
        rep,
        stat_norm,
        residual_norm: residual,
        score_norm,
        ratio: if score_norm > 0.0 { residual / score_norm } else { 0.0 },
        full_stat_norm: full_stat,
        full_residual_norm: full_residual,
        full_score_norm: full_score,
        devbound_ok: residual <= full_residual * (1.0 + 1e-9) + 1e-12,
        r_ok: full_stat <= 4.0 * full_score,
        boot_q90,
        covered_90,
        iterations: fit.iterations,
    };
    Ok(RepOutcome { record, stat })
}

fn fraction(flags: impl Iterator<Item = bool>) -> f64 {
    let (mut hit, mut all) = (0usize, 0usize);
    for f in flags {
        all += 1;
        hit += f as usize;
    }
    if all == 0 {
        f64::NAN
    } else {
        hit as f64 / all as f64
    }
}

/// Runs the configured sweep. Output files are written when `output_dir` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RateReport> {
    cfg.validate()?;
    let mut report = RateReport {
        schema_version: SCHEMA_VERSION,
        valid: true,
        seed: cfg.seed,
        replications: cfg.replications,
        failures: 0,
        calibration: Vec::new(),
        cells: Vec::new(),
        rates: Vec::new(),
        records: Vec::new(),
        bounds: Vec::new(),
    };
    for (p_idx, &p) in cfg.p_list.iter().enumerate() {
        let s = setup(cfg, p_idx, p).map_err(|e| e.context(format!("calibration for p = {p}")))?;
        log::info!(
            "p = {p}: calibration λ_min(D₁KGD₁) = {:e}, clipped {}, mean-score z {:.3}",
            s.summary.lambda_min_dkgd,
            s.summary.clipped,
            s.summary.score_mean_z
        );
        let mut ks_groups = Vec::new();
        let mut ratio_groups = Vec::new();
        let mut stat_groups = Vec::new();
        for (n_idx, &n) in cfg.n_list.iter().enumerate() {
            let sc = scaled(&s, n, &s.grid)?;
            let outcomes: Vec<Result<RepOutcome>> = (0..cfg.replications)
                .into_par_iter()
                .map(|rep| replicate(cfg, &s, &sc, p_idx, n_idx, n, rep))
                .collect();
            let mut recs = Vec::with_capacity(outcomes.len());
            let mut stats = Vec::with_capacity(outcomes.len());
            let mut failures = 0;
            for (rep, o) in outcomes.into_iter().enumerate() {
                match o {
                    Ok(o) => {
                        recs.push(o.record);
                        stats.push(o.stat);
                    }
                    Err(e) => {
                        log::warn!("p = {p}, n = {n}, replication {rep} failed: {e}");
                        failures += 1;
                    }
                }
            }
            let invalid = failures as f64 > MAX_FAILURE_FRACTION * cfg.replications as f64;
            report.valid &= !invalid;
            report.failures += failures;
            let cell = summarize_cell(cfg, &s, &sc, p_idx, n, &recs, &stats, failures, invalid)?;
            let bounds = compute_bounds(&BoundInputs {
                n,
                p: s.p_split,
                eps: cfg.eps,
                t: cfg.t,
                c_q: cfg.c_q,
                lambda_min_dkgd: sc.fisher.lambda_min_dkgd,
                d_eigenvalues: sc.fisher.d_eigenvalues().iter().copied().collect(),
                r: cfg.r.unwrap_or_else(|| r_bound(n, cfg.t, sc.fisher.lambda_min_dkgd)),
            })?;
            let norms: Vec<f64> = recs.iter().map(|r| r.stat_norm).collect();
            ks_groups.push(RateGroup { x: n as f64, values: norms.clone() });
            ratio_groups.push(RateGroup {
                x: n as f64,
                values: recs.iter().map(|r| r.ratio).collect(),
            });
            stat_groups.push(RateGroup { x: n as f64, values: norms });
            report.cells.push(cell);
            report.bounds.push(bounds);
            report.records.extend(recs);
        }
        report.rates.push(fit_rates(cfg, &s, p_idx, &ks_groups, &ratio_groups, &stat_groups)?);
        report.calibration.push(s.summary);
    }
    if let Some(dir) = &cfg.output_dir {
        write_outputs(&report, dir)?;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn summarize_cell(
    cfg: &ExperimentConfig,
    s: &Setup,
    sc: &Scaled,
    p_idx: usize,
    n: usize,
    recs: &[Record],
    stats: &[DVector<f64>],
    failures: usize,
    invalid: bool,
) -> Result<CellReport> {
    let norms: Vec<f64> = recs.iter().map(|r| r.stat_norm).collect();
    let (ks_norm, w1) = if recs.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let seed = cfg.seed ^ stream(p_idx, 1, n);
        (
            ks_distance(&norms, &s.reference)?,
            w1_proj(stats, &s.sigma, cfg.projections, cfg.gaussian_draws, seed)?,
        )
    };
    // μ for n summands X_i = Y_i/√n: the plug-in sum over the calibration
    // sample scaled from `size` to `n` summands.
    let size = s.calib_scores.len() as f64;
    let xs: Vec<DVector<f64>> = s.calib_scores.iter().map(|y| y / size.sqrt()).collect();
    let mu = mu_moments(&ScoreSet::with_sigma(xs, s.sigma.clone())?, CopyDraws::All, cfg.seed)?;
    let scale = (size / n as f64).sqrt();
    let mu3_bound = 4.0 * std::f64::consts::SQRT_2 * s.p_split as f64 / sc.fisher.lambda_min_dkgd.sqrt();
    let z = median(&s.reference);
    let c_a = if z > 0.0 {
        anticoncentration(&s.sigma, z, 0.1 * z, cfg.gaussian_draws, cfg.seed ^ stream(p_idx, 1, 1))?
    } else {
        0.0
    };
    let coverage = if cfg.bootstrap_replications.is_some() {
        Some(fraction(recs.iter().filter_map(|r| r.covered_90)))
    } else {
        None
    };
    Ok(CellReport {
        n,
        p: s.p,
        records: recs.len(),
        failures,
        invalid,
        median_stat: median(&norms),
        median_residual: median(&recs.iter().map(|r| r.residual_norm).collect::<Vec<_>>()),
        median_ratio: median(&recs.iter().map(|r| r.ratio).collect::<Vec<_>>()),
        median_full_ratio: median(
            &recs
                .iter()
                .map(|r| if r.full_score_norm > 0.0 { r.full_residual_norm / r.full_score_norm } else { 0.0 })
                .collect::<Vec<_>>(),
        ),
        ks_norm,
        w1_proj: w1,
        mu2: mu.mu2 * scale,
        mu3: mu.mu3 * scale,
        mu3_bound,
        c_a,
        devbound_fraction: fraction(recs.iter().map(|r| r.devbound_ok)),
        r_fraction: fraction(recs.iter().map(|r| r.r_ok)),
        coverage_90: coverage,
    })
}

fn fit_rates(
    cfg: &ExperimentConfig,
    s: &Setup,
    p_idx: usize,
    ks_groups: &[RateGroup],
    ratio_groups: &[RateGroup],
    stat_groups: &[RateGroup],
) -> Result<PRates> {
    let mut distinct: Vec<usize> = cfg.n_list.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Ok(PRates {
            p: s.p,
            ks: None,
            ratio: None,
            stat: None,
            note: Some("fewer than 3 distinct n values".into()),
        });
    }
    if cfg.replications < MIN_REPLICATIONS_FOR_RATES {
        return Ok(PRates {
            p: s.p,
            ks: None,
            ratio: None,
            stat: None,
            note: Some(format!("fewer than {MIN_REPLICATIONS_FOR_RATES} replications")),
        });
    }
    let seed = cfg.seed ^ stream(p_idx, 1, 2);
    let reference = &s.reference;
    let ks = fit_rate_by(
        ks_groups,
        |v| ks_distance(v, reference).unwrap_or(f64::NAN),
        cfg.rate_resamples,
        cfg.ci_level,
        seed,
    )?;
    let ratio = fit_rate(ratio_groups, cfg.rate_resamples, cfg.ci_level, seed ^ 1)?;
    let stat = fit_rate(stat_groups, cfg.rate_resamples, cfg.ci_level, seed ^ 2)?;
    let undefined = [&ks, &ratio, &stat].iter().any(|f| !f.defined());
    Ok(PRates {
        p: s.p,
        ks: Some(ks),
        ratio: Some(ratio),
        stat: Some(stat),
        note: undefined.then(|| "slope undefined: nonpositive statistics".to_string()),
    })
}

/// `records.csv`, `rates.json`, `bounds.json` and one `(x, y, ci_lo, ci_hi)`
/// CSV per fitted curve.
pub fn write_outputs(report: &RateReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("records.csv"))?;
    for r in &report.records {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(dir.join("rates.json"), serde_json::to_string_pretty(report)? + "\n")?;
    fs::write(dir.join("bounds.json"), serde_json::to_string_pretty(&report.bounds)? + "\n")?;
    for rates in &report.rates {
        for (name, fit) in [("ks", &rates.ks), ("ratio", &rates.ratio), ("stat", &rates.stat)] {
            let Some(fit) = fit else { continue };
            let mut w = csv::Writer::from_path(dir.join(format!("plot_{name}_p{}.csv", rates.p)))?;
            w.write_record(["x", "y", "ci_lo", "ci_hi"])?;
            for &(x, y, lo, hi) in &fit.points {
                w.write_record([x, y, lo, hi].iter().map(|v| v.to_string()))?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn groups(xs: &[f64], mut f: impl FnMut(f64, usize) -> f64, reps: usize) -> Vec<RateGroup> {
        xs.iter()
            .map(|&x| RateGroup {
                x,
                values: (0..reps).map(|r| f(x, r)).collect(),
            })
            .collect()
    }

    #[test]
    fn exact_power_law_slope() {
        let g = groups(&[8.0, 16.0, 32.0, 64.0], |x, _| x.powf(-0.5), 5);
        let fit = fit_rate(&g, 50, 0.9, 1).unwrap();
        assert!((fit.slope.unwrap() + 0.5).abs() < 1e-12);
        assert!(fit.ci_lo.unwrap() <= fit.ci_hi.unwrap());
    }

    #[test]
    fn constant_has_zero_slope() {
        let g = groups(&[1.0, 2.0, 4.0], |_, _| 3.0, 4);
        assert!(fit_rate(&g, 20, 0.9, 1).unwrap().slope.unwrap().abs() < 1e-12);
    }

    #[test]
    fn noisy_power_law_ci_covers_truth() {
        let mut hits = 0;
        let seeds = 40;
        for seed in 0..seeds {
            let mut rng = stream_rng(seed, 0);
            let g = groups(
                &[8.0, 16.0, 32.0, 64.0, 128.0],
                |x, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x.powf(-0.5) * (1.0 + 0.1 * z)
                },
                30,
            );
            let fit = fit_rate(&g, 400, 0.9, seed + 100).unwrap();
            if fit.ci_lo.unwrap() <= -0.5 && -0.5 <= fit.ci_hi.unwrap() {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.9 * seeds as f64 - 2.0, "{hits}/{seeds}");
    }

    #[test]
    fn fit_rejects_too_few_points_and_counts_exclusions() {
        assert!(fit_rate(&groups(&[1.0, 2.0], |_, _| 1.0, 3), 10, 0.9, 0).is_err());
        let g = groups(&[1.0, 2.0, 4.0], |x, r| if r == 0 { 0.0 } else { x }, 3);
        let fit = fit_rate(&g, 10, 0.9, 0).unwrap();
        assert_eq!(fit.excluded, 3);
        assert!((fit.slope.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let text = r#"{"schema_version": 1, "family": {"kind": "trig_perturbed", "amplitude": 0.1, "max_freq": 2},
            "n_list": [4], "p_list": [5], "replications": 2, "eps": 0.01, "grid_m": 32}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.max_freq_for(5).unwrap(), 2);
        assert!(cfg.max_freq_for(6).is_err());
        assert!(ExperimentConfig::from_json(&text.replace("\"schema_version\": 1", "\"schema_version\": 9")).is_err());
        assert!(ExperimentConfig::from_json(&text.replace("0.1", "0.3")).is_err());
        assert!(ExperimentConfig::from_json(&text.replace("\"grid_m\"", "\"bogus\": 1, \"grid_m\"")).is_err());
    }

    fn tiny(family: FamilySpec) -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            family,
            dim: 1,
            period: 1.0,
            n_list: vec![4, 8, 16],
            p_list: vec![5],
            replications: 4,
            eps: 0.02,
            grid_m: 64,
            p_split: None,
            theta_star_mode: ThetaStarMode::Analytic,
            calibration_size: 40,
            seed: 9,
            barycenter: BarycenterOptions::default(),
            bootstrap_replications: None,
            gaussian_draws: 500,
            rate_resamples: 20,
            ci_level: 0.9,
            t: 2.0,
            c_q: 0.0,
            r: None,
            projections: 4,
            output_dir: None,
        }
    }

    #[test]
    fn degenerate_family_gives_zero_statistics() {
        let family = FamilySpec::Fixed {
            density: DensityModel::wrapped_gaussian_1d(0.3, 0.1),
        };
        let mut cfg = tiny(family);
        cfg.replications = MIN_REPLICATIONS_FOR_RATES;
        cfg.n_list = vec![2, 3, 4];
        let rep = run_experiment(&cfg).unwrap();
        assert!(rep.valid);
        assert!(rep.records.iter().all(|r| r.stat_norm == 0.0 && r.score_norm == 0.0));
        let rates = rep.rates_for(5).unwrap();
        assert!(!rates.stat.as_ref().unwrap().defined());
        assert!(rates.note.is_some());
    }

    #[test]
    fn small_run_is_consistent() {
        let rep = run_experiment(&tiny(FamilySpec::TrigPerturbed {
            amplitude: 0.15,
            max_freq: 2,
            law: CoefficientLaw::Uniform,
        }))
        .unwrap();
        assert_eq!(rep.cells.len(), 3);
        for c in &rep.cells {
            assert_eq!(c.records + c.failures, 4);
            assert!((0.0..=1.0).contains(&c.ks_norm));
            assert_eq!(c.devbound_fraction, 1.0);
        }
        assert!(rep.rates[0].note.is_some());
    }
}
