//! Empirical checks of the Gaussian approximation: score vectors and their
//! covariance, the `μ₂`/`μ₃` moment sums, KS and sliced W1 distances to the
//! matched Gaussian, anti-concentration and bootstrap regions.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barycenter::{solve_barycenter_from, BarycenterOptions, BarycenterResult};
use crate::basis::{ConstraintGrid, FourierVec};
use crate::dual::{gradient, DualOptions};
use crate::error::{invalid, Error, Result};
use crate::fisher::{breve_grad, breve_norm, schur_breve, FisherEstimate};
use crate::linalg::{sym_apply, sym_eigen, sym_inv_sqrt, sym_sqrt};
use crate::oracles::w1_line;

/// Levels reported by [`bootstrap_region`].
pub const BOOTSTRAP_LEVELS: [f64; 4] = [0.5, 0.9, 0.95, 0.99];

/// Generator for replication `index` of a run seeded with `seed`. Each index
/// gets its own ChaCha stream, so results do not depend on scheduling.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub xs: Vec<DVector<f64>>,
    /// `Σ_i X_i X_iᵀ` unless overridden.
    pub sigma: DMatrix<f64>,
    /// `Σ^{-1/2} X_i` (pseudo-inverse on a singular `Σ`).
    pub whitened: Vec<DVector<f64>>,
    pub sigma_rank: usize,
    sigma_inv_sqrt: DMatrix<f64>,
}

impl ScoreSet {
    pub fn from_vectors(xs: Vec<DVector<f64>>) -> Result<Self> {
        let dim = xs.first().map(|x| x.len()).ok_or_else(|| invalid("empty score set"))?;
        let mut sigma = DMatrix::zeros(dim, dim);
        for x in &xs {
            if x.len() != dim {
                return Err(Error::ShapeMismatch { expected: dim, got: x.len() });
            }
            sigma.ger(1.0, x, x, 1.0);
        }
        Self::with_sigma(xs, sigma)
    }

    /// Uses a given covariance (e.g. a population value) instead of the sample one.
    pub fn with_sigma(xs: Vec<DVector<f64>>, sigma: DMatrix<f64>) -> Result<Self> {
        let dim = sigma.nrows();
        if xs.iter().any(|x| x.len() != dim) || !sigma.is_square() {
            return Err(Error::ShapeMismatch {
                expected: dim,
                got: xs.first().map_or(0, |x| x.len()),
            });
        }
        let vals = sym_eigen(&sigma).0;
        let floor = 1e-12 * vals.amax().max(f64::MIN_POSITIVE);
        let sigma_rank = vals.iter().filter(|&&v| v > floor).count();
        if sigma_rank < dim {
            log::info!("score covariance has rank {sigma_rank} of {dim}; using the pseudo-inverse");
        }
        let sigma_inv_sqrt = sym_inv_sqrt(&sigma, floor);
        let whitened = xs.iter().map(|x| &sigma_inv_sqrt * x).collect();
        Ok(ScoreSet {
            xs,
            sigma,
            whitened,
            sigma_rank,
            sigma_inv_sqrt,
        })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn mean(&self) -> DVector<f64> {
        let dim = self.sigma.nrows();
        let sum = self.xs.iter().fold(DVector::zeros(dim), |acc, x| acc + x);
        sum / self.xs.len().max(1) as f64
    }

    /// `tr(Σ⁺ Σ_i X_i X_iᵀ)`.
    pub fn whitened_trace(&self) -> f64 {
        self.whitened.iter().map(|w| w.norm_squared()).sum()
    }

    pub fn sigma_inv_sqrt(&self) -> &DMatrix<f64> {
        &self.sigma_inv_sqrt
    }
}

/// `X_i = D̆^{-1} ∇̆ l(θ* − θ_i)`; with `p_split` equal to the full free
/// dimension this is `D^{-1} ∇l`.
pub fn score_vectors(
    theta_star: &FourierVec,
    thetas: &[FourierVec],
    fisher: &FisherEstimate,
    p_split: usize,
    eps: f64,
    grid: &ConstraintGrid,
    opts: &DualOptions,
) -> Result<ScoreSet> {
    if thetas.is_empty() {
        return Err(invalid("score vectors need at least one measure"));
    }
    let breve_inv_sqrt = sym_apply(&schur_breve(fisher, p_split)?, |v| 1.0 / v.max(f64::MIN_POSITIVE).sqrt());
    let xs: Vec<Result<DVector<f64>>> = thetas
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let delta = theta_star.sub(t)?;
            let g = gradient(&delta, eps, grid, opts).map_err(|e| e.context(format!("score for measure {i}")))?;
            let g_free = g.rows(1, g.len() - 1).into_owned();
            Ok(&breve_inv_sqrt * breve_grad(&g_free, fisher, p_split)?)
        })
        .collect();
    ScoreSet::from_vectors(xs.into_iter().collect::<Result<_>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyDraws {
    /// Average over every sample point as the independent copy.
    All,
    /// This many resampled copies per summand.
    MonteCarlo { pairs: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuMoments {
    pub mu2: f64,
    pub mu3: f64,
    pub sigma_rank: usize,
}

fn mu_terms(x: &DVector<f64>, wx: &DVector<f64>, c: &DVector<f64>, wc: &DVector<f64>) -> (f64, f64) {
    let a = (wx - wc).norm() * wx.norm();
    (a, a * (x - c).norm())
}

/// Plug-in `μ₂ = Σ_i E‖Σ^{-1/2}(X_i − X'_i)‖ ‖Σ^{-1/2}X_i‖` and
/// `μ₃ = Σ_i E‖Σ^{-1/2}(X_i − X'_i)‖ ‖Σ^{-1/2}X_i‖ ‖X_i − X'_i‖`, with the
/// copies `X'_i` resampled from the sample itself.
pub fn mu_moments(scores: &ScoreSet, draws: CopyDraws, seed: u64) -> Result<MuMoments> {
    if scores.len() < 2 {
        return Err(invalid("μ moments need at least two score vectors"));
    }
    let n = scores.len();
    let per_i: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (x, wx) = (&scores.xs[i], &scores.whitened[i]);
            match draws {
                CopyDraws::All => mean_terms((0..n).map(|j| mu_terms(x, wx, &scores.xs[j], &scores.whitened[j])), n),
                CopyDraws::MonteCarlo { pairs } => {
                    let mut rng = stream_rng(seed, i as u64);
                    let k = pairs.max(1);
                    mean_terms(
                        (0..k).map(|_| {
                            let j = rng.random_range(0..n);
                            mu_terms(x, wx, &scores.xs[j], &scores.whitened[j])
                        }),
                        k,
                    )
                }
            }
        })
        .collect();
    Ok(sum_moments(&per_i, scores.sigma_rank))
}

/// Same sums with `X'_i` uniform over the given `copies`.
pub fn mu_moments_against(scores: &ScoreSet, copies: &[DVector<f64>]) -> Result<MuMoments> {
    if copies.is_empty() {
        return Err(invalid("no copies supplied"));
    }
    let wcopies: Vec<DVector<f64>> = copies.iter().map(|c| &scores.sigma_inv_sqrt * c).collect();
    let per_i: Vec<(f64, f64)> = scores
        .xs
        .iter()
        .zip(&scores.whitened)
        .map(|(x, wx)| {
            let terms = copies.iter().zip(&wcopies).map(|(c, wc)| mu_terms(x, wx, c, wc));
            mean_terms(terms, copies.len())
        })
        .collect();
    Ok(sum_moments(&per_i, scores.sigma_rank))
}

fn mean_terms(it: impl Iterator<Item = (f64, f64)>, k: usize) -> (f64, f64) {
    let (a, b) = it.fold((0.0, 0.0), |s, t| (s.0 + t.0, s.1 + t.1));
    (a / k as f64, b / k as f64)
}

fn sum_moments(per_i: &[(f64, f64)], sigma_rank: usize) -> MuMoments {
    let (mu2, mu3) = per_i.iter().fold((0.0, 0.0), |s, t| (s.0 + t.0, s.1 + t.1));
    MuMoments { mu2, mu3, sigma_rank }
}

/// Norms of `n_draws` samples of `Z ~ N(0, Σ)`.
pub fn gaussian_reference(sigma: &DMatrix<f64>, n_draws: usize, seed: u64) -> Vec<f64> {
    gaussian_draws(sigma, n_draws, seed).iter().map(|z| z.norm()).collect()
}

fn gaussian_draws(sigma: &DMatrix<f64>, n_draws: usize, seed: u64) -> Vec<DVector<f64>> {
    let root = sym_sqrt(sigma);
    let dim = sigma.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_draws)
        .map(|_| {
            let xi = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            &root * xi
        })
        .collect()
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("KS distance needs nonempty samples"));
    }
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d.min(1.0))
}

/// Monte-Carlo estimate of `P(‖Z‖ ∈ [z, z + Δ]) / Δ`.
pub fn anticoncentration(sigma: &DMatrix<f64>, z: f64, width: f64, n_draws: usize, seed: u64) -> Result<f64> {
    if !(z > 0.0 && width > 0.0) {
        return Err(invalid(format!("need z > 0 and Δ > 0, got {z} and {width}")));
    }
    if n_draws == 0 {
        return Ok(0.0);
    }
    let norms = gaussian_reference(sigma, n_draws, seed);
    let hits = norms.iter().filter(|&&r| r >= z && r <= z + width).count();
    Ok(hits as f64 / n_draws as f64 / width)
}

/// Sliced W1 between the sample `stats` and `N(0, Σ)`: mean over random unit
/// directions of the 1D W1 between projections.
pub fn w1_proj(stats: &[DVector<f64>], sigma: &DMatrix<f64>, n_dirs: usize, n_draws: usize, seed: u64) -> Result<f64> {
    let dim = sigma.nrows();
    if stats.is_empty() || stats.iter().any(|s| s.len() != dim) {
        return Err(invalid("sliced W1 needs nonempty statistics matching Σ"));
    }
    let gauss = gaussian_draws(sigma, n_draws.max(1), seed);
    let mut rng = stream_rng(seed, u64::MAX);
    let ws = vec![1.0 / stats.len() as f64; stats.len()];
    let wg = vec![1.0 / gauss.len() as f64; gauss.len()];
    let mut total = 0.0;
    for _ in 0..n_dirs.max(1) {
        let mut u = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = u.norm();
        if norm > 0.0 {
            u /= norm;
        }
        let ps: Vec<f64> = stats.iter().map(|s| s.dot(&u)).collect();
        let pg: Vec<f64> = gauss.iter().map(|g| g.dot(&u)).collect();
        total += w1_line(&ps, &ws, &pg, &wg, None);
    }
    Ok(total / n_dirs.max(1) as f64)
}

/// Empirical quantile (lower order statistic at `⌈level·n⌉`).
pub fn quantile(sorted: &[f64], level: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let k = ((level * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapRegion {
    pub levels: Vec<f64>,
    pub quantiles: Vec<f64>,
    /// Successful replications, sorted.
    pub statistics: Vec<f64>,
    pub failures: usize,
    pub seed: u64,
}

impl BootstrapRegion {
    pub fn quantile_at(&self, level: f64) -> f64 {
        quantile(&self.statistics, level)
    }
}

/// Resamples the inputs with replacement `replications` times, re-solves the
/// barycenter from `fit` and collects `‖D̆(θ_boot − θ̂)‖`.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_region(
    thetas: &[FourierVec],
    fit: &BarycenterResult,
    fisher: &FisherEstimate,
    p_split: usize,
    replications: usize,
    eps: f64,
    grid: &ConstraintGrid,
    opts: &BarycenterOptions,
    seed: u64,
) -> Result<BootstrapRegion> {
    if replications < 100 {
        return Err(invalid(format!("bootstrap needs at least 100 replications, got {replications}")));
    }
    if thetas.len() != fit.duals.len() {
        return Err(Error::ShapeMismatch {
            expected: fit.duals.len(),
            got: thetas.len(),
        });
    }
    let breve = schur_breve(fisher, p_split)?;
    let n = thetas.len();
    let hat_u = fit.theta_hat.free().rows(0, p_split).into_owned();
    let inner = BarycenterOptions { parallel: false, ..*opts };
    let outcomes: Vec<Option<f64>> = (0..replications)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let sample: Vec<FourierVec> = picks.iter().map(|&i| thetas[i].clone()).collect();
            match solve_barycenter_from(&sample, eps, grid, &inner, &fit.start_for(&picks)) {
                Ok(res) if res.converged => {
                    let d = res.theta_hat.free().rows(0, p_split).into_owned() - &hat_u;
                    Some(breve_norm(&d, &breve))
                }
                Ok(res) => {
                    log::debug!("bootstrap replication {b} stopped at gradient norm {:e}", res.grad_norm);
                    None
                }
                Err(e) => {
                    log::debug!("bootstrap replication {b} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_none()).count();
    let mut statistics: Vec<f64> = outcomes.into_iter().flatten().collect();
    statistics.sort_by(f64::total_cmp);
    if statistics.is_empty() {
        return Err(invalid("every bootstrap replication failed"));
    }
    if failures > 0 {
        log::warn!("{failures} of {replications} bootstrap replications failed");
    }
    Ok(BootstrapRegion {
        levels: BOOTSTRAP_LEVELS.to_vec(),
        quantiles: BOOTSTRAP_LEVELS.iter().map(|&l| quantile(&statistics, l)).collect(),
        statistics,
        failures,
        seed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub ks_norm: f64,
    pub w1_proj: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub c_a: f64,
    pub bootstrap_quantiles: Vec<f64>,
    pub replications: usize,
    pub failures: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsOptions {
    pub gaussian_draws: usize,
    pub directions: usize,
    /// Threshold `z` for the anti-concentration estimate, in units of `sqrt(tr Σ)`.
    pub anti_z: f64,
    pub anti_width: f64,
    pub copies: CopyDraws,
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        DiagnosticsOptions {
            gaussian_draws: 20_000,
            directions: 32,
            anti_z: 1.0,
            anti_width: 0.1,
            copies: CopyDraws::All,
        }
    }
}

/// Compares replicated statistics `D̆(θ̂_p − θ*_p)` against `N(0, Σ)` with
/// `Σ` taken from `scores`.
pub fn diagnose(
    stats: &[DVector<f64>],
    scores: &ScoreSet,
    bootstrap: Option<&BootstrapRegion>,
    opts: &DiagnosticsOptions,
    seed: u64,
) -> Result<DiagnosticsReport> {
    if stats.is_empty() {
        return Err(invalid("no replicated statistics"));
    }
    let norms: Vec<f64> = stats.iter().map(|s| s.norm()).collect();
    let reference = gaussian_reference(&scores.sigma, opts.gaussian_draws, seed);
    let ks_norm = ks_distance(&norms, &reference)?;
    let w1 = w1_proj(stats, &scores.sigma, opts.directions, opts.gaussian_draws, seed ^ 0x5eed)?;
    let mu = if scores.len() >= 2 {
        mu_moments(scores, opts.copies, seed)?
    } else {
        MuMoments { mu2: 0.0, mu3: 0.0, sigma_rank: scores.sigma_rank }
    };
    let z = opts.anti_z * scores.sigma.trace().max(0.0).sqrt();
    let c_a = if z > 0.0 {
        anticoncentration(&scores.sigma, z, opts.anti_width * z, opts.gaussian_draws, seed ^ 0xa17)?
    } else {
        0.0
    };
    let mut seeds = vec![seed];
    if let Some(b) = bootstrap {
        seeds.push(b.seed);
    }
    Ok(DiagnosticsReport {
        ks_norm,
        w1_proj: w1,
        mu2: mu.mu2,
        mu3: mu.mu3,
        c_a,
        bootstrap_quantiles: bootstrap.map(|b| b.quantiles.clone()).unwrap_or_default(),
        replications: stats.len(),
        failures: bootstrap.map_or(0, |b| b.failures),
        seeds,
    })
}
