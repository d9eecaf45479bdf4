use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;
use wfbary_core::barycenter::{require_converged, solve_barycenter, BarycenterOptions, BarycenterResult};
use wfbary_core::basis::{constraint_grid, reconstruct_density};
use wfbary_core::bounds::{compute_bounds, BoundInputs};
use wfbary_core::dual::{distance, DualMode, DualOptions};
use wfbary_core::error::Error;
use wfbary_core::fisher::{estimate_fisher, schur_breve, FisherEstimate};
use wfbary_core::gaussdiag::{bootstrap_region, diagnose, BootstrapRegion, DiagnosticsOptions, ScoreSet};
use wfbary_core::harness::{run_experiment, ExperimentConfig};
use wfbary_core::oracles::{
    circles_w2, discrete_ot_w1, gaussian_w2, network_simplex, quantile_w1_1d, GroundCost,
};
use wfbary_core::{BasisSpec, ConstraintGrid, FourierVec, Result};

use crate::inputs::{load_atoms, load_density, load_manifest, read};

/// Regularized W1 distances, Fourier-basis barycenters and Gaussian
/// approximation diagnostics.
#[derive(Debug, Parser)]
#[command(name = "wfbary", version)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// More log output on standard error (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    /// Write the machine-readable result here instead of standard output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Regularized W1 distance between two densities.
    Distance(DistanceArgs),
    /// Barycenter of the densities listed in a manifest.
    Barycenter(BarycenterArgs),
    /// Fisher matrix of a manifest's densities at a reference point.
    Fisher(FisherArgs),
    /// Closed-form bound quantities.
    Bounds(BoundsArgs),
    /// Compare replicated statistics with their Gaussian approximation.
    Diagnose(DiagnoseArgs),
    /// Bootstrap confidence region for a manifest's barycenter.
    Bootstrap(BootstrapArgs),
    /// Exact reference solvers.
    #[command(subcommand)]
    Oracle(OracleCommand),
    /// Monte-Carlo experiment from a JSON config.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Intersection,
    Relaxed,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Dimension of the torus.
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    /// Period of each axis.
    #[arg(long, default_value_t = 1.0)]
    pub period: f64,
    /// Highest frequency per axis.
    #[arg(long, default_value_t = 4)]
    pub max_freq: usize,
    /// Regularization strength.
    #[arg(long, default_value_t = 1e-2)]
    pub epsilon: f64,
    /// Constraint grid points per axis.
    #[arg(long, default_value_t = 128)]
    pub grid_m: usize,
    /// Stop when the dual objective improves by less than this.
    #[arg(long, default_value_t = 1e-8)]
    pub tol_obj: f64,
    /// Allowed constraint violation.
    #[arg(long, default_value_t = 1e-7)]
    pub tol_feas: f64,
    /// Iteration cap of the dual solver.
    #[arg(long, default_value_t = 5000)]
    pub max_iter: usize,
    /// Feasible set: grid intersection or the single containing ellipsoid.
    #[arg(long, value_enum, default_value_t = ModeArg::Intersection)]
    pub mode: ModeArg,
}

impl SolverArgs {
    fn setup(&self) -> Result<(Arc<BasisSpec>, ConstraintGrid, DualOptions)> {
        let spec = Arc::new(BasisSpec::new(self.dim, self.period, self.max_freq)?);
        let grid = constraint_grid(&spec, self.grid_m)?;
        let opts = DualOptions {
            tol_obj: self.tol_obj,
            tol_feas: self.tol_feas,
            max_iter: self.max_iter,
            mode: match self.mode {
                ModeArg::Intersection => DualMode::Intersection,
                ModeArg::Relaxed => DualMode::Relaxed,
            },
            ..DualOptions::default()
        };
        Ok((spec, grid, opts))
    }
}

#[derive(Debug, Args)]
pub struct BarycenterSolverArgs {
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Gradient-norm target (default 1e-6 times the number of densities).
    #[arg(long)]
    pub tol_grad: Option<f64>,
    /// Iteration cap of the barycenter descent.
    #[arg(long, default_value_t = 2000)]
    pub max_outer: usize,
}

impl BarycenterSolverArgs {
    fn options(&self, dual: DualOptions) -> BarycenterOptions {
        BarycenterOptions {
            tol_grad: self.tol_grad,
            max_outer: self.max_outer,
            dual,
            parallel: true,
        }
    }
}

#[derive(Debug, Args)]
pub struct DistanceArgs {
    /// First density (.json model or CSV samples).
    #[arg(long)]
    pub a: PathBuf,
    /// Second density.
    #[arg(long)]
    pub b: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct BarycenterArgs {
    /// JSON manifest `{"densities": [...]}`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// CSV of the barycenter coefficients (index, coefficient).
    #[arg(long)]
    pub theta_out: Option<PathBuf>,
    /// CSV of the reconstructed density on a uniform grid.
    #[arg(long)]
    pub density_out: Option<PathBuf>,
    /// Grid points per axis for --density-out.
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[command(flatten)]
    pub solver: BarycenterSolverArgs,
}

#[derive(Debug, Args)]
pub struct FisherArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Reference density (default: the barycenter of the manifest).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Leading free coordinates kept in the projected block (default: all).
    #[arg(long)]
    pub p_split: Option<usize>,
    #[command(flatten)]
    pub solver: BarycenterSolverArgs,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    /// JSON file with the bound inputs; the flags below are ignored when set.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long, default_value_t = 1e-2)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 2.0)]
    pub t: f64,
    #[arg(long, default_value_t = 0.0)]
    pub c_q: f64,
    /// Smallest eigenvalue of D (K∘G) D.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Eigenvalues of D, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub d_eigenvalues: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub r: f64,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// JSON `{"stats": [[...]], "scores": [[...]], "sigma": [[...]]}`; sigma is optional.
    #[arg(long)]
    pub input: PathBuf,
    /// Bootstrap region written by the bootstrap subcommand.
    #[arg(long)]
    pub bootstrap: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20_000)]
    pub gaussian_draws: usize,
    #[arg(long, default_value_t = 32)]
    pub directions: usize,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub replications: usize,
    #[arg(long)]
    pub p_split: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub solver: BarycenterSolverArgs,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for records.csv, rates.json and plot data (overrides the config).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CostArg {
    W1,
    W2,
}

#[derive(Debug, Subcommand)]
pub enum OracleCommand {
    /// Discrete optimal transport between weighted point sets (CSV x_1..x_d, weight).
    Ot {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        /// Use the torus metric with this period.
        #[arg(long)]
        periodic: Option<f64>,
        #[arg(long, value_enum, default_value_t = CostArg::W1)]
        cost: CostArg,
    },
    /// W2 between uniform measures on two circles.
    Circles {
        /// Centre of the first circle, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        m1: Vec<f64>,
        #[arg(long)]
        r1: f64,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        m2: Vec<f64>,
        #[arg(long)]
        r2: f64,
    },
    /// W2 between centred Gaussians (covariances row-major, comma separated).
    Gauss {
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        s1: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        s2: Vec<f64>,
    },
    /// W1 on the line through quantile functions of two weighted point sets.
    Quantile {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        quad_points: usize,
    },
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

fn to_json(value: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

pub fn run(command: Command) -> Result<String> {
    match command {
        Command::Distance(a) => run_distance(a),
        Command::Barycenter(a) => run_barycenter(a),
        Command::Fisher(a) => run_fisher(a),
        Command::Bounds(a) => run_bounds(a),
        Command::Diagnose(a) => run_diagnose(a),
        Command::Bootstrap(a) => run_bootstrap(a),
        Command::Oracle(o) => run_oracle(o),
        Command::Experiment(a) => run_experiment_cmd(a),
    }
}

fn run_distance(args: DistanceArgs) -> Result<String> {
    let (spec, grid, opts) = args.solver.setup()?;
    let a = load_density(&args.a, &spec)?;
    let b = load_density(&args.b, &spec)?;
    let value = distance(&a, &b, args.solver.epsilon, &grid, &opts)?;
    Ok(value.to_string())
}

fn fit(
    thetas: &[FourierVec],
    args: &BarycenterSolverArgs,
    grid: &ConstraintGrid,
    dual: DualOptions,
) -> Result<BarycenterResult> {
    let res = solve_barycenter(thetas, args.solver.epsilon, grid, &args.options(dual))?;
    log::info!(
        "barycenter: objective {} gradient norm {:e} after {} iterations",
        res.objective,
        res.grad_norm,
        res.iterations
    );
    require_converged(res)
}

fn run_barycenter(args: BarycenterArgs) -> Result<String> {
    let (spec, grid, dual) = args.solver.solver.setup()?;
    let thetas = load_manifest(&args.manifest, &spec)?;
    let res = fit(&thetas, &args.solver, &grid, dual)?;
    if let Some(path) = &args.theta_out {
        let mut s = String::from("index,coefficient\n");
        for (i, c) in res.theta_hat.coeffs().iter().enumerate() {
            writeln!(s, "{i},{c}").unwrap();
        }
        write_file(path, &s)?;
    }
    if let Some(path) = &args.density_out {
        if args.samples == 0 {
            return Err(invalid("--samples must be positive"));
        }
        let mut s = String::new();
        for a in 0..spec.dim() {
            write!(s, "x{a},").unwrap();
        }
        s.push_str("density\n");
        for x in spec.tensor_grid(args.samples) {
            for xa in &x {
                write!(s, "{xa},").unwrap();
            }
            writeln!(s, "{}", reconstruct_density(&res.theta_hat, &x)?).unwrap();
        }
        write_file(path, &s)?;
    }
    to_json(&json!({
        "objective": res.objective,
        "grad_norm": res.grad_norm,
        "iterations": res.iterations,
        "converged": res.converged,
        "per_measure_values": res.per_measure_values,
        "theta_hat": res.theta_hat.coeffs().as_slice(),
    }))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
}

fn resolve_split(p_split: Option<usize>, spec: &BasisSpec) -> usize {
    p_split.unwrap_or(spec.free_dim())
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn fisher_json(f: &FisherEstimate) -> Result<serde_json::Value> {
    let breve = schur_breve(f, f.p_split)?;
    Ok(json!({
        "p_split": f.p_split,
        "d2": matrix_rows(&f.d2),
        "eigenvalues": f.eigenvalues.as_slice(),
        "d_eigenvalues": f.d_eigenvalues().as_slice(),
        "lambda_min_dkgd": f.lambda_min_dkgd,
        "condition": f.condition,
        "clipped": f.clipped,
        "breve": matrix_rows(&breve),
    }))
}

fn run_fisher(args: FisherArgs) -> Result<String> {
    let (spec, grid, dual) = args.solver.solver.setup()?;
    let thetas = load_manifest(&args.manifest, &spec)?;
    let reference = match &args.reference {
        Some(p) => load_density(p, &spec)?,
        None => fit(&thetas, &args.solver, &grid, dual)?.theta_hat,
    };
    let split = resolve_split(args.p_split, &spec);
    let f = estimate_fisher(&reference, &thetas, args.solver.solver.epsilon, &grid, &dual, split)?;
    let mut out = fisher_json(&f)?;
    out["reference"] = json!(reference.coeffs().as_slice());
    to_json(&out)
}

fn run_bounds(args: BoundsArgs) -> Result<String> {
    let inputs = match &args.input {
        Some(path) => serde_json::from_str::<BoundInputs>(&read(path)?)
            .map_err(|e| Error::from(e).context(format!("parsing {}", path.display())))?,
        None => {
            let missing = |name: &str| invalid(format!("--{name} is required without --input"));
            BoundInputs {
                n: args.n.ok_or_else(|| missing("n"))?,
                p: args.p.ok_or_else(|| missing("p"))?,
                eps: args.epsilon,
                t: args.t,
                c_q: args.c_q,
                lambda_min_dkgd: args.lambda.ok_or_else(|| missing("lambda"))?,
                d_eigenvalues: args.d_eigenvalues.clone(),
                r: args.r,
            }
        }
    };
    to_json(&compute_bounds(&inputs)?)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiagnoseInput {
    stats: Vec<Vec<f64>>,
    scores: Vec<Vec<f64>>,
    #[serde(default)]
    sigma: Option<Vec<Vec<f64>>>,
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<nalgebra::DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(invalid("matrix rows have different lengths"));
    }
    Ok(nalgebra::DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn run_diagnose(args: DiagnoseArgs) -> Result<String> {
    let input: DiagnoseInput = serde_json::from_str(&read(&args.input)?)
        .map_err(|e| Error::from(e).context(format!("parsing {}", args.input.display())))?;
    let to_vecs = |v: Vec<Vec<f64>>| v.into_iter().map(nalgebra::DVector::from_vec).collect::<Vec<_>>();
    let stats = to_vecs(input.stats);
    let xs = to_vecs(input.scores);
    let scores = match input.sigma {
        Some(rows) => ScoreSet::with_sigma(xs, matrix_from_rows(&rows)?)?,
        None => ScoreSet::from_vectors(xs)?,
    };
    if let Some(s) = stats.iter().find(|s| s.len() != scores.sigma.nrows()) {
        return Err(Error::ShapeMismatch {
            expected: scores.sigma.nrows(),
            got: s.len(),
        });
    }
    let bootstrap: Option<BootstrapRegion> = match &args.bootstrap {
        Some(p) => Some(
            serde_json::from_str(&read(p)?).map_err(|e| Error::from(e).context(format!("parsing {}", p.display())))?,
        ),
        None => None,
    };
    let opts = DiagnosticsOptions {
        gaussian_draws: args.gaussian_draws,
        directions: args.directions,
        ..DiagnosticsOptions::default()
    };
    to_json(&diagnose(&stats, &scores, bootstrap.as_ref(), &opts, args.seed)?)
}

fn run_bootstrap(args: BootstrapArgs) -> Result<String> {
    let (spec, grid, dual) = args.solver.solver.setup()?;
    let eps = args.solver.solver.epsilon;
    let thetas = load_manifest(&args.manifest, &spec)?;
    let res = fit(&thetas, &args.solver, &grid, dual)?;
    let split = resolve_split(args.p_split, &spec);
    let f = estimate_fisher(&res.theta_hat, &thetas, eps, &grid, &dual, split)?;
    let opts = args.solver.options(dual);
    let region = bootstrap_region(&thetas, &res, &f, split, args.replications, eps, &grid, &opts, args.seed)?;
    to_json(&region)
}

fn run_oracle(cmd: OracleCommand) -> Result<String> {
    match cmd {
        OracleCommand::Ot { a, b, dim, periodic, cost } => {
            let ma = load_atoms(&a, dim)?;
            let mb = load_atoms(&b, dim)?;
            let value = match cost {
                CostArg::W1 => discrete_ot_w1(&ma, &mb, periodic)?,
                CostArg::W2 => {
                    let c = GroundCost { power: 2.0, period: periodic };
                    network_simplex(&ma, &mb, c)?.cost.sqrt()
                }
            };
            Ok(value.to_string())
        }
        OracleCommand::Circles { m1, r1, m2, r2 } => Ok(circles_w2(&m1, r1, &m2, r2)?.to_string()),
        OracleCommand::Gauss { s1, s2 } => {
            let a = square(&s1, "--s1")?;
            let b = square(&s2, "--s2")?;
            Ok(gaussian_w2(&a, &b)?.to_string())
        }
        OracleCommand::Quantile { a, b, quad_points } => {
            let qa = empirical_quantile(&a)?;
            let qb = empirical_quantile(&b)?;
            Ok(quantile_w1_1d(&qa, &qb, quad_points).to_string())
        }
    }
}

fn square(values: &[f64], flag: &str) -> Result<nalgebra::DMatrix<f64>> {
    let n = (values.len() as f64).sqrt().round() as usize;
    if n == 0 || n * n != values.len() {
        return Err(invalid(format!("{flag} needs a square number of entries, got {}", values.len())));
    }
    Ok(nalgebra::DMatrix::from_row_slice(n, n, values))
}

/// Left-continuous inverse CDF of a weighted point set on the line.
fn empirical_quantile(path: &Path) -> Result<impl Fn(f64) -> f64> {
    let m = load_atoms(path, 1)?;
    let mut atoms: Vec<(f64, f64)> = m.support.iter().map(|x| x[0]).zip(m.weights.iter().copied()).collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cdf = Vec::with_capacity(atoms.len());
    let mut acc = 0.0;
    for (_, w) in &atoms {
        acc += w;
        cdf.push(acc);
    }
    Ok(move |s: f64| {
        let k = cdf.partition_point(|&c| c < s).min(atoms.len() - 1);
        atoms[k].0
    })
}

fn run_experiment_cmd(args: ExperimentArgs) -> Result<String> {
    let mut cfg = ExperimentConfig::load(&args.config)
        .map_err(|e| e.context(format!("loading experiment config {}", args.config.display())))?;
    if let Some(dir) = args.out_dir {
        cfg.output_dir = Some(dir);
    }
    let report = run_experiment(&cfg)?;
    if !report.valid {
        log::warn!("experiment marked invalid: {} replication failures", report.failures);
    }
    to_json(&report)
}
