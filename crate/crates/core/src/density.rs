//! Analytic density families and sampled-grid input.
//!
//! Coefficients are exact where the family allows it (uniform boxes and
//! wrapped Gaussians factor over axes; trigonometric perturbations are
//! band-limited so the trapezoid rule is exact). Everything else goes
//! through quadrature.

use std::f64::consts::{PI, SQRT_2};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::basis::{project_density, project_samples, BasisSpec, FourierVec, SampledDensity};
use crate::error::{invalid, Error, Result};

/// Per-axis parameter: a scalar broadcasts to every axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValues {
    Scalar(f64),
    PerAxis(Vec<f64>),
}

impl AxisValues {
    fn expand(&self, dim: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            AxisValues::Scalar(v) => Ok(vec![*v; dim]),
            AxisValues::PerAxis(v) if v.len() == dim => Ok(v.clone()),
            AxisValues::PerAxis(v) => Err(invalid(format!("{what} has {} entries, domain has {dim} axes", v.len()))),
        }
    }
}

impl From<f64> for AxisValues {
    fn from(v: f64) -> Self {
        AxisValues::Scalar(v)
    }
}

/// One term `a·cos(2π k·x/T) + b·sin(2π k·x/T)` of a perturbed uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub freq: Vec<i64>,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub density: DensityModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DensityModel {
    /// Uniform on the box `[lo, hi]` (wrapping around the period).
    Uniform { lo: AxisValues, hi: AxisValues },
    /// `T^{-d} (1 + Σ terms)`.
    TrigPerturbed { terms: Vec<TrigTerm> },
    /// Product of per-axis wrapped normals.
    WrappedGaussian { mean: AxisValues, std: AxisValues },
    Mixture { components: Vec<MixtureComponent> },
    /// Grid samples, columns `x_1, …, x_d, value`.
    Csv { path: PathBuf },
}

impl DensityModel {
    pub fn uniform_1d(lo: f64, hi: f64) -> Self {
        DensityModel::Uniform {
            lo: lo.into(),
            hi: hi.into(),
        }
    }

    pub fn wrapped_gaussian_1d(mean: f64, std: f64) -> Self {
        DensityModel::WrappedGaussian {
            mean: mean.into(),
            std: std.into(),
        }
    }

    /// Resolves relative CSV paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        match self {
            DensityModel::Csv { path } if path.is_relative() => *path = base.join(&*path),
            DensityModel::Mixture { components } => {
                for c in components {
                    c.density.resolve_paths(base);
                }
            }
            _ => {}
        }
    }

    pub fn validate(&self, spec: &BasisSpec) -> Result<()> {
        let d = spec.dim();
        let t = spec.period();
        match self {
            DensityModel::Uniform { lo, hi } => {
                let (lo, hi) = (lo.expand(d, "lo")?, hi.expand(d, "hi")?);
                for (l, h) in lo.iter().zip(&hi) {
                    if !(l.is_finite() && h.is_finite() && h > l && h - l <= t) {
                        return Err(invalid(format!("uniform box [{l}, {h}] must have 0 < width <= period {t}")));
                    }
                }
            }
            DensityModel::TrigPerturbed { terms } => {
                for term in terms {
                    if term.freq.len() != d {
                        return Err(invalid(format!("trig term frequency {:?} needs {d} entries", term.freq)));
                    }
                    if !(term.cos.is_finite() && term.sin.is_finite()) {
                        return Err(invalid("trig term amplitudes must be finite"));
                    }
                }
            }
            DensityModel::WrappedGaussian { mean, std } => {
                let (mean, std) = (mean.expand(d, "mean")?, std.expand(d, "std")?);
                if mean.iter().any(|m| !m.is_finite()) || std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(invalid("wrapped gaussian needs finite means and positive std"));
                }
            }
            DensityModel::Mixture { components } => {
                if components.is_empty() {
                    return Err(invalid("mixture has no components"));
                }
                for c in components {
                    if !(c.weight.is_finite() && c.weight >= 0.0) {
                        return Err(invalid(format!("mixture weight {} must be nonnegative", c.weight)));
                    }
                    c.density.validate(spec)?;
                }
            }
            DensityModel::Csv { .. } => {}
        }
        Ok(())
    }

    /// Fourier coefficients on `spec`. `quad_n` is only used by families
    /// without a closed form.
    pub fn coefficients(&self, spec: &Arc<BasisSpec>, quad_n: usize) -> Result<FourierVec> {
        self.validate(spec)?;
        let d = spec.dim();
        let t = spec.period();
        match self {
            DensityModel::Uniform { lo, hi } => {
                let (lo, hi) = (lo.expand(d, "lo")?, hi.expand(d, "hi")?);
                Ok(product_coefficients(spec, |axis, k, is_sin| {
                    let (l, h) = (lo[axis], hi[axis]);
                    let w = (2.0 * PI * k as f64) / t;
                    if is_sin {
                        SQRT_2 * ((w * l).cos() - (w * h).cos()) / (w * (h - l))
                    } else {
                        SQRT_2 * ((w * h).sin() - (w * l).sin()) / (w * (h - l))
                    }
                }))
            }
            DensityModel::WrappedGaussian { mean, std } => {
                let (mean, std) = (mean.expand(d, "mean")?, std.expand(d, "std")?);
                Ok(product_coefficients(spec, |axis, k, is_sin| {
                    let w = (2.0 * PI * k as f64) / t;
                    let damp = SQRT_2 * (-0.5 * (w * std[axis]).powi(2)).exp();
                    if is_sin {
                        damp * (w * mean[axis]).sin()
                    } else {
                        damp * (w * mean[axis]).cos()
                    }
                }))
            }
            DensityModel::TrigPerturbed { terms } => {
                let top = terms
                    .iter()
                    .flat_map(|tm| tm.freq.iter().map(|f| f.unsigned_abs() as usize))
                    .max()
                    .unwrap_or(0);
                // Trapezoid is exact for trig polynomials of degree < n.
                let n = (spec.max_freq() + top + 1).max(2 * spec.max_freq() + 1);
                project_density(|x| self.value_unchecked(x, t, d), spec, n)
            }
            DensityModel::Mixture { components } => {
                let mut acc = DVector::zeros(spec.p());
                for c in components {
                    acc += c.density.coefficients(spec, quad_n)?.coeffs() * c.weight;
                }
                FourierVec::new(spec.clone(), acc)
            }
            DensityModel::Csv { path } => {
                let samples = load_csv_density(path, d)?;
                project_samples(&samples, spec)
            }
        }
    }

    /// Density value at `x` on the periodic domain.
    pub fn value(&self, x: &[f64], spec: &BasisSpec) -> Result<f64> {
        if x.len() != spec.dim() {
            return Err(Error::ShapeMismatch {
                expected: spec.dim(),
                got: x.len(),
            });
        }
        if let DensityModel::Csv { .. } = self {
            return Err(invalid("sampled densities have no pointwise evaluation"));
        }
        self.validate(spec)?;
        Ok(self.value_unchecked(x, spec.period(), spec.dim()))
    }

    fn value_unchecked(&self, x: &[f64], t: f64, d: usize) -> f64 {
        match self {
            DensityModel::Uniform { lo, hi } => {
                let (lo, hi) = (lo.expand(d, "").unwrap(), hi.expand(d, "").unwrap());
                let mut v = 1.0;
                for a in 0..d {
                    let w = hi[a] - lo[a];
                    let off = (x[a] - lo[a]).rem_euclid(t);
                    if off >= w {
                        return 0.0;
                    }
                    v /= w;
                }
                v
            }
            DensityModel::TrigPerturbed { terms } => {
                let mut v = 1.0;
                for term in terms {
                    let phase: f64 = term.freq.iter().zip(x).map(|(k, xi)| 2.0 * PI * *k as f64 * xi / t).sum();
                    v += term.cos * phase.cos() + term.sin * phase.sin();
                }
                v / t.powi(d as i32)
            }
            DensityModel::WrappedGaussian { mean, std } => {
                let (mean, std) = (mean.expand(d, "").unwrap(), std.expand(d, "").unwrap());
                (0..d).map(|a| wrapped_normal(x[a], mean[a], std[a], t)).product()
            }
            DensityModel::Mixture { components } => components
                .iter()
                .map(|c| c.weight * c.density.value_unchecked(x, t, d))
                .sum(),
            DensityModel::Csv { .. } => f64::NAN,
        }
    }
}

fn wrapped_normal(x: f64, mean: f64, std: f64, t: f64) -> f64 {
    let centered = (x - mean).rem_euclid(t);
    let reach = (10.0 * std / t).ceil() as i64 + 1;
    let norm = 1.0 / (std * (2.0 * PI).sqrt());
    (-reach..=reach)
        .map(|j| {
            let z = (centered + j as f64 * t) / std;
            norm * (-0.5 * z * z).exp()
        })
        .sum()
}

/// Coefficients of a product density from per-axis integrals against
/// `√2 cos`/`√2 sin` (`axis_coef(axis, k, is_sin)`, `k ≥ 1`); the constant
/// factor integrates to 1 on every axis.
fn product_coefficients(spec: &Arc<BasisSpec>, axis_coef: impl Fn(usize, usize, bool) -> f64) -> FourierVec {
    let coeffs = DVector::from_fn(spec.p(), |k, _| {
        spec.mode(k)
            .iter()
            .enumerate()
            .map(|(axis, &idx)| {
                if idx == 0 {
                    1.0
                } else {
                    let freq = idx.div_ceil(2);
                    axis_coef(axis, freq, idx % 2 == 0)
                }
            })
            .product()
    });
    FourierVec::new(spec.clone(), coeffs).expect("closed-form coefficients are finite")
}

/// Reads `x_1, …, x_d, value` rows (header optional) from a CSV file.
pub fn load_csv_density(path: &Path, dim: usize) -> Result<SampledDensity> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::from(e).context(format!("reading density samples {}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let mut points = Vec::new();
    let mut values = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        let Ok(row) = parsed else {
            if line == 0 {
                continue; // header
            }
            return Err(invalid(format!("{}: row {} is not numeric", path.display(), line + 1)));
        };
        if row.len() != dim + 1 {
            return Err(invalid(format!(
                "{}: row {} has {} columns, expected {}",
                path.display(),
                line + 1,
                row.len(),
                dim + 1
            )));
        }
        values.push(row[dim]);
        points.push(row[..dim].to_vec());
    }
    if values.is_empty() {
        return Err(invalid(format!("{}: no samples", path.display())));
    }
    Ok(SampledDensity { points, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::reconstruct_density;
    use approx::assert_relative_eq;

    fn spec1(k: usize) -> Arc<BasisSpec> {
        Arc::new(BasisSpec::new(1, 1.0, k).unwrap())
    }

    #[test]
    fn closed_forms_match_quadrature() {
        let spec = spec1(6);
        for model in [
            DensityModel::uniform_1d(0.1, 0.45),
            DensityModel::uniform_1d(0.8, 1.3),
            DensityModel::wrapped_gaussian_1d(0.3, 0.07),
        ] {
            let exact = model.coefficients(&spec, 0).unwrap();
            let quad = project_density(|x| model.value(x, &spec).unwrap(), &spec, 20000).unwrap();
            assert!((exact.coeffs() - quad.coeffs()).amax() < 2e-4, "{model:?}");
            assert_relative_eq!(exact.mass(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn trig_term_amplitude() {
        let spec = spec1(3);
        let model = DensityModel::TrigPerturbed {
            terms: vec![TrigTerm {
                freq: vec![2],
                cos: 0.4,
                sin: -0.2,
            }],
        };
        let c = model.coefficients(&spec, 0).unwrap();
        // modes: const, cos1, sin1, cos2, sin2, ...
        assert_relative_eq!(c.coeffs()[3], 0.4 / SQRT_2, epsilon = 1e-14);
        assert_relative_eq!(c.coeffs()[4], -0.2 / SQRT_2, epsilon = 1e-14);
        assert!(c.coeffs()[1].abs() < 1e-14);
        let x = [0.37];
        assert_relative_eq!(
            reconstruct_density(&c, &x).unwrap(),
            model.value(&x, &spec).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn two_dimensional_product() {
        let spec = Arc::new(BasisSpec::new(2, 1.0, 2).unwrap());
        let model = DensityModel::WrappedGaussian {
            mean: AxisValues::PerAxis(vec![0.2, 0.7]),
            std: 0.1.into(),
        };
        let exact = model.coefficients(&spec, 0).unwrap();
        let quad = project_density(|x| model.value(x, &spec).unwrap(), &spec, 64).unwrap();
        assert!((exact.coeffs() - quad.coeffs()).amax() < 1e-10);
    }

    #[test]
    fn mixture_is_linear() {
        let spec = spec1(4);
        let a = DensityModel::uniform_1d(0.0, 0.5);
        let b = DensityModel::wrapped_gaussian_1d(0.5, 0.1);
        let mix = DensityModel::Mixture {
            components: vec![
                MixtureComponent {
                    weight: 0.25,
                    density: a.clone(),
                },
                MixtureComponent {
                    weight: 0.75,
                    density: b.clone(),
                },
            ],
        };
        let expect = a.coefficients(&spec, 0).unwrap().coeffs() * 0.25 + b.coefficients(&spec, 0).unwrap().coeffs() * 0.75;
        assert!((mix.coefficients(&spec, 0).unwrap().coeffs() - expect).amax() < 1e-14);
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"family":"mixture","components":[
            {"weight":0.5,"density":{"family":"uniform","lo":0.1,"hi":0.4}},
            {"weight":0.5,"density":{"family":"wrapped_gaussian","mean":[0.6],"std":0.05}}]}"#;
        let model: DensityModel = serde_json::from_str(text).unwrap();
        let back: DensityModel = serde_json::from_str(&serde_json::to_string(&model).unwrap()).unwrap();
        assert_eq!(model, back);
        assert!(model.coefficients(&spec1(3), 0).is_ok());
    }

    #[test]
    fn bad_parameters_rejected() {
        let spec = spec1(2);
        assert!(DensityModel::uniform_1d(0.5, 0.2).coefficients(&spec, 0).is_err());
        assert!(DensityModel::wrapped_gaussian_1d(0.5, 0.0).coefficients(&spec, 0).is_err());
        let wrong_dim = DensityModel::Uniform {
            lo: AxisValues::PerAxis(vec![0.0, 0.0]),
            hi: 0.5.into(),
        };
        assert!(wrong_dim.coefficients(&spec, 0).is_err());
    }

    #[test]
    fn csv_samples_project() {
        let spec = spec1(3);
        let model = DensityModel::wrapped_gaussian_1d(0.4, 0.1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let mut text = String::from("x,value\n");
        let n = 64;
        for i in 0..n {
            let x = i as f64 / n as f64;
            text.push_str(&format!("{x},{}\n", model.value(&[x], &spec).unwrap()));
        }
        std::fs::write(&path, text).unwrap();
        let from_csv = DensityModel::Csv { path }.coefficients(&spec, 0).unwrap();
        let exact = model.coefficients(&spec, 0).unwrap();
        assert!((from_csv.coeffs() - exact.coeffs()).amax() < 1e-10);
    }
}
