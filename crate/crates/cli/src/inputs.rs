//! Reading densities, manifests and discrete measures from disk.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use wfbary_core::density::{load_csv_density, DensityModel};
use wfbary_core::error::Error;
use wfbary_core::oracles::DiscreteMeasure;
use wfbary_core::{BasisSpec, FourierVec, Result};

/// Relative mass error tolerated before a warning is logged.
const MASS_WARN: f64 = 1e-6;

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

/// `.json` files hold a density model, anything else grid samples
/// `x_1, …, x_d, value`.
pub fn load_density(path: &Path, spec: &Arc<BasisSpec>) -> Result<FourierVec> {
    let theta = if is_json(path) {
        let text = read(path)?;
        let mut model: DensityModel = serde_json::from_str(&text)
            .map_err(|e| Error::from(e).context(format!("parsing density {}", path.display())))?;
        model.resolve_paths(parent(path));
        model.coefficients(spec, 0)?
    } else {
        DensityModel::Csv { path: path.to_path_buf() }.coefficients(spec, 0)?
    };
    normalize(theta, &path.display().to_string())
}

/// Rescales to unit mass.
pub fn normalize(theta: FourierVec, label: &str) -> Result<FourierVec> {
    let mass = theta.mass();
    if !(mass.is_finite() && mass > 0.0) {
        return Err(invalid(format!("{label}: total mass {mass} is not positive")));
    }
    if (mass - 1.0).abs() > MASS_WARN {
        log::warn!("{label}: mass {mass} rescaled to 1");
    }
    FourierVec::new(theta.spec().clone(), theta.coeffs() / mass)
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ManifestEntry {
    Path(PathBuf),
    Model(DensityModel),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    densities: Vec<ManifestEntry>,
}

/// `{"densities": [...]}` where each entry is a file path (relative to the
/// manifest) or an inline density model.
pub fn load_manifest(path: &Path, spec: &Arc<BasisSpec>) -> Result<Vec<FourierVec>> {
    let text = read(path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::from(e).context(format!("parsing manifest {}", path.display())))?;
    if manifest.densities.is_empty() {
        return Err(invalid(format!("{}: manifest lists no densities", path.display())));
    }
    let base = parent(path);
    manifest
        .densities
        .into_iter()
        .enumerate()
        .map(|(i, entry)| match entry {
            ManifestEntry::Path(p) => load_density(&base.join(p), spec),
            ManifestEntry::Model(mut m) => {
                m.resolve_paths(base);
                normalize(m.coefficients(spec, 0)?, &format!("manifest entry {i}"))
            }
        })
        .collect()
}

/// Weighted atoms `x_1, …, x_d, weight`, normalized to unit mass.
pub fn load_atoms(path: &Path, dim: usize) -> Result<DiscreteMeasure> {
    let samples = load_csv_density(path, dim)?;
    DiscreteMeasure::normalized(samples.points, samples.values)
        .map_err(|e| e.context(format!("reading atoms {}", path.display())))
}

pub fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn parent(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}
