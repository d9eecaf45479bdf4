//! Closed-form bound quantities for the barycenter model: entropy integrals,
//! the `δ(r)`, `v`, `R`, `E`, `𝔷(t)` constants and the resulting `◇(r,t)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Constant bounding `∫₀¹ √log(3/x) dx`.
pub const SQRT_ENTROPY_CONST: f64 = 1.42;
/// Constant bounding `∫₀¹ log(3/x) dx = 1 + ln 3`.
pub const LINEAR_ENTROPY_CONST: f64 = 2.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub n: usize,
    pub p: usize,
    pub eps: f64,
    /// Confidence exponent.
    pub t: f64,
    /// Smoothness constant of the sampling density (user supplied).
    pub c_q: f64,
    pub lambda_min_dkgd: f64,
    pub d_eigenvalues: Vec<f64>,
    /// Localization radius.
    pub r: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(invalid("n and p must be positive"));
        }
        let pos = [("eps", self.eps), ("lambda_min_dkgd", self.lambda_min_dkgd), ("r", self.r)];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (name, v) in [("t", self.t), ("c_q", self.c_q)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} must be nonnegative and finite, got {v}")));
            }
        }
        if self.d_eigenvalues.is_empty() {
            return Err(invalid("d_eigenvalues is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub p_d: f64,
    pub v: f64,
    #[serde(rename = "R")]
    pub big_r: f64,
    #[serde(rename = "E")]
    pub big_e: f64,
    pub z_t: f64,
    pub delta_r: f64,
    /// `(δ(r) + 𝔷(t))·r`.
    pub diamond: f64,
    /// Leading-order form `√n (r C_Q + r √p_D + √(2t)) / (ε λ)` with unit constant.
    pub diamond_leading: f64,
    pub r_bound: f64,
    pub mu3_bound: f64,
}

/// `p_D = sqrt(Σ log²(λ_i²) / λ_i²)` over the eigenvalues of `D`.
pub fn ellipsoid_entropy_pd(eigs_d: &[f64]) -> Result<f64> {
    let mut s = 0.0;
    for &l in eigs_d {
        if !(l.is_finite() && l > 0.0) {
            return Err(invalid(format!("eigenvalues of D must be positive, got {l}")));
        }
        let l2 = l * l;
        s += l2.ln().powi(2) / l2;
    }
    Ok(s.sqrt())
}

/// Upper bounds `(1.42 r √p, 2.1 r p)` on the Dudley-type entropy integrals
/// of a `p`-dimensional ball of radius `r`.
pub fn ball_entropy_integrals(p: usize, r: f64) -> (f64, f64) {
    let p = p as f64;
    (SQRT_ENTROPY_CONST * r * p.sqrt(), LINEAR_ENTROPY_CONST * r * p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyAudit {
    /// Numerical `∫₀¹ √log(3/x) dx`.
    pub sqrt_integral: f64,
    /// Numerical `∫₀¹ log(3/x) dx`.
    pub linear_integral: f64,
}

impl EntropyAudit {
    pub fn within_constants(&self) -> bool {
        self.sqrt_integral <= SQRT_ENTROPY_CONST && self.linear_integral <= LINEAR_ENTROPY_CONST
    }
}

/// Composite Simpson on `x = s²`, which removes the log singularity at 0.
pub fn entropy_audit(intervals: usize) -> EntropyAudit {
    let n = (intervals.max(2) + 1) & !1;
    let h = 1.0 / n as f64;
    let simpson = |f: &dyn Fn(f64) -> f64| {
        let mut acc = f(0.0) + f(1.0);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        acc * h / 3.0
    };
    let log3 = |s: f64| if s == 0.0 { 0.0 } else { (3.0 / (s * s)).ln() };
    EntropyAudit {
        sqrt_integral: simpson(&|s| 2.0 * s * log3(s).sqrt()),
        linear_integral: simpson(&|s| 2.0 * s * log3(s)),
    }
}

/// `8 √n (1 + √(2t)) / λ^{1/2}`.
pub fn r_bound(n: usize, t: f64, lambda_min_dkgd: f64) -> f64 {
    8.0 * (n as f64).sqrt() * (1.0 + (2.0 * t).sqrt()) / lambda_min_dkgd.sqrt()
}

pub fn compute_bounds(inputs: &BoundInputs) -> Result<BoundReport> {
    inputs.validate()?;
    let n = inputs.n as f64;
    let p = inputs.p as f64;
    let lam = inputs.lambda_min_dkgd;
    let el = inputs.eps * lam;
    let p_d = ellipsoid_entropy_pd(&inputs.d_eigenvalues)?;

    let v = n.sqrt() / el;
    let big_r = 1.0 / el;
    let big_e = 12.0 * v * (2.0 * p_d).sqrt() + 24.0 * big_r * p_d;
    let t = inputs.t;
    let z_t = big_e + (2.0 * t * (v * v + 2.0 * big_r * big_e)).sqrt() + t * big_r / 3.0;
    let delta_r = inputs.r * n * inputs.c_q / (n.sqrt() * el);
    let diamond = (delta_r + z_t) * inputs.r;
    let diamond_leading =
        n.sqrt() * (inputs.r * inputs.c_q + inputs.r * p_d.sqrt() + (2.0 * t).sqrt()) / el;
    let r_bound = r_bound(inputs.n, t, lam);
    let mu3_bound = 4.0 * std::f64::consts::SQRT_2 * p / lam.sqrt();

    let report = BoundReport {
        inputs: inputs.clone(),
        p_d,
        v,
        big_r,
        big_e,
        z_t,
        delta_r,
        diamond,
        diamond_leading,
        r_bound,
        mu3_bound,
    };
    let finite = [
        p_d, v, big_r, big_e, z_t, delta_r, diamond, diamond_leading, r_bound, mu3_bound,
    ];
    if finite.iter().any(|x| !x.is_finite()) {
        return Err(invalid("bound evaluation overflowed"));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_inputs(t: f64) -> BoundInputs {
        BoundInputs {
            n: 1,
            p: 1,
            eps: 1.0,
            t,
            c_q: 0.0,
            lambda_min_dkgd: 1.0,
            d_eigenvalues: vec![1.0, 1.0],
            r: 1.0,
        }
    }

    #[test]
    fn entropy_of_unit_eigenvalues_is_zero() {
        assert_eq!(ellipsoid_entropy_pd(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn entropy_at_e() {
        let e = std::f64::consts::E;
        let expected = 2.0 * 2f64.sqrt() / e;
        assert_relative_eq!(ellipsoid_entropy_pd(&[e, e]).unwrap(), expected, epsilon = 1e-14);
        assert_relative_eq!(expected, 1.0405, epsilon = 1e-4);
    }

    #[test]
    fn entropy_rejects_nonpositive() {
        assert!(ellipsoid_entropy_pd(&[1.0, 0.0]).is_err());
        assert!(ellipsoid_entropy_pd(&[-2.0]).is_err());
    }

    #[test]
    fn ball_constants() {
        assert_eq!(ball_entropy_integrals(1, 1.0), (1.42, 2.1));
        let (a, b) = ball_entropy_integrals(4, 3.0);
        assert_relative_eq!(a, 3.0 * 1.42 * 2.0);
        assert_relative_eq!(b, 3.0 * 2.1 * 4.0);
    }

    #[test]
    fn audit_matches_closed_form_and_constants() {
        let audit = entropy_audit(20_000);
        assert_relative_eq!(audit.linear_integral, 1.0 + 3f64.ln(), epsilon = 1e-6);
        assert!(audit.within_constants(), "{audit:?}");
    }

    #[test]
    fn unit_case_hand_values() {
        let rep = compute_bounds(&unit_inputs(2.0)).unwrap();
        assert_eq!(rep.big_e, 0.0);
        assert_eq!((rep.v, rep.big_r), (1.0, 1.0));
        assert_relative_eq!(rep.z_t, 2.0 + 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(rep.diamond, 2.0 + 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(rep.diamond, (rep.delta_r + rep.z_t) * rep.inputs.r);
    }

    #[test]
    fn zero_confidence_vanishes() {
        let rep = compute_bounds(&unit_inputs(0.0)).unwrap();
        assert_eq!((rep.z_t, rep.diamond), (0.0, 0.0));
    }

    #[test]
    fn mu3_bound_value() {
        let mut inp = unit_inputs(1.0);
        inp.p = 4;
        let rep = compute_bounds(&inp).unwrap();
        assert_relative_eq!(rep.mu3_bound, 16.0 * 2f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(rep.mu3_bound, 22.63, epsilon = 5e-3);
    }

    #[test]
    fn invalid_inputs_rejected() {
        let mut inp = unit_inputs(1.0);
        inp.eps = 0.0;
        assert!(compute_bounds(&inp).is_err());
        let mut inp = unit_inputs(1.0);
        inp.t = -1.0;
        assert!(compute_bounds(&inp).is_err());
        let mut inp = unit_inputs(1.0);
        inp.d_eigenvalues.clear();
        assert!(compute_bounds(&inp).is_err());
    }

    #[test]
    fn report_round_trips_through_json() {
        let rep = compute_bounds(&unit_inputs(1.5)).unwrap();
        let s = serde_json::to_string(&rep).unwrap();
        assert!(s.contains("\"R\""));
        let back: BoundReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, rep);
    }
}
