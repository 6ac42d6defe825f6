//! Robust estimation of directional first absolute moments.
//!
//! For heavy-tailed data the empirical mean of `|<X, theta>|` still
//! concentrates as long as some `(1+gamma)`-th moment is finite: by a
//! Chebyshev-with-truncation argument,
//! `Pr[|est - E| > eps] <= 8 M / (eps^2 N^(gamma/3))`
//! once `N >= (8 M / eps)^(1/2 + 1/gamma)`, where `M >= max(E|Z|^(1+gamma), 1)`
//! for the projection `Z = <X, theta>`. [`required_samples`] inverts the
//! failure bound for a target `(eps, delta)` with the directional moment
//! bounded by `M n s_max^(1+gamma)`. The constants are loose; treat the
//! result as an advisory budget, not a feasibility wall.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sources::SampleMatrix;

/// Moment hypothesis `E|<X, theta>|^(1+gamma) <= M` (per unit direction),
/// with the accuracy/confidence pair the estimate should meet.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MomentBound {
    pub m: f64,
    pub gamma: f64,
    pub eps: f64,
    pub delta: f64,
}

impl MomentBound {
    /// `gamma` is accepted in `(0, 1]`; values above 1 gain nothing here
    /// (the argument truncates at the `1+gamma` moment and 1 is the cap).
    pub fn new(m: f64, gamma: f64, eps: f64, delta: f64) -> Result<Self> {
        if !(m > 1.0) {
            return Err(Error::Config(format!(
                "moment bound M must exceed 1, got {m}"
            )));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, 1], got {gamma}"
            )));
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::Config(format!("eps must lie in (0, 1), got {eps}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config(format!(
                "delta must lie in (0, 1), got {delta}"
            )));
        }
        Ok(MomentBound {
            m,
            gamma,
            eps,
            delta,
        })
    }
}

/// Empirical `E|<X, theta/|theta|>|`; the input direction is normalized.
pub fn directional_abs_moment(samples: &SampleMatrix, theta: &DVector<f64>) -> Result<f64> {
    if theta.len() != samples.dim() {
        return Err(Error::DimensionMismatch {
            expected: samples.dim(),
            got: theta.len(),
        });
    }
    let norm = theta.norm();
    if !(norm > 1e-300) || !norm.is_finite() {
        return Err(Error::ZeroDirection);
    }
    let unit = theta / norm;
    Ok(raw_abs_moment(samples, unit.as_slice()))
}

/// `(1/N) sum_i |<x_i, u>|` without normalizing `u`: positively homogeneous
/// of degree one in `u`, the support function estimate of the centroid body.
// Row index into column-major slices; an iterator over `cols` would walk the
// wrong axis.
#[allow(clippy::needless_range_loop)]
pub fn raw_abs_moment(samples: &SampleMatrix, u: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), samples.dim());
    let cols = samples.columns_raw();
    let n = samples.n_samples();
    let mut acc = 0.0;
    match u.len() {
        1 => {
            let u0 = u[0];
            for &x in cols[0] {
                acc += (u0 * x).abs();
            }
        }
        2 => {
            let (u0, u1) = (u[0], u[1]);
            let (c0, c1) = (cols[0], cols[1]);
            for i in 0..n {
                acc += (u0 * c0[i] + u1 * c1[i]).abs();
            }
        }
        3 => {
            let (u0, u1, u2) = (u[0], u[1], u[2]);
            let (c0, c1, c2) = (cols[0], cols[1], cols[2]);
            for i in 0..n {
                acc += (u0 * c0[i] + u1 * c1[i] + u2 * c2[i]).abs();
            }
        }
        _ => {
            for i in 0..n {
                let mut d = 0.0;
                for (j, &uj) in u.iter().enumerate() {
                    d += uj * cols[j][i];
                }
                acc += d.abs();
            }
        }
    }
    acc / n as f64
}

/// Smallest `N` from the failure-probability bound
/// `8 M n s_max^(1+gamma) / (eps^2 N^(gamma/3)) <= delta`, i.e.
/// `N = ceil((8 M n s_max^(1+gamma) / (eps^2 delta))^(3/gamma))`.
/// Saturates at `u64::MAX` when the float blows up.
pub fn required_samples(bound: &MomentBound, n: usize, s_max: f64) -> Result<u64> {
    if n == 0 {
        return Err(Error::Config("dimension must be positive".into()));
    }
    if !(s_max > 0.0) || !s_max.is_finite() {
        return Err(Error::Config(format!(
            "s_max must be positive and finite, got {s_max}"
        )));
    }
    let inner = 8.0 * bound.m * n as f64 * s_max.powf(1.0 + bound.gamma)
        / (bound.eps * bound.eps * bound.delta);
    let raw = inner.powf(3.0 / bound.gamma);
    Ok(ceil_to_u64(raw))
}

/// Smallest sample count at which the fractional-moment concentration bound
/// is valid at all: `N >= (8 M / eps)^(1/2 + 1/gamma)`.
pub fn concentration_min_samples(m: f64, gamma: f64, eps: f64) -> Result<u64> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Config(format!("eps must lie in (0, 1), got {eps}")));
    }
    if !(m > 1.0) {
        return Err(Error::Config(format!(
            "moment bound M must exceed 1, got {m}"
        )));
    }
    let raw = (8.0 * m / eps).powf(0.5 + 1.0 / gamma);
    Ok(ceil_to_u64(raw))
}

fn ceil_to_u64(x: f64) -> u64 {
    if !x.is_finite() || x >= u64::MAX as f64 {
        u64::MAX
    } else {
        x.ceil() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sources::{sample_sources, SourceFamily, SourceSpec};
    use nalgebra::DMatrix;

    #[test]
    fn constant_direction_is_exact() {
        let data = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let s = SampleMatrix::from_data(data, 0, None);
        let h = directional_abs_moment(&s, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(h, 1.0);
        // Scaling theta must not change the normalized estimate.
        let h2 = directional_abs_moment(&s, &DVector::from_vec(vec![-7.0, 0.0])).unwrap();
        assert_eq!(h, h2);
    }

    #[test]
    fn zero_direction_rejected() {
        let s = SampleMatrix::from_data(DMatrix::zeros(4, 2), 0, None);
        let r = directional_abs_moment(&s, &DVector::from_vec(vec![0.0, 0.0]));
        assert!(matches!(r, Err(Error::ZeroDirection)));
    }

    #[test]
    fn gaussian_directional_moment_is_sqrt_2_over_pi() {
        let specs = [
            SourceSpec::new(SourceFamily::Gaussian, 0.0, 1.0, false),
            SourceSpec::new(SourceFamily::Gaussian, 0.0, 1.0, false),
        ];
        let s = sample_sources(&specs, 1_000_000, 77).unwrap();
        // Any unit direction projects N(0, I) to N(0, 1).
        let theta = DVector::from_vec(vec![0.6, 0.8]);
        let h = directional_abs_moment(&s, &theta).unwrap();
        assert!(
            (h - (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.01,
            "E|N(0,1)| = sqrt(2/pi), got {h}"
        );
    }

    #[test]
    fn required_samples_frozen_example() {
        // M = 2, n = 1, s_max = 1, eps = 1/2, delta = 1/2, gamma = 1:
        // inner = 8*2/(0.25*0.5) = 128, N = 128^3 = 2_097_152.
        let bound = MomentBound::new(2.0, 1.0, 0.5, 0.5).unwrap();
        assert_eq!(required_samples(&bound, 1, 1.0).unwrap(), 2_097_152);
    }

    #[test]
    fn concentration_min_samples_frozen_example() {
        // (8*2/0.5)^(3/2) = 32^1.5 = 181.02, ceil = 182.
        assert_eq!(concentration_min_samples(2.0, 1.0, 0.5).unwrap(), 182);
    }

    #[test]
    fn required_samples_monotone_in_eps() {
        let loose = MomentBound::new(2.0, 1.0, 0.5, 0.5).unwrap();
        let tight = MomentBound::new(2.0, 1.0, 0.25, 0.5).unwrap();
        let n_loose = required_samples(&loose, 2, 1.0).unwrap();
        let n_tight = required_samples(&tight, 2, 1.0).unwrap();
        assert!(
            n_tight > n_loose,
            "halving eps must raise the budget: {n_tight} vs {n_loose}"
        );
        // gamma = 1: eps enters squared inside a cube, so halving eps
        // multiplies the budget by exactly 4^3 = 64.
        assert_eq!(n_tight, n_loose * 64);
    }

    #[test]
    fn moment_bound_validation() {
        assert!(MomentBound::new(0.5, 1.0, 0.5, 0.5).is_err(), "M <= 1");
        assert!(MomentBound::new(2.0, 0.0, 0.5, 0.5).is_err(), "gamma = 0");
        assert!(MomentBound::new(2.0, 1.5, 0.5, 0.5).is_err(), "gamma > 1");
        assert!(MomentBound::new(2.0, 1.0, 1.5, 0.5).is_err(), "eps >= 1");
        assert!(MomentBound::new(2.0, 1.0, 0.5, 0.0).is_err(), "delta = 0");
    }

    #[test]
    fn concentration_at_the_advisory_budget() {
        // Symmetric Pareto alpha = 2.5 normalized: E|S| = 1 (s = 3/5 scale),
        // E S^2 = (alpha/(alpha-2)) / (alpha/(alpha-1))^2 = 5 / (5/3)^2 = 1.8.
        // gamma = 1, M = 2 > E S^2; eps = 0.6, delta = 0.5 give
        // N = (8*2/(0.36*0.5))^3 = ceil(88.9^3) ~ 7.0e5.
        let bound = MomentBound::new(2.0, 1.0, 0.6, 0.5).unwrap();
        let n_req = required_samples(&bound, 1, 1.0).unwrap() as usize;
        assert!(
            n_req < 1_000_000,
            "budget should be desk-scale, got {n_req}"
        );
        let spec = SourceSpec::new(SourceFamily::SymmetricPareto, 2.5, 1.0, true);
        let theta = DVector::from_vec(vec![1.0]);
        let mut violations = 0;
        let trials = 100;
        for t in 0..trials {
            let s = sample_sources(&[spec], n_req, 9_000 + t).unwrap();
            let h = directional_abs_moment(&s, &theta).unwrap();
            if (h - 1.0).abs() > bound.eps {
                violations += 1;
            }
        }
        let max_allowed = (bound.delta * trials as f64) as usize;
        assert!(
            violations <= max_allowed,
            "{violations} of {trials} trials deviated by more than eps"
        );
    }
}
