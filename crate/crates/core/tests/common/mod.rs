//! Helpers shared by the integration suites. Each test binary compiles its
//! own copy, so not every helper is used everywhere.
#![allow(dead_code)]

use heavyica::geometry::spectral_norm;
use heavyica::sources::{SourceFamily, SourceSpec};
use nalgebra::{DMatrix, DVector};

/// One verdict line per acceptance criterion, then the assertion. The line
/// shows under `--nocapture`; the harness result line carries the verdict
/// otherwise.
pub fn criterion(num: u32, label: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("[criterion {num:02}] {label}: {status} ({detail})");
    assert!(pass, "[criterion {num:02}] {label}: FAIL ({detail})");
}

pub fn uniform_specs(n: usize) -> Vec<SourceSpec> {
    vec![SourceSpec::new(SourceFamily::Uniform, 0.0, 1.0, true); n]
}

pub fn sym_pareto_specs(alpha: f64, n: usize) -> Vec<SourceSpec> {
    vec![SourceSpec::new(SourceFamily::SymmetricPareto, alpha, 1.0, true); n]
}

pub fn gaussian_specs(n: usize) -> Vec<SourceSpec> {
    vec![SourceSpec::new(SourceFamily::Gaussian, 0.0, 1.0, false); n]
}

pub fn l1_norm(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn linf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Spectral mass of the off-diagonal part relative to the whole matrix.
pub fn offdiag_ratio(m: &DMatrix<f64>) -> f64 {
    let mut off = m.clone();
    for i in 0..m.nrows().min(m.ncols()) {
        off[(i, i)] = 0.0;
    }
    spectral_norm(&off) / spectral_norm(m)
}

/// Composite Simpson rule on [a, b] with `intervals` subdivisions (rounded up
/// to even).
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, intervals: usize) -> f64 {
    let n = if intervals.is_multiple_of(2) {
        intervals.max(2)
    } else {
        intervals + 1
    };
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + h * k as f64);
    }
    acc * h / 3.0
}

/// Minimal total assignment cost over all permutations, brute force. The
/// reference the Hungarian solver is checked against.
pub fn exhaustive_min_cost(cost: &DMatrix<f64>) -> f64 {
    use itertools::Itertools;
    let n = cost.nrows();
    assert_eq!(n, cost.ncols());
    (0..n)
        .permutations(n)
        .map(|p| {
            p.iter()
                .enumerate()
                .map(|(j, &i)| cost[(i, j)])
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Unit direction from a seeded stream, for reproducible query sets.
pub fn seeded_unit(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> DVector<f64> {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let v = DVector::from_fn(n, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z
        });
        let norm = v.norm();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}
