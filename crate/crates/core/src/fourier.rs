//! Second-derivative structure of the empirical characteristic function.
//!
//! For `phi(u) = E exp(i<u, x>)`, the matrix
//! `Psi(u) = D^2 phi / phi - (D phi)(D phi)^T / phi^2` is the Hessian of
//! `log phi`. When `x = A s` with independent coordinates of `s` and
//! orthonormal columns of `A`, the chain rule gives
//! `Psi(u) = A diag(psi_j''(<a_j, u>)) A^T`: the columns of `A` are
//! eigenvectors of `Psi(u)` at every probe `u`. Estimating `Psi` at a probe
//! where the diagonal values separate and reading off its eigenvectors
//! recovers `A` up to signs and order.
//!
//! Two failure modes are first-class: the probe can land where `|phi|` is
//! too small to divide by, and the spectrum can be too close to degenerate
//! for eigenvectors to mean anything against sampling noise. The probe loop
//! retries both deterministically; for Gaussian data the spectrum is
//! degenerate at every probe (the Hessian of `log phi` is constant), so the
//! loop reports that rather than returning noise.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::sources::SampleMatrix;

/// Estimates divide by `phi`; below this magnitude the division is noise.
pub const PHI_FLOOR: f64 = 0.1;

/// Empirical characteristic function with derivatives at one point.
#[derive(Clone, Debug)]
pub struct CharFnEstimate {
    pub phi: Complex<f64>,
    /// `D phi = i mean(x exp(i<u,x>))`.
    pub grad: DVector<Complex<f64>>,
    /// `D^2 phi = -mean(x x^T exp(i<u,x>))`.
    pub hess: DMatrix<Complex<f64>>,
}

/// One pass over the rows: `phi`, its gradient, and its Hessian at `u`.
pub fn estimate_char_fn(x: &SampleMatrix, u: &DVector<f64>) -> Result<CharFnEstimate> {
    let n = x.dim();
    if u.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: u.len(),
        });
    }
    if x.n_samples() == 0 {
        return Err(Error::Config("empty sample set".into()));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("probe has non-finite entries".into()));
    }
    let cols = x.columns_raw();
    let rows = x.n_samples();
    let mut phi = Complex::new(0.0, 0.0);
    let mut m1 = vec![Complex::new(0.0, 0.0); n];
    let mut m2 = vec![Complex::new(0.0, 0.0); n * n];
    let mut xi = vec![0.0f64; n];
    for i in 0..rows {
        let mut t = 0.0;
        for (j, col) in cols.iter().enumerate() {
            let v = col[i];
            xi[j] = v;
            t += u[j] * v;
        }
        let (s, c) = t.sin_cos();
        let e = Complex::new(c, s);
        phi += e;
        for j in 0..n {
            m1[j] += e * xi[j];
            for k in j..n {
                m2[j * n + k] += e * (xi[j] * xi[k]);
            }
        }
    }
    let nf = rows as f64;
    phi /= nf;
    let grad = DVector::from_iterator(n, m1.iter().map(|z| Complex::new(0.0, 1.0) * z / nf));
    let mut hess = DMatrix::from_element(n, n, Complex::new(0.0, 0.0));
    for j in 0..n {
        for k in j..n {
            let v = -m2[j * n + k] / nf;
            hess[(j, k)] = v;
            hess[(k, j)] = v;
        }
    }
    Ok(CharFnEstimate { phi, grad, hess })
}

/// The Hessian of `log phi` at one probe.
#[derive(Clone, Debug)]
pub struct PsiMatrix {
    /// Real part, symmetrized.
    pub psi: DMatrix<f64>,
    pub u: DVector<f64>,
    pub phi_abs: f64,
    /// Frobenius norm of the imaginary part that was discarded. Large values
    /// mean the probe or the data violate the symmetry assumptions.
    pub imag_norm: f64,
}

/// Estimate `Psi(u)`. Fails with `ProbeTooLarge` when `|phi(u)|` falls under
/// the floor.
pub fn estimate_psi(x: &SampleMatrix, u: &DVector<f64>) -> Result<PsiMatrix> {
    let est = estimate_char_fn(x, u)?;
    let phi_abs = est.phi.norm();
    if phi_abs < PHI_FLOOR {
        return Err(Error::ProbeTooLarge {
            phi_abs,
            floor: PHI_FLOOR,
        });
    }
    let n = u.len();
    let phi2 = est.phi * est.phi;
    let mut psi = DMatrix::zeros(n, n);
    let mut imag_sq = 0.0;
    for j in 0..n {
        for k in 0..n {
            let z = est.hess[(j, k)] / est.phi - est.grad[j] * est.grad[k] / phi2;
            psi[(j, k)] = z.re;
            imag_sq += z.im * z.im;
        }
    }
    let psi = (&psi + psi.transpose()) * 0.5;
    Ok(PsiMatrix {
        psi,
        u: u.clone(),
        phi_abs,
        imag_norm: imag_sq.sqrt(),
    })
}

/// Delta-method proxy for the per-entry standard error of `Psi(u)`: the
/// entry noise of the Hessian estimate propagated through the division by
/// `phi`, doubled to cover the gradient outer-product term. A scale for gap
/// tests, not a confidence interval.
pub fn psi_noise_scale(x: &SampleMatrix, u: &DVector<f64>) -> Result<f64> {
    let n = x.dim();
    if u.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: u.len(),
        });
    }
    let rows = x.n_samples();
    if rows < 2 {
        return Err(Error::Config("need at least 2 samples".into()));
    }
    let cols = x.columns_raw();
    let mut phi = Complex::new(0.0, 0.0);
    let mut mean = vec![Complex::new(0.0, 0.0); n * n];
    let mut sq = vec![0.0f64; n * n];
    let mut xi = vec![0.0f64; n];
    for i in 0..rows {
        let mut t = 0.0;
        for (j, col) in cols.iter().enumerate() {
            let v = col[i];
            xi[j] = v;
            t += u[j] * v;
        }
        let (s, c) = t.sin_cos();
        let e = Complex::new(c, s);
        phi += e;
        for j in 0..n {
            for k in j..n {
                let w = xi[j] * xi[k];
                mean[j * n + k] += e * w;
                sq[j * n + k] += w * w;
            }
        }
    }
    let nf = rows as f64;
    let phi_abs = (phi / nf).norm().max(1e-12);
    let mut se_sum = 0.0;
    let mut count = 0.0;
    for j in 0..n {
        for k in j..n {
            let m = mean[j * n + k] / nf;
            let var = (sq[j * n + k] / nf - m.norm_sqr()).max(0.0);
            se_sum += (var / nf).sqrt();
            count += 1.0;
        }
    }
    Ok(2.0 * se_sum / (count * phi_abs))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeParams {
    /// A probe is accepted only when the smallest eigenvalue gap exceeds
    /// this many noise scales.
    pub gap_floor_sigmas: f64,
    pub max_retries: usize,
    /// Cap on the discarded imaginary part, relative to the Frobenius norm
    /// of the real part.
    pub imag_tol: f64,
    /// Starting probe radius; the default is `1/(2 median |x|)`. Each probe
    /// then walks outward along its direction while `|phi|` stays above the
    /// working band, because eigenvalue gaps grow with the probe radius
    /// while `|phi|` is still of constant order.
    pub scale_override: Option<f64>,
    pub seed: u64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        ProbeParams {
            gap_floor_sigmas: 3.5,
            max_retries: 80,
            imag_tol: 0.25,
            scale_override: None,
            seed: 0,
        }
    }
}

/// `|phi|` stays above this while the probe radius is pushed outward.
const PHI_EXPAND_BAND: f64 = 0.3;

/// Magnitude of the empirical characteristic function at one point.
pub fn char_fn_abs(x: &SampleMatrix, u: &DVector<f64>) -> Result<f64> {
    let n = x.dim();
    if u.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: u.len(),
        });
    }
    let cols = x.columns_raw();
    let rows = x.n_samples();
    if rows == 0 {
        return Err(Error::Config("empty sample set".into()));
    }
    let mut re = 0.0;
    let mut im = 0.0;
    for i in 0..rows {
        let mut t = 0.0;
        for (j, col) in cols.iter().enumerate() {
            t += u[j] * col[i];
        }
        let (s, c) = t.sin_cos();
        re += c;
        im += s;
    }
    let nf = rows as f64;
    Ok(Complex::new(re / nf, im / nf).norm())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecoveryDiagnostics {
    /// Probes tried before one was accepted.
    pub attempts: usize,
    pub phi_abs: f64,
    pub min_gap: f64,
    pub noise_scale: f64,
    pub imag_norm: f64,
    pub probe: Vec<f64>,
    pub radius: f64,
}

/// Recover the orthonormal mixing columns from damped, centered data by
/// eigendecomposing `Psi` at a well-separated probe. Columns are returned in
/// eigenvalue order with a deterministic sign convention. Gaussian-like data
/// exhausts the retries and reports `SpectralDegeneracy`.
pub fn recover_unitary(
    x: &SampleMatrix,
    params: &ProbeParams,
) -> Result<(DMatrix<f64>, RecoveryDiagnostics)> {
    let n = x.dim();
    if n < 2 {
        return Err(Error::Config(
            "recovery needs at least two dimensions".into(),
        ));
    }
    if params.max_retries == 0 {
        return Err(Error::Config("max_retries must be positive".into()));
    }
    let rows = x.n_samples();
    if rows < 16 {
        return Err(Error::Config(format!(
            "recovery needs more than {rows} samples"
        )));
    }

    // Center; damping of a symmetric batch leaves a small empirical mean.
    let mut data = x.data.clone();
    let mean = data.row_mean();
    for i in 0..data.nrows() {
        for j in 0..n {
            data[(i, j)] -= mean[j];
        }
    }
    let centered = SampleMatrix::from_data(data, x.seed, x.model_id.clone());

    let mut base_scale = match params.scale_override {
        Some(s) => {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!(
                    "probe scale must be positive, got {s}"
                )));
            }
            s
        }
        None => {
            let mut norms: Vec<f64> = (0..rows).map(|i| centered.data.row(i).norm()).collect();
            norms.sort_by(|a, b| a.total_cmp(b));
            let median = norms[rows / 2];
            if median <= 0.0 {
                return Err(Error::Config("median row norm is zero".into()));
            }
            1.0 / (2.0 * median)
        }
    };

    struct Candidate {
        ratio: f64,
        eig: SymmetricEigen<f64, nalgebra::Dyn>,
        psi: PsiMatrix,
        noise: f64,
        radius: f64,
        attempt: usize,
    }
    let mut best: Option<Candidate> = None;
    // A probe this far above the gate is unambiguous; stop scanning.
    let strong_accept = (2.0 * params.gap_floor_sigmas).max(8.0);

    let mut stream = rng::stream(params.seed, "fourier:probe", 0);
    let mut consecutive_floor = 0usize;
    'attempts: for attempt in 0..params.max_retries {
        let dir = random_unit(n, &mut stream);
        let jitter: f64 = stream.gen::<f64>();
        let base = base_scale * (0.7 + 0.6 * jitter);
        // Push the probe outward while |phi| holds up: gaps between the
        // diagonal values grow with the radius, and the estimate stays
        // usable as long as |phi| is of constant order.
        let mut terminal = base;
        for _ in 0..12 {
            let next = terminal * 1.4;
            match char_fn_abs(&centered, &(&dir * next)) {
                Ok(a) if a >= PHI_EXPAND_BAND => terminal = next,
                Ok(_) => break,
                Err(e) => return Err(e),
            }
        }
        // Examine a few rungs below the terminal radius too; the best
        // gap-to-noise tradeoff is not always at the edge of the band.
        for rung in [terminal, terminal / 1.4, terminal / 1.96] {
            if rung < base * 0.99 && rung < terminal {
                continue;
            }
            let u = &dir * rung;
            let psi = match estimate_psi(&centered, &u) {
                Ok(p) => {
                    consecutive_floor = 0;
                    p
                }
                Err(Error::ProbeTooLarge { .. }) => {
                    consecutive_floor += 1;
                    if consecutive_floor >= 6 {
                        base_scale *= 0.5;
                        consecutive_floor = 0;
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            let psi_norm = psi.psi.norm();
            if psi.imag_norm > params.imag_tol * (psi_norm + 1e-12) {
                continue;
            }
            let noise = psi_noise_scale(&centered, &u)?.max(1e-300);
            let eig = SymmetricEigen::new(psi.psi.clone());
            let mut ev: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
            ev.sort_by(f64::total_cmp);
            let mut min_gap = f64::INFINITY;
            for w in ev.windows(2) {
                min_gap = min_gap.min(w[1] - w[0]);
            }
            if min_gap < 1e-10 * (1.0 + psi_norm) {
                continue;
            }
            let ratio = min_gap / noise;
            if best.as_ref().is_none_or(|b| ratio > b.ratio) {
                best = Some(Candidate {
                    ratio,
                    eig,
                    psi,
                    noise,
                    radius: rung,
                    attempt,
                });
            }
            if best.as_ref().is_some_and(|b| b.ratio >= strong_accept) {
                break 'attempts;
            }
        }
    }

    let best = match best {
        Some(b) if b.ratio >= params.gap_floor_sigmas => b,
        _ => {
            return Err(Error::SpectralDegeneracy {
                retries: params.max_retries,
            })
        }
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| best.eig.eigenvalues[a].total_cmp(&best.eig.eigenvalues[b]));
    let mut min_gap = f64::INFINITY;
    for w in order.windows(2) {
        min_gap = min_gap.min(best.eig.eigenvalues[w[1]] - best.eig.eigenvalues[w[0]]);
    }
    let mut v = DMatrix::zeros(n, n);
    for (col, &idx) in order.iter().enumerate() {
        let mut column = best.eig.eigenvectors.column(idx).into_owned();
        // Deterministic sign: the entry of largest magnitude is positive.
        let mut pivot = 0;
        for j in 1..n {
            if column[j].abs() > column[pivot].abs() {
                pivot = j;
            }
        }
        if column[pivot] < 0.0 {
            column = -column;
        }
        v.set_column(col, &column);
    }
    Ok((
        v,
        RecoveryDiagnostics {
            attempts: best.attempt + 1,
            phi_abs: best.psi.phi_abs,
            min_gap,
            noise_scale: best.noise,
            imag_norm: best.psi.imag_norm,
            probe: best.psi.u.as_slice().to_vec(),
            radius: best.radius,
        },
    ))
}

/// Largest Frobenius distance between `Psi` at the given probes and a
/// target matrix.
pub fn psi_closeness(
    x: &SampleMatrix,
    target: &DMatrix<f64>,
    probes: &[DVector<f64>],
) -> Result<f64> {
    let mut worst = 0.0f64;
    for u in probes {
        let psi = estimate_psi(x, u)?;
        let d = (&psi.psi - target).norm();
        if d > worst {
            worst = d;
        }
    }
    Ok(worst)
}

fn random_unit(n: usize, r: &mut rand_chacha::ChaCha8Rng) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| {
            let z: f64 = StandardNormal.sample(r);
            z
        });
        let norm = v.norm();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sources::{mix, sample_sources, IcaModel, SourceFamily, SourceSpec};

    fn uniform_sources(n_dims: usize) -> Vec<SourceSpec> {
        (0..n_dims)
            .map(|_| SourceSpec::new(SourceFamily::Uniform, 0.0, 1.0, true))
            .collect()
    }

    #[test]
    fn psi_at_zero_is_minus_covariance() {
        // At u = 0 the identity Psi = -cov is algebraic, not statistical.
        let specs = [
            SourceSpec::new(SourceFamily::SymmetricPareto, 3.0, 1.0, true),
            SourceSpec::new(SourceFamily::Uniform, 0.0, 1.0, true),
        ];
        let x = sample_sources(&specs, 5_000, 17).unwrap();
        let psi = estimate_psi(&x, &DVector::zeros(2)).unwrap();
        let mean = x.data.row_mean();
        let m = x.data.nrows() as f64;
        let mut cov = x.data.transpose() * &x.data / m;
        for j in 0..2 {
            for k in 0..2 {
                cov[(j, k)] -= mean[j] * mean[k];
            }
        }
        let err = (&psi.psi + cov).norm();
        assert!(err < 1e-10, "Psi(0) + cov should vanish, norm = {err:.3e}");
        assert!(psi.imag_norm < 1e-10);
        assert!((psi.phi_abs - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_psi_is_minus_identity_at_any_probe() {
        let specs = [
            SourceSpec::new(SourceFamily::Gaussian, 0.0, 1.0, false),
            SourceSpec::new(SourceFamily::Gaussian, 0.0, 1.0, false),
        ];
        let x = sample_sources(&specs, 200_000, 23).unwrap();
        let u = DVector::from_vec(vec![0.3, 0.2]);
        let psi = estimate_psi(&x, &u).unwrap();
        for j in 0..2 {
            for k in 0..2 {
                let want = if j == k { -1.0 } else { 0.0 };
                assert!(
                    (psi.psi[(j, k)] - want).abs() < 0.03,
                    "Psi[{j},{k}] = {} for standard Gaussian",
                    psi.psi[(j, k)]
                );
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let specs = uniform_sources(2);
        let x = sample_sources(&specs, 2_000, 29).unwrap();
        let u = DVector::from_vec(vec![0.37, -0.21]);
        let est = estimate_char_fn(&x, &u).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[j] += h;
            dn[j] -= h;
            let fu = estimate_char_fn(&x, &up).unwrap().phi;
            let fd = estimate_char_fn(&x, &dn).unwrap().phi;
            let fd_grad = (fu - fd) / (2.0 * h);
            assert!(
                (fd_grad - est.grad[j]).norm() < 1e-6,
                "grad[{j}] mismatch: fd {fd_grad}, analytic {}",
                est.grad[j]
            );
            for k in 0..2 {
                let mut upk = up.clone();
                let mut dnk = dn.clone();
                upk[k] += h;
                dnk[k] += h;
                // Mixed second difference of phi.
                let pp = estimate_char_fn(&x, &upk).unwrap().phi;
                let pm = estimate_char_fn(&x, &up).unwrap().phi;
                let _ = pm;
                let mut um = u.clone();
                um[k] += h;
                let p01 = estimate_char_fn(&x, &um).unwrap().phi;
                let mut umj = u.clone();
                umj[j] += h;
                let p10 = estimate_char_fn(&x, &umj).unwrap().phi;
                let p00 = est.phi;
                let fd_hess = (pp - p01 - p10 + p00) / (h * h);
                assert!(
                    (fd_hess - est.hess[(j, k)]).norm() < 1e-3,
                    "hess[{j},{k}] mismatch: fd {fd_hess}, analytic {}",
                    est.hess[(j, k)]
                );
            }
        }
    }

    #[test]
    fn far_probe_hits_the_phi_floor() {
        let specs = [
            SourceSpec::new(SourceFamily::Gaussian, 0.0, 1.0, false),
            SourceSpec::new(SourceFamily::Gaussian, 0.0, 1.0, false),
        ];
        let x = sample_sources(&specs, 5_000, 31).unwrap();
        let u = DVector::from_vec(vec![50.0, 50.0]);
        let err = estimate_psi(&x, &u).unwrap_err();
        assert_eq!(err.kind(), "probe_too_large");
    }

    #[test]
    fn recovers_identity_mixing_of_uniforms() {
        let specs = uniform_sources(2);
        let x = sample_sources(&specs, 50_000, 41).unwrap();
        let params = ProbeParams {
            seed: 7,
            ..ProbeParams::default()
        };
        let (v, diag) = recover_unitary(&x, &params).unwrap();
        assert!(diag.attempts >= 1);
        // Each recovered column should align with a coordinate axis.
        for c in 0..2 {
            let col = v.column(c);
            let align = col[0].abs().max(col[1].abs());
            assert!(
                align > 0.998,
                "column {c} not axis-aligned: {col:?} (attempts {})",
                diag.attempts
            );
        }
    }

    #[test]
    fn recovers_a_rotation_of_uniforms() {
        let specs = uniform_sources(2);
        let theta = 30.0f64.to_radians();
        let a =
            DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
        let model = IcaModel::new(specs.to_vec(), a.clone()).unwrap();
        let s = sample_sources(&model.sources, 50_000, 43).unwrap();
        let x = mix(&model, &s).unwrap();
        let params = ProbeParams {
            seed: 11,
            ..ProbeParams::default()
        };
        let (v, _) = recover_unitary(&x, &params).unwrap();
        // Each true column must appear (up to sign) among the recovered.
        for j in 0..2 {
            let truth = a.column(j);
            let best = (0..2)
                .map(|c| v.column(c).dot(&truth).abs())
                .fold(0.0f64, f64::max);
            assert!(
                best > 0.99,
                "true column {j} missing: best |cos| = {best:.4}"
            );
        }
    }

    #[test]
    fn gaussian_data_reports_degeneracy() {
        let specs = [
            SourceSpec::new(SourceFamily::Gaussian, 0.0, 1.0, false),
            SourceSpec::new(SourceFamily::Gaussian, 0.0, 1.0, false),
        ];
        let x = sample_sources(&specs, 30_000, 47).unwrap();
        let params = ProbeParams {
            seed: 13,
            max_retries: 25,
            ..ProbeParams::default()
        };
        let err = recover_unitary(&x, &params).unwrap_err();
        assert_eq!(err.kind(), "spectral_degeneracy");
    }

    #[test]
    fn recovery_is_deterministic() {
        let specs = uniform_sources(2);
        let x = sample_sources(&specs, 30_000, 53).unwrap();
        let params = ProbeParams {
            seed: 3,
            ..ProbeParams::default()
        };
        let (v1, d1) = recover_unitary(&x, &params).unwrap();
        let (v2, d2) = recover_unitary(&x, &params).unwrap();
        assert_eq!(v1.as_slice(), v2.as_slice());
        assert_eq!(d1.attempts, d2.attempts);
    }

    #[test]
    fn psi_closeness_over_probes() {
        let specs = [
            SourceSpec::new(SourceFamily::Gaussian, 0.0, 1.0, false),
            SourceSpec::new(SourceFamily::Gaussian, 0.0, 1.0, false),
        ];
        let x = sample_sources(&specs, 100_000, 59).unwrap();
        let target = -DMatrix::<f64>::identity(2, 2);
        let probes: Vec<DVector<f64>> = vec![
            DVector::zeros(2),
            DVector::from_vec(vec![0.2, 0.1]),
            DVector::from_vec(vec![-0.3, 0.25]),
        ];
        let worst = psi_closeness(&x, &target, &probes).unwrap();
        assert!(worst < 0.05, "worst Frobenius distance {worst}");
    }
}
