//! Uniform sampling from a convex body by hit-and-run, and the covariance
//! pipeline built on it.
//!
//! The body is only reachable through membership queries. Each step picks a
//! uniform random direction, locates the chord endpoints by bisection on the
//! membership answer, and jumps to a uniform point of the chord. The walk
//! starts at the origin, which every body handled here contains.
//!
//! The covariance of the uniform distribution on the body is estimated
//! without mean centering (the bodies are origin-symmetric), symmetrized,
//! and inverted through its eigendecomposition to produce the
//! orthogonalizing map `B = Sigma^{-1/2}`.
//!
//! Determinism: chains are seeded individually from the walk seed, run in
//! parallel, and their points are assembled in chain order, so results do
//! not depend on thread scheduling.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::Body;
use crate::error::{Error, Result};
use crate::rng;
use crate::sources::SampleMatrix;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WalkParams {
    /// Steps discarded before the first recorded point (per chain).
    pub burn_in: usize,
    /// Steps between recorded points.
    pub thinning: usize,
    /// Independent chains run in parallel.
    pub chains: usize,
    /// Consecutive degenerate chords tolerated before giving up.
    pub max_stuck: usize,
    /// Fraction trimmed from each chord end before sampling the jump. Keeps
    /// iterates strictly interior when membership answers carry a weak
    /// tolerance shell; the distortion is far below the estimation noise.
    pub edge_trim: f64,
    /// Chord-endpoint bisection tolerance as a fraction of the bounding
    /// radius. Locating endpoints to a fraction of a percent biases the
    /// covariance far less than its sampling noise, and each halving of the
    /// tolerance costs one more membership query per endpoint.
    #[serde(default = "default_chord_tol")]
    pub chord_tol: f64,
    pub seed: u64,
}

fn default_chord_tol() -> f64 {
    0.005
}

impl WalkParams {
    /// Standard budget for dimension `n`: burn-in `50 n^2`, thinning `n^2`.
    pub fn default_for_dim(n: usize, seed: u64) -> Self {
        WalkParams {
            burn_in: 50 * n * n,
            thinning: n * n,
            chains: 8,
            max_stuck: 50,
            edge_trim: 0.01,
            chord_tol: default_chord_tol(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("walk needs at least one chain".into()));
        }
        if self.thinning == 0 {
            return Err(Error::Config("walk thinning must be positive".into()));
        }
        if !(0.0..0.25).contains(&self.edge_trim) {
            return Err(Error::Config(format!(
                "edge_trim must lie in [0, 0.25), got {}",
                self.edge_trim
            )));
        }
        if !(0.0..0.1).contains(&self.chord_tol) {
            return Err(Error::Config(format!(
                "chord_tol must lie in [0, 0.1), got {}",
                self.chord_tol
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct WalkDiagnostics {
    pub chains: usize,
    pub points: usize,
    /// Total hit-and-run steps across all chains.
    pub steps: u64,
    /// Steps whose chord collapsed to (numerically) a point.
    pub stuck_steps: u64,
    /// Average chord length seen while recording points.
    pub mean_chord: f64,
}

/// Draw `n_points` approximately uniform points from the body. Rows of the
/// returned matrix are points.
pub fn sample_body<B: Body + Sync + ?Sized>(
    body: &B,
    n_points: usize,
    params: &WalkParams,
) -> Result<(DMatrix<f64>, WalkDiagnostics)> {
    params.validate()?;
    let n = body.dim();
    if n == 0 {
        return Err(Error::Config(
            "cannot sample a zero-dimensional body".into(),
        ));
    }
    if n_points == 0 {
        return Err(Error::Config("n_points must be positive".into()));
    }
    let origin = DVector::zeros(n);
    if !body.contains(&origin) {
        return Err(Error::WalkStuck(
            "the body rejects the origin, which is the walk's starting point".into(),
        ));
    }

    let chains = params.chains.min(n_points);
    let per_chain = n_points.div_ceil(chains);

    let mut runs: Vec<Result<ChainRun>> = Vec::new();
    (0..chains)
        .into_par_iter()
        .map(|c| run_chain(body, per_chain, c as u64, params))
        .collect_into_vec(&mut runs);

    let mut points = DMatrix::zeros(n_points, n);
    let mut steps = 0u64;
    let mut stuck = 0u64;
    let mut chord_sum = 0.0;
    let mut chord_count = 0u64;
    let mut row = 0usize;
    for run in runs {
        let run = run?;
        steps += run.steps;
        stuck += run.stuck;
        chord_sum += run.chord_sum;
        chord_count += run.chord_count;
        for p in &run.points {
            if row == n_points {
                break;
            }
            points.row_mut(row).copy_from_slice(p.as_slice());
            row += 1;
        }
    }
    debug_assert_eq!(row, n_points);

    Ok((
        points,
        WalkDiagnostics {
            chains,
            points: n_points,
            steps,
            stuck_steps: stuck,
            mean_chord: if chord_count > 0 {
                chord_sum / chord_count as f64
            } else {
                0.0
            },
        },
    ))
}

struct ChainRun {
    points: Vec<DVector<f64>>,
    steps: u64,
    stuck: u64,
    chord_sum: f64,
    chord_count: u64,
}

fn run_chain<B: Body + ?Sized>(
    body: &B,
    n_points: usize,
    chain: u64,
    params: &WalkParams,
) -> Result<ChainRun> {
    let n = body.dim();
    let mut r = rng::stream(params.seed, "walk:chain", chain);
    let mut p = DVector::zeros(n);
    let mut hint: Option<DVector<f64>> = None;
    let r_cap = body.outer_radius() * 1.02;
    let tol = body
        .boundary_tol()
        .max(r_cap * params.chord_tol)
        .max(r_cap * 1e-12);
    let degenerate = (r_cap * 1e-9).max(tol * 1e-3);

    let mut points = Vec::with_capacity(n_points);
    let mut steps = 0u64;
    let mut stuck = 0u64;
    let mut consecutive_stuck = 0usize;
    let mut chord_sum = 0.0;
    let mut chord_count = 0u64;

    let total_steps = params.burn_in + n_points * params.thinning;
    let mut recorded = 0usize;
    for step in 0..total_steps {
        let d = random_unit(n, &mut r);
        // The body sits inside the ball of radius r_cap, so the chord along
        // d is bracketed by the roots of |p + t d| = r_cap.
        let pd = p.dot(&d);
        let disc = pd * pd + r_cap * r_cap - p.norm_squared();
        if disc <= 0.0 {
            // The iterate escaped the bounding ball; treat as stuck.
            stuck += 1;
            consecutive_stuck += 1;
            check_stuck(consecutive_stuck, params, step)?;
            steps += 1;
            continue;
        }
        let root = disc.sqrt();
        let t_hi = boundary_t(body, &p, &d, -pd + root, tol, &mut hint);
        let t_lo = boundary_t(body, &p, &d, -pd - root, tol, &mut hint);
        steps += 1;
        let len = t_hi - t_lo;
        if len <= degenerate {
            stuck += 1;
            consecutive_stuck += 1;
            check_stuck(consecutive_stuck, params, step)?;
            continue;
        }
        consecutive_stuck = 0;
        let u: f64 = r.gen::<f64>();
        let u = params.edge_trim + (1.0 - 2.0 * params.edge_trim) * u;
        let t = t_lo + u * len;
        p.axpy(t, &d, 1.0);

        if step >= params.burn_in && (step - params.burn_in + 1).is_multiple_of(params.thinning) {
            points.push(p.clone());
            chord_sum += len;
            chord_count += 1;
            recorded += 1;
            if recorded == n_points {
                break;
            }
        }
    }

    if recorded < n_points {
        return Err(Error::WalkStuck(format!(
            "chain {chain} recorded {recorded} of {n_points} points in {total_steps} steps"
        )));
    }

    Ok(ChainRun {
        points,
        steps,
        stuck,
        chord_sum,
        chord_count,
    })
}

fn check_stuck(consecutive: usize, params: &WalkParams, step: usize) -> Result<()> {
    if consecutive > params.max_stuck {
        return Err(Error::WalkStuck(format!(
            "{consecutive} consecutive degenerate chords at step {step}"
        )));
    }
    Ok(())
}

/// Bisect along `p + t d` between the feasible `t = 0` and the infeasible
/// `t = t_out`, returning the last feasible parameter. Witness directions
/// from infeasible answers are threaded back as warm starts.
fn boundary_t<B: Body + ?Sized>(
    body: &B,
    p: &DVector<f64>,
    d: &DVector<f64>,
    t_out: f64,
    tol: f64,
    hint: &mut Option<DVector<f64>>,
) -> f64 {
    let mut out = t_out;
    // The bounding-ball exit point should be infeasible; weak answers get a
    // little room to disagree before we take the bracket on faith.
    for _ in 0..3 {
        let q = p + d * out;
        let (ok, w) = body.contains_hinted(&q, hint.as_ref());
        if let Some(w) = w {
            *hint = Some(w);
        }
        if !ok {
            break;
        }
        out *= 1.5;
    }
    let mut lo = 0.0f64;
    let mut hi = out;
    for _ in 0..80 {
        if (hi - lo).abs() <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let q = p + d * mid;
        let (ok, w) = body.contains_hinted(&q, hint.as_ref());
        if let Some(w) = w {
            *hint = Some(w);
        }
        if ok {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
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

#[derive(Clone, Debug)]
pub struct CovarianceEstimate {
    /// Symmetrized second-moment matrix of the walk points.
    pub sigma: DMatrix<f64>,
    pub walk: WalkDiagnostics,
}

/// Covariance of the uniform distribution on the body, estimated from walk
/// points. No mean centering: the bodies are symmetric about the origin, and
/// centering would only add noise.
pub fn estimate_covariance<B: Body + Sync + ?Sized>(
    body: &B,
    n_points: usize,
    params: &WalkParams,
) -> Result<CovarianceEstimate> {
    let (points, walk) = sample_body(body, n_points, params)?;
    let m = points.nrows() as f64;
    let sigma = points.transpose() * &points / m;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(CovarianceEstimate { sigma, walk })
}

/// Inverse square root of a symmetric positive definite matrix through its
/// eigendecomposition. Eigenvalues below `1e-12` of the largest are treated
/// as rank deficiency.
pub fn inv_sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max_l = eig.eigenvalues.max();
    if !(max_l > 0.0) || !max_l.is_finite() {
        return Err(Error::SingularCovariance(format!(
            "largest eigenvalue is {max_l}"
        )));
    }
    let floor = 1e-12 * max_l;
    let mut inv_sqrt = DVector::zeros(eig.eigenvalues.len());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l < floor {
            return Err(Error::SingularCovariance(format!(
                "eigenvalue {l:.3e} below rank floor {floor:.3e}"
            )));
        }
        inv_sqrt[i] = 1.0 / l.sqrt();
    }
    let v = &eig.eigenvectors;
    let b = v * DMatrix::from_diagonal(&inv_sqrt) * v.transpose();
    // The product carries last-ulp asymmetry from rounding; the map is
    // symmetric by definition, so enforce it exactly.
    Ok((&b + b.transpose()) * 0.5)
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// The orthogonalizing map and how it was obtained.
#[derive(Clone, Debug)]
pub struct Orthogonalizer {
    /// `B = Sigma^{-1/2}` for the body covariance `Sigma`.
    pub b: DMatrix<f64>,
    pub cov: CovarianceEstimate,
}

impl Orthogonalizer {
    /// Apply to observations: `Y = X B^T` (rows are samples).
    pub fn apply(&self, x: &SampleMatrix) -> Result<SampleMatrix> {
        if x.dim() != self.b.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.b.ncols(),
                got: x.dim(),
            });
        }
        let y = &x.data * self.b.transpose();
        Ok(SampleMatrix::from_data(y, x.seed, x.model_id.clone()))
    }
}

/// Membership accuracy the covariance stage should request from its oracle
/// for an end accuracy of `eps`: `eps / (2 (n+1)^4)`. In practice the frozen
/// sample size caps the honest accuracy well above this; the figure is the
/// budget the theory asks for, and the pipeline records when it cannot be
/// met.
pub fn covariance_query_eps(eps: f64, n: usize) -> f64 {
    eps / (2.0 * ((n + 1) as f64).powi(4))
}

/// Estimate the body covariance through the membership walk and return the
/// whitened data along with the map.
pub fn orthogonalize<B: Body + Sync + ?Sized>(
    x: &SampleMatrix,
    body: &B,
    n_points: usize,
    params: &WalkParams,
) -> Result<(SampleMatrix, Orthogonalizer)> {
    if body.dim() != x.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: body.dim(),
        });
    }
    let cov = estimate_covariance(body, n_points, params)?;
    let b = inv_sqrt_spd(&cov.sigma)?;
    let orth = Orthogonalizer { b, cov };
    let y = orth.apply(x)?;
    Ok((y, orth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{Ball, CrossPolytope, Cube};

    fn rel_spectral_err(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
        spectral_norm(&(got - want)) / spectral_norm(want)
    }

    #[test]
    fn cube_covariance_is_third_identity() {
        // Uniform on [-1,1]^2 has covariance I/3 exactly.
        let cube = Cube {
            n: 2,
            half_width: 1.0,
        };
        let params = WalkParams::default_for_dim(2, 424242);
        let est = estimate_covariance(&cube, 6_000, &params).unwrap();
        let want = DMatrix::identity(2, 2) * (1.0 / 3.0);
        let err = rel_spectral_err(&est.sigma, &want);
        assert!(
            err < 0.1,
            "cube covariance off by {err:.3} relative, sigma = {}",
            est.sigma
        );
    }

    #[test]
    fn cross_polytope_covariance_is_sixth_identity() {
        // Uniform on the unit l1 ball in the plane has covariance I/6.
        let cp = CrossPolytope { n: 2, radius: 1.0 };
        let params = WalkParams::default_for_dim(2, 777);
        let est = estimate_covariance(&cp, 6_000, &params).unwrap();
        let want = DMatrix::identity(2, 2) * (1.0 / 6.0);
        let err = rel_spectral_err(&est.sigma, &want);
        assert!(
            err < 0.1,
            "cross-polytope covariance off by {err:.3} relative, sigma = {}",
            est.sigma
        );
    }

    #[test]
    fn ball_covariance_scales_with_radius() {
        // Uniform on the disk of radius 2: E r^2 = R^2/2, split over two
        // coordinates, so the covariance is the identity.
        let ball = Ball { n: 2, radius: 2.0 };
        let params = WalkParams::default_for_dim(2, 31337);
        let est = estimate_covariance(&ball, 6_000, &params).unwrap();
        let err = rel_spectral_err(&est.sigma, &DMatrix::identity(2, 2));
        assert!(err < 0.1, "disk covariance off by {err:.3} relative");
    }

    #[test]
    fn walk_is_deterministic() {
        let cube = Cube {
            n: 3,
            half_width: 1.0,
        };
        let params = WalkParams::default_for_dim(3, 99);
        let (a, _) = sample_body(&cube, 500, &params).unwrap();
        let (b, _) = sample_body(&cube, 500, &params).unwrap();
        assert_eq!(a.as_slice(), b.as_slice(), "same seed, same points");

        let other = WalkParams::default_for_dim(3, 100);
        let (c, _) = sample_body(&cube, 500, &other).unwrap();
        assert_ne!(a.as_slice(), c.as_slice(), "different seed, different walk");
    }

    #[test]
    fn walk_points_stay_inside() {
        let cp = CrossPolytope { n: 3, radius: 1.5 };
        let params = WalkParams::default_for_dim(3, 5);
        let (pts, diag) = sample_body(&cp, 400, &params).unwrap();
        for i in 0..pts.nrows() {
            let p = pts.row(i).transpose();
            assert!(cp.contains(&p), "walk point {i} escaped the body: {p:?}");
        }
        assert_eq!(diag.points, 400);
        assert!(diag.mean_chord > 0.0);
    }

    #[test]
    fn degenerate_body_reports_stuck() {
        // A body that is a single point: every chord collapses.
        struct Point;
        impl Body for Point {
            fn dim(&self) -> usize {
                2
            }
            fn inner_radius(&self) -> f64 {
                1e-12
            }
            fn outer_radius(&self) -> f64 {
                1.0
            }
            fn boundary_tol(&self) -> f64 {
                1e-12
            }
            fn contains_hinted(
                &self,
                y: &DVector<f64>,
                _hint: Option<&DVector<f64>>,
            ) -> (bool, Option<DVector<f64>>) {
                (y.norm() < 1e-9, None)
            }
        }
        let err = sample_body(&Point, 10, &WalkParams::default_for_dim(2, 1)).unwrap_err();
        assert_eq!(err.kind(), "walk_stuck");
    }

    #[test]
    fn inv_sqrt_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let b = inv_sqrt_spd(&m).unwrap();
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0]));
        assert!(rel_spectral_err(&b, &want) < 1e-12);
    }

    #[test]
    fn inv_sqrt_rejects_rank_deficiency() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        let err = inv_sqrt_spd(&m).unwrap_err();
        assert_eq!(err.kind(), "singular_covariance");
    }

    #[test]
    fn query_eps_matches_schedule() {
        // eps / (2 (n+1)^4) at n = 2 is eps / 162.
        let got = covariance_query_eps(0.1, 2);
        assert!((got - 0.1 / 162.0).abs() < 1e-15);
    }
}
