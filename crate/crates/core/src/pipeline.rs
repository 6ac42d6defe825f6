//! End-to-end recovery: symmetrize, orthogonalize through the centroid-body
//! walk, damp, read the mixing columns out of the characteristic function,
//! and map them back through the whitening.
//!
//! Stages are seeded individually from the root seed, so a run is a pure
//! function of (data, config). Errors are tagged with the stage that raised
//! them.
//!
//! Scoring against a known mixing matrix handles the inherent ambiguity of
//! the problem: columns are recovered up to order and sign, so estimates are
//! matched by assignment on `1 - |cos|` cost before distances are read off,
//! and the Amari index ignores permutation and scaling altogether.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::damping::{damp, select_r, DampingConfig, DampingParams};
use crate::error::{Error, Result};
use crate::fourier::{recover_unitary, ProbeParams, RecoveryDiagnostics};
use crate::geometry::{
    covariance_query_eps, inv_sqrt_spd, orthogonalize, Orthogonalizer, WalkParams,
};
use crate::moments::{required_samples, MomentBound};
use crate::oracle::{MembershipOracle, OracleParams, SolverParams};
use crate::rng;
use crate::sources::{symmetrize, SampleMatrix};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Target accuracy of the orthogonalization stage. Membership queries
    /// are issued at `eps / (2 (n+1)^4)`.
    pub eps: f64,
    pub delta: f64,
    /// Bounds on the extreme singular values of the mixing matrix, used for
    /// the oracle's sandwich radii.
    pub s_min: f64,
    pub s_max: f64,
    /// Moment growth exponent for the advisory sample bound.
    pub gamma: f64,
    /// Moment constant for the advisory sample bound.
    pub moment_m: f64,
    /// Samples frozen into the membership oracle.
    pub n_freeze: usize,
    pub solver: SolverParams,
    pub query_budget: u64,
    /// Walk points behind the covariance estimate.
    pub walk_points: usize,
    /// Walk schedule; `None` picks the standard budget for the dimension.
    pub walk: Option<WalkParams>,
    pub damping: DampingConfig,
    pub probe: ProbeParams,
    /// Skip orthogonalization and treat the mixing as already orthonormal.
    /// Required for sources without a first moment.
    pub assume_unitary: bool,
    pub seed: u64,
    /// Retain intermediate sample matrices in the result.
    pub keep_stages: bool,
}

impl PipelineConfig {
    pub fn new(eps: f64, s_min: f64, s_max: f64, seed: u64) -> Self {
        PipelineConfig {
            eps,
            delta: 0.1,
            s_min,
            s_max,
            gamma: 1.0,
            moment_m: 2.0,
            n_freeze: 50_000,
            solver: SolverParams::walk_profile(),
            query_budget: 5_000_000,
            walk_points: 1_500,
            walk: None,
            damping: DampingConfig::default(),
            probe: ProbeParams::default(),
            assume_unitary: false,
            seed,
            keep_stages: false,
        }
    }
}

/// Sample matrices captured along the way, for inspection or for driving
/// stages separately.
#[derive(Clone, Debug)]
pub struct PipelineStages {
    pub symmetrized: SampleMatrix,
    pub orthogonalized: SampleMatrix,
    pub damped: SampleMatrix,
}

#[derive(Clone, Debug)]
pub struct RecoveryResult {
    /// Estimated mixing columns, unit length, in arbitrary order and sign.
    pub b_mix: DMatrix<f64>,
    /// Present unless the run assumed a unitary mixing.
    pub orthogonalizer: Option<Orthogonalizer>,
    pub damping: DampingParams,
    pub damped_rows: usize,
    pub recovery: RecoveryDiagnostics,
    /// Membership queries spent by the covariance stage.
    pub oracle_queries: u64,
    /// Accuracy requested from each membership query.
    pub eps_c: f64,
    pub match_score: Option<MatchScore>,
    pub warnings: Vec<String>,
    pub stages: Option<PipelineStages>,
}

pub fn run_pipeline(
    x: &SampleMatrix,
    true_a: Option<&DMatrix<f64>>,
    cfg: &PipelineConfig,
) -> Result<RecoveryResult> {
    let n = x.dim();
    if n < 2 {
        return Err(Error::Config(
            "the pipeline needs at least 2 dimensions".into(),
        ));
    }
    if x.n_samples() < 32 {
        return Err(Error::Config(format!(
            "{} samples is too few to attempt recovery",
            x.n_samples()
        )));
    }
    if let Some(a) = true_a {
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: a.nrows().max(a.ncols()),
            });
        }
    }

    let mut warnings = Vec::new();

    // Pairwise differencing needs an even row count; an odd straggler is
    // dropped rather than rejected.
    let rows = x.n_samples();
    let sym = if rows.is_multiple_of(2) {
        symmetrize(x)
    } else {
        let trimmed = SampleMatrix::from_data(
            x.data.rows(0, rows - 1).into_owned(),
            x.seed,
            x.model_id.clone(),
        );
        symmetrize(&trimmed)
    }
    .map_err(|e| e.at_stage("symmetrize"))?;

    let eps_c = covariance_query_eps(cfg.eps, n);
    let mut oracle_queries = 0;
    let (y, orth) = if cfg.assume_unitary {
        (sym.clone(), None)
    } else {
        let mut oracle_params = OracleParams::for_centroid(
            n,
            cfg.s_min,
            cfg.s_max,
            eps_c,
            cfg.delta,
            cfg.n_freeze.min(sym.n_samples()),
            rng::derive_seed(cfg.seed, "pipeline:oracle", 0),
        )
        .map_err(|e| e.at_stage("orthogonalize"))?
        .widened_for_symmetrized();
        oracle_params.solver = cfg.solver;
        oracle_params.query_budget = cfg.query_budget;
        let oracle = MembershipOracle::centroid(&sym, oracle_params)
            .map_err(|e| e.at_stage("orthogonalize"))?;

        let bound_eps = oracle_params.validity_eps();
        if bound_eps > 0.0 && bound_eps < 1.0 {
            if let Ok(bound) = MomentBound::new(cfg.moment_m, cfg.gamma, bound_eps, cfg.delta) {
                if let Ok(req) = required_samples(&bound, n, cfg.s_max) {
                    let frozen = oracle.frozen().n_samples() as u64;
                    if frozen < req {
                        warnings.push(format!(
                            "support estimates use {frozen} frozen samples; the worst-case bound \
                             for per-direction accuracy {bound_eps:.3e} asks for {req}"
                        ));
                    }
                }
            }
        }

        let mut walk = cfg
            .walk
            .unwrap_or_else(|| WalkParams::default_for_dim(n, 0));
        walk.seed = rng::derive_seed(cfg.seed, "pipeline:walk", 0);
        let (y, orth) = orthogonalize(&sym, &oracle, cfg.walk_points, &walk)
            .map_err(|e| e.at_stage("orthogonalize"))?;
        oracle_queries = oracle.total_queries();
        if oracle.over_budget_queries() > 0 {
            warnings.push(format!(
                "membership oracle answered {} queries beyond its budget of {}",
                oracle.over_budget_queries(),
                oracle_params.query_budget
            ));
        }
        (y, Some(orth))
    };

    let mut damping_cfg = cfg.damping;
    damping_cfg.seed = rng::derive_seed(cfg.seed, "pipeline:damping", 0);
    let damping = select_r(&y, &damping_cfg).map_err(|e| e.at_stage("select_r"))?;
    let damped = damp(
        &y,
        damping.r,
        rng::derive_seed(cfg.seed, "pipeline:damp", 0),
    )
    .map_err(|e| e.at_stage("damp"))?;
    if damped.accepted() < 1_000 {
        warnings.push(format!(
            "only {} rows survived damping; spectral estimates will be noisy",
            damped.accepted()
        ));
    }

    let mut probe = cfg.probe.clone();
    probe.seed = rng::derive_seed(cfg.seed, "pipeline:probe", 0);
    let (v, recovery) =
        recover_unitary(&damped.samples, &probe).map_err(|e| e.at_stage("recover"))?;

    // Undo the whitening: the mixing column a_i maps to B a_i in the
    // orthogonalized coordinates, so each recovered eigenvector pulls back
    // through B^{-1}.
    let b_mix = match &orth {
        None => v.clone(),
        Some(o) => {
            let b_inv = o.b.clone().try_inverse().ok_or_else(|| {
                Error::SingularCovariance("orthogonalizer is not invertible".into())
                    .at_stage("backmap")
            })?;
            let mut m = b_inv * &v;
            for mut col in m.column_iter_mut() {
                let norm = col.norm();
                if norm > 0.0 {
                    col /= norm;
                }
            }
            m
        }
    };

    let match_score = match true_a {
        Some(a) => Some(match_and_score(&b_mix, a).map_err(|e| e.at_stage("match"))?),
        None => None,
    };

    Ok(RecoveryResult {
        b_mix,
        orthogonalizer: orth,
        damping,
        damped_rows: damped.accepted(),
        recovery,
        oracle_queries,
        eps_c,
        match_score,
        warnings,
        stages: if cfg.keep_stages {
            Some(PipelineStages {
                symmetrized: sym,
                orthogonalized: y,
                damped: damped.samples,
            })
        } else {
            None
        },
    })
}

/// How well estimated columns line up with the truth, after resolving the
/// permutation and sign ambiguity by optimal assignment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchScore {
    /// `assignment[j]` is the estimated column matched to true column `j`.
    pub assignment: Vec<usize>,
    /// Sign applied to each matched estimate.
    pub signs: Vec<f64>,
    /// `|sign * est - truth|` per true column (both unit length, so each
    /// error lies in [0, 2]).
    pub column_errors: Vec<f64>,
    pub max_error: f64,
    pub mean_error: f64,
    pub amari: f64,
}

/// Match estimated mixing columns to the truth and score the result.
pub fn match_and_score(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<MatchScore> {
    let n = truth.nrows();
    if truth.ncols() != n || est.nrows() != n || est.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: est.nrows().max(est.ncols()),
        });
    }
    let est_n = unit_columns(est)?;
    let truth_n = unit_columns(truth)?;

    let mut cost = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            cost[(i, j)] = 1.0 - est_n.column(i).dot(&truth_n.column(j)).abs();
        }
    }
    let assignment = hungarian_min(&cost);

    let mut signs = vec![0.0; n];
    let mut column_errors = vec![0.0; n];
    for j in 0..n {
        let i = assignment[j];
        let dot = est_n.column(i).dot(&truth_n.column(j));
        let sign = if dot >= 0.0 { 1.0 } else { -1.0 };
        signs[j] = sign;
        column_errors[j] = (est_n.column(i) * sign - truth_n.column(j)).norm();
    }
    let max_error = column_errors.iter().cloned().fold(0.0, f64::max);
    let mean_error = column_errors.iter().sum::<f64>() / n as f64;

    let g =
        est_n.clone().try_inverse().ok_or_else(|| {
            Error::NonConvergence("estimated mixing is numerically singular".into())
        })? * &truth_n;
    let amari = amari_index(&g);

    Ok(MatchScore {
        assignment,
        signs,
        column_errors,
        max_error,
        mean_error,
        amari,
    })
}

/// Amari index of a transfer matrix: zero exactly when the matrix is a
/// signed, scaled permutation, at most 1 in general (normalized by
/// `2 n (n-1)`).
pub fn amari_index(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    if n < 2 || g.ncols() != n {
        return f64::NAN;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut max = 0.0f64;
        let mut sum = 0.0;
        for j in 0..n {
            let v = g[(i, j)].abs();
            sum += v;
            max = max.max(v);
        }
        total += sum / max.max(1e-300) - 1.0;
    }
    for j in 0..n {
        let mut max = 0.0f64;
        let mut sum = 0.0;
        for i in 0..n {
            let v = g[(i, j)].abs();
            sum += v;
            max = max.max(v);
        }
        total += sum / max.max(1e-300) - 1.0;
    }
    total / (2 * n * (n - 1)) as f64
}

/// Assignment minimizing total cost, by shortest augmenting paths with
/// potentials. Returns, for each column, the row assigned to it.
fn hungarian_min(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    debug_assert_eq!(n, cost.ncols());
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![NONE; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 0..n {
        p[n] = i;
        let mut j0 = n;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0, j)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    if p[j] != NONE {
                        u[p[j]] += delta;
                    }
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == NONE {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }
    p.truncate(n);
    p
}

/// Columns scaled to unit length; rejects zero columns.
fn unit_columns(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let norm = col.norm();
        if norm < 1e-300 || !norm.is_finite() {
            return Err(Error::Config(
                "matrix has a zero or non-finite column".into(),
            ));
        }
        col /= norm;
    }
    Ok(out)
}

/// Closest orthogonal matrix in Frobenius norm (the polar factor `U V^T` of
/// the SVD) together with the distance from orthogonality
/// `max_i |sigma_i - 1|`.
pub fn nearest_unitary(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: m.ncols(),
        });
    }
    let svd = m.clone().svd(true, true);
    let sv = &svd.singular_values;
    let max_sv = sv.max();
    if !(max_sv > 0.0) || sv.min() < 1e-12 * max_sv {
        return Err(Error::Config(
            "matrix is rank deficient; its orthogonal polar factor is not unique".into(),
        ));
    }
    let u = svd.u.as_ref().expect("requested U factor");
    let v_t = svd.v_t.as_ref().expect("requested V^T factor");
    let q = u * v_t;
    let dist = sv.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    Ok((q, dist))
}

/// Classical whitening baseline: mean-center, then apply the inverse square
/// root of the sample covariance. Heavy tails break the moments this relies
/// on, which is exactly what the centroid-body route avoids.
pub fn baseline_whitening(x: &SampleMatrix) -> Result<(SampleMatrix, DMatrix<f64>)> {
    let n = x.dim();
    let rows = x.n_samples();
    if rows < 2 {
        return Err(Error::Config("need at least 2 samples to whiten".into()));
    }
    let mut data = x.data.clone();
    let mean = data.row_mean();
    for i in 0..rows {
        for j in 0..n {
            data[(i, j)] -= mean[j];
        }
    }
    let cov = data.transpose() * &data / rows as f64;
    let b = inv_sqrt_spd(&cov)?;
    let y = &data * b.transpose();
    Ok((SampleMatrix::from_data(y, x.seed, x.model_id.clone()), b))
}
