//! Report and sidecar schemas. Reports are plain JSON with every key present
//! on success; failures are a single `{stage, error_kind, message}` object.
//! Matrices are serialized as nested row arrays with full-precision decimals.

use heavyica::pipeline::{MatchScore, RecoveryResult};
use heavyica::sources::{IcaModel, SourceSpec};
use heavyica::{DampingParams, Error, WalkDiagnostics};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn rows_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, Error> {
    let r = rows.len();
    if r == 0 || rows.iter().any(|row| row.len() != rows[0].len()) {
        return Err(Error::Config("matrix rows are empty or ragged".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(r, rows[0].len(), &flat))
}

/// Ground truth written next to generated data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub a: Vec<Vec<f64>>,
    pub s_min: f64,
    pub s_max: f64,
    pub sources: Vec<SourceSpec>,
    pub n_samples: usize,
    /// Root seed of the run; stage seeds derive from it.
    pub seed: u64,
    /// Seed the source rows were drawn with.
    pub data_seed: u64,
    pub model_id: String,
}

impl ModelSidecar {
    pub fn new(model: &IcaModel, n_samples: usize, seed: u64, data_seed: u64) -> Self {
        ModelSidecar {
            a: matrix_rows(&model.a),
            s_min: model.s_min,
            s_max: model.s_max,
            sources: model.sources.clone(),
            n_samples,
            seed,
            data_seed,
            model_id: model.id(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchReport {
    pub assignment: Vec<usize>,
    pub signs: Vec<f64>,
    pub per_column_error: Vec<f64>,
    pub max_error: f64,
    pub mean_error: f64,
    pub amari_index: f64,
}

impl From<&MatchScore> for MatchReport {
    fn from(s: &MatchScore) -> Self {
        MatchReport {
            assignment: s.assignment.clone(),
            signs: s.signs.clone(),
            per_column_error: s.column_errors.clone(),
            max_error: s.max_error,
            mean_error: s.mean_error,
            amari_index: s.amari,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OrthogonalizerReport {
    /// Whitening map `B = Sigma^{-1/2}`, rows.
    pub b: Vec<Vec<f64>>,
    /// Covariance of the uniform distribution on the sampled body, rows.
    pub sigma: Vec<Vec<f64>>,
    pub walk: WalkDiagnostics,
}

#[derive(Serialize)]
pub struct PipelineReport {
    pub dim: usize,
    pub rows_in: usize,
    pub seed: u64,
    /// Estimated mixing columns (unit length, arbitrary order and sign).
    pub b_mix: Vec<Vec<f64>>,
    pub match_score: Option<MatchReport>,
    pub orthogonalizer: Option<OrthogonalizerReport>,
    pub damping: DampingParams,
    pub damped_rows: usize,
    pub recovery: heavyica::fourier::RecoveryDiagnostics,
    pub oracle_queries: u64,
    pub eps_c: f64,
    /// Set when the frozen sample count falls below the worst-case bound for
    /// the requested per-direction accuracy.
    pub sample_budget_warning: Option<String>,
    pub warnings: Vec<String>,
}

impl PipelineReport {
    pub fn new(res: &RecoveryResult, dim: usize, rows_in: usize, seed: u64) -> Self {
        PipelineReport {
            dim,
            rows_in,
            seed,
            b_mix: matrix_rows(&res.b_mix),
            match_score: res.match_score.as_ref().map(MatchReport::from),
            orthogonalizer: res.orthogonalizer.as_ref().map(|o| OrthogonalizerReport {
                b: matrix_rows(&o.b),
                sigma: matrix_rows(&o.cov.sigma),
                walk: o.cov.walk,
            }),
            damping: res.damping.clone(),
            damped_rows: res.damped_rows,
            recovery: res.recovery.clone(),
            oracle_queries: res.oracle_queries,
            eps_c: res.eps_c,
            sample_budget_warning: sample_budget_warning(&res.warnings),
            warnings: res.warnings.clone(),
        }
    }
}

/// The pipeline flags an undersized frozen set with a warning mentioning the
/// worst-case bound; surface it as its own field.
pub fn sample_budget_warning(warnings: &[String]) -> Option<String> {
    warnings
        .iter()
        .find(|w| w.contains("frozen samples"))
        .cloned()
}

#[derive(Serialize)]
pub struct OrthogonalizeReport {
    pub dim: usize,
    pub rows_in: usize,
    pub rows_symmetrized: usize,
    pub seed: u64,
    pub b: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub walk: WalkDiagnostics,
    pub oracle_queries: u64,
    pub eps_c: f64,
    pub sample_budget_warning: Option<String>,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
pub struct DampReport {
    pub dim: usize,
    pub rows_in: usize,
    pub seed: u64,
    pub params: DampingParams,
    /// Fraction of rows kept by the realized rejection.
    pub acceptance_rate: f64,
    pub accepted: usize,
    pub attempted: usize,
    pub bound_check: heavyica::damping::Cum4BoundReport,
}

#[derive(Serialize)]
pub struct RecoverReport {
    pub dim: usize,
    pub rows_in: usize,
    pub seed: u64,
    /// Estimated orthonormal columns in the coordinates of the input data.
    pub v: Vec<Vec<f64>>,
    pub recovery: heavyica::fourier::RecoveryDiagnostics,
    pub match_score: Option<MatchReport>,
}

#[derive(Serialize)]
pub struct EvaluateReport {
    pub dim: usize,
    pub match_score: MatchReport,
}

/// One paired trial: eigenvalue spread (smallest over largest eigenvalue of
/// `(MA)^T MA`) for the centroid map and for covariance whitening. Larger
/// means better conditioned; the row is a win when the centroid map's spread
/// is larger.
#[derive(Serialize)]
pub struct CompareSeedRow {
    pub seed_index: u64,
    pub centroid_spread: f64,
    pub whitening_spread: f64,
    pub centroid_won: bool,
}

#[derive(Serialize)]
pub struct CompareBaselineReport {
    pub trials: usize,
    pub centroid_wins: usize,
    pub rows: Vec<CompareSeedRow>,
}

/// What a failed run prints: the stage that raised the error, the machine
/// readable kind, and the human message.
#[derive(Serialize)]
pub struct FailureReport {
    pub stage: String,
    pub error_kind: String,
    pub message: String,
}

impl FailureReport {
    pub fn from_error(e: &Error, fallback_stage: &str) -> Self {
        FailureReport {
            stage: e.stage().unwrap_or(fallback_stage).to_string(),
            error_kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}
