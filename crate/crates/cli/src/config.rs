//! Experiment configuration: one JSON document describing the model, the
//! sources, and every stage parameter. All numeric ranges are validated when
//! the file is loaded, so stage code never sees a malformed config.

use heavyica::rng;
use heavyica::sources::{IcaModel, SourceSpec};
use heavyica::{
    DampingConfig, Error, PipelineConfig, ProbeParams, Result, SolverParams, WalkParams,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How the mixing matrix is produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// `A = I`; observations are the sources themselves.
    Identity,
    /// Haar-random orthogonal mixing.
    UnitaryRandom,
    /// Random mixing with unit columns and condition number at most `cond`.
    RandomCond { cond: f64 },
    /// Explicit matrix, given as rows.
    Matrix { rows: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub sources: Vec<SourceSpec>,
    pub n_samples: usize,
    /// Orthogonalization accuracy target; membership queries run at
    /// `eps / (2 (n+1)^4)`.
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Singular value bounds handed to the oracle. Omitted values are taken
    /// from the constructed model (or from a model sidecar, when data comes
    /// from a file).
    #[serde(default)]
    pub s_min: Option<f64>,
    #[serde(default)]
    pub s_max: Option<f64>,
    /// Moment growth exponent of the advisory sample bound.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Moment constant of the advisory sample bound.
    #[serde(default)]
    pub moment_m: Option<f64>,
    #[serde(default)]
    pub n_freeze: Option<usize>,
    #[serde(default)]
    pub query_budget: Option<u64>,
    #[serde(default)]
    pub walk_points: Option<usize>,
    #[serde(default)]
    pub solver: Option<SolverParams>,
    #[serde(default)]
    pub walk: Option<WalkParams>,
    #[serde(default)]
    pub damping: Option<DampingConfig>,
    #[serde(default)]
    pub probe: Option<ProbeParams>,
    /// Skip orthogonalization; required for sources without a first moment.
    #[serde(default)]
    pub assume_unitary: bool,
    /// Persist intermediate sample matrices next to the report.
    #[serde(default)]
    pub keep_stages: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_eps() -> f64 {
    1.0
}

fn default_delta() -> f64 {
    0.1
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks that need no model construction.
    pub fn validate(&self) -> Result<()> {
        let n = self.sources.len();
        if n == 0 {
            return Err(Error::Config("config lists no sources".into()));
        }
        for spec in &self.sources {
            spec.validate()?;
        }
        if self.n_samples < 2 {
            return Err(Error::Config(format!(
                "n_samples must be at least 2, got {}",
                self.n_samples
            )));
        }
        let n2 = (n * n) as f64;
        if !(self.eps > 0.0 && self.eps <= n2) {
            return Err(Error::Config(format!(
                "eps must lie in (0, n^2] = (0, {n2}], got {}",
                self.eps
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if let (Some(lo), Some(hi)) = (self.s_min, self.s_max) {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!(
                    "need 0 < s_min <= s_max, got {lo} and {hi}"
                )));
            }
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::Config(format!("gamma must lie in (0, 1], got {g}")));
            }
        }
        if let Some(m) = self.moment_m {
            if !(m > 1.0) {
                return Err(Error::Config(format!("moment_m must exceed 1, got {m}")));
            }
        }
        match &self.model {
            ModelSpec::RandomCond { cond } => {
                if !(*cond >= 1.0) {
                    return Err(Error::Config(format!(
                        "condition bound must be at least 1, got {cond}"
                    )));
                }
            }
            ModelSpec::Matrix { rows }
                if (rows.len() != n || rows.iter().any(|r| r.len() != n)) =>
            {
                return Err(Error::Config(format!(
                    "mixing matrix must be {n} x {n} to match the sources"
                )));
            }
            _ => {}
        }
        Ok(())
    }

    /// Whether any source lacks a finite first absolute moment (Cauchy, or a
    /// shape parameter at or below 1). Such sources have no centroid body, so
    /// only the damping-only path can handle them.
    pub fn has_first_momentless_source(&self) -> bool {
        self.sources.iter().any(|s| s.moment_order_sup() <= 1.0)
    }

    /// Construct the model. The root seed is the config seed unless the
    /// command line overrode it.
    pub fn build_model(&self, root_seed: u64) -> Result<IcaModel> {
        let n = self.sources.len();
        let model = match &self.model {
            ModelSpec::Identity => IcaModel::identity(self.sources.clone())?,
            ModelSpec::UnitaryRandom => IcaModel::unitary_random(
                self.sources.clone(),
                rng::derive_seed(root_seed, "cli:model", 0),
            )?,
            ModelSpec::RandomCond { cond } => IcaModel::random_cond(
                self.sources.clone(),
                *cond,
                rng::derive_seed(root_seed, "cli:model", 0),
            )?,
            ModelSpec::Matrix { rows } => {
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                IcaModel::new(self.sources.clone(), DMatrix::from_row_slice(n, n, &flat))?
            }
        };
        if self.has_first_momentless_source() && !model.is_unitary(1e-9) {
            return Err(Error::Config(
                "sources without a first moment are only identifiable under a unitary mixing; \
                 use an identity, unitary_random, or orthogonal matrix model"
                    .into(),
            ));
        }
        Ok(model)
    }

    /// Stage parameters for the library pipeline. Singular value bounds fall
    /// back to the provided defaults (typically the constructed model's).
    pub fn pipeline_config(&self, s_min: f64, s_max: f64, root_seed: u64) -> PipelineConfig {
        let mut cfg = PipelineConfig::new(
            self.eps,
            self.s_min.unwrap_or(s_min),
            self.s_max.unwrap_or(s_max),
            root_seed,
        );
        cfg.delta = self.delta;
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        if let Some(m) = self.moment_m {
            cfg.moment_m = m;
        }
        if let Some(v) = self.n_freeze {
            cfg.n_freeze = v;
        }
        if let Some(v) = self.query_budget {
            cfg.query_budget = v;
        }
        if let Some(v) = self.walk_points {
            cfg.walk_points = v;
        }
        if let Some(v) = self.solver {
            cfg.solver = v;
        }
        cfg.walk = self.walk;
        if let Some(v) = self.damping {
            cfg.damping = v;
        }
        if let Some(v) = &self.probe {
            cfg.probe = v.clone();
        }
        cfg.assume_unitary = self.assume_unitary;
        cfg.keep_stages = self.keep_stages;
        cfg
    }
}
