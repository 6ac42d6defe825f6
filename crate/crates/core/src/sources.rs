//! Synthetic heavy-tailed sources and the mixing model `X = A S`.
//!
//! Sources are drawn per coordinate from one of five families. The
//! `normalize` flag rescales a family so that `E|S_i| = 1`; the scaling is
//! analytic (closed-form first absolute moments), never estimated, because
//! the normalization `E|S_i| = 1` is what pins the centroid body of the
//! sources between the cross-polytope and the cube.
//!
//! Generation is row-indexed: row `i` draws from its own derived stream, so
//! results do not depend on how rows are partitioned across workers and a
//! prefix of a longer run equals a shorter run with the same seed.

use nalgebra::{DMatrix, DVector};
use rand::distributions::Uniform as UniformDist;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, Pareto, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFamily {
    /// One-sided Pareto with density `alpha * scale^alpha / t^(alpha+1)` on
    /// `t >= scale`. Asymmetric; kept available to exercise the
    /// symmetrization reduction explicitly.
    Pareto,
    /// Sign-symmetrized Pareto: a Pareto draw with a Rademacher sign, density
    /// `(alpha/2) * scale^alpha / |t|^(alpha+1)` on `|t| >= scale`.
    SymmetricPareto,
    /// Student's t with `alpha` degrees of freedom, scaled by `scale`.
    StudentT,
    /// Cauchy with the given scale. No first moment; cannot be normalized and
    /// is only admissible on the damping-only (unitary mixing) path.
    Cauchy,
    /// Uniform on `[-scale, scale]`.
    Uniform,
    /// Centered Gaussian with standard deviation `scale`.
    Gaussian,
}

/// One source coordinate. `alpha` is the Pareto shape or Student degrees of
/// freedom and is ignored by the other families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub family: SourceFamily,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Rescale analytically so that `E|S| = 1`.
    #[serde(default)]
    pub normalize: bool,
}

fn default_scale() -> f64 {
    1.0
}

impl SourceSpec {
    pub fn new(family: SourceFamily, alpha: f64, scale: f64, normalize: bool) -> Self {
        SourceSpec {
            family,
            alpha,
            scale,
            normalize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(Error::Config(format!(
                "source scale must be positive and finite, got {}",
                self.scale
            )));
        }
        match self.family {
            SourceFamily::Pareto | SourceFamily::SymmetricPareto | SourceFamily::StudentT
                if (!self.alpha.is_finite() || self.alpha <= 0.0) =>
            {
                return Err(Error::Config(format!(
                    "{:?} needs a positive shape parameter, got {}",
                    self.family, self.alpha
                )));
            }
            _ => {}
        }
        if self.normalize && self.first_abs_moment_raw().is_none() {
            return Err(Error::Config(format!(
                "{:?} (alpha = {}) has no finite first absolute moment; cannot normalize",
                self.family, self.alpha
            )));
        }
        Ok(())
    }

    /// Closed-form `E|S|` before normalization, when it exists.
    pub fn first_abs_moment_raw(&self) -> Option<f64> {
        match self.family {
            SourceFamily::Uniform => Some(self.scale / 2.0),
            SourceFamily::Gaussian => Some(self.scale * (2.0 / std::f64::consts::PI).sqrt()),
            SourceFamily::Pareto | SourceFamily::SymmetricPareto => {
                if self.alpha > 1.0 {
                    Some(self.scale * self.alpha / (self.alpha - 1.0))
                } else {
                    None
                }
            }
            SourceFamily::StudentT => {
                if self.alpha > 1.0 {
                    let nu = self.alpha;
                    let g = (ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0)).exp();
                    Some(
                        self.scale * 2.0 * nu.sqrt() * g
                            / (std::f64::consts::PI.sqrt() * (nu - 1.0)),
                    )
                } else {
                    None
                }
            }
            SourceFamily::Cauchy => None,
        }
    }

    /// `E|S|` after the optional normalization (1.0 when normalized).
    pub fn first_abs_moment(&self) -> Option<f64> {
        if self.normalize {
            Some(1.0)
        } else {
            self.first_abs_moment_raw()
        }
    }

    /// Supremum of `p` with `E|S|^p` finite.
    pub fn moment_order_sup(&self) -> f64 {
        match self.family {
            SourceFamily::Pareto | SourceFamily::SymmetricPareto | SourceFamily::StudentT => {
                self.alpha
            }
            SourceFamily::Cauchy => 1.0,
            SourceFamily::Uniform | SourceFamily::Gaussian => f64::INFINITY,
        }
    }

    /// Whether the distribution itself is symmetric about zero.
    pub fn is_symmetric(&self) -> bool {
        !matches!(self.family, SourceFamily::Pareto)
    }
}

enum Sampler {
    Uniform(UniformDist<f64>),
    Gaussian(f64),
    Pareto(Pareto<f64>),
    SymmetricPareto(Pareto<f64>),
    StudentT(StudentT<f64>, f64),
    Cauchy(Cauchy<f64>),
}

impl Sampler {
    fn build(spec: &SourceSpec) -> Result<(Self, f64)> {
        spec.validate()?;
        let s = match spec.family {
            SourceFamily::Uniform => Sampler::Uniform(UniformDist::new(-spec.scale, spec.scale)),
            SourceFamily::Gaussian => Sampler::Gaussian(spec.scale),
            SourceFamily::Pareto => Sampler::Pareto(
                Pareto::new(spec.scale, spec.alpha).expect("parameters were validated"),
            ),
            SourceFamily::SymmetricPareto => Sampler::SymmetricPareto(
                Pareto::new(spec.scale, spec.alpha).expect("parameters were validated"),
            ),
            SourceFamily::StudentT => Sampler::StudentT(
                StudentT::new(spec.alpha).expect("parameters were validated"),
                spec.scale,
            ),
            SourceFamily::Cauchy => {
                Sampler::Cauchy(Cauchy::new(0.0, spec.scale).expect("parameters were validated"))
            }
        };
        let divisor = if spec.normalize {
            spec.first_abs_moment_raw().expect("validated above")
        } else {
            1.0
        };
        Ok((s, divisor))
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Sampler::Uniform(d) => d.sample(rng),
            Sampler::Gaussian(sigma) => {
                let z: f64 = StandardNormal.sample(rng);
                sigma * z
            }
            Sampler::Pareto(d) => d.sample(rng),
            Sampler::SymmetricPareto(d) => {
                let t = d.sample(rng);
                if rng.gen::<bool>() {
                    t
                } else {
                    -t
                }
            }
            Sampler::StudentT(d, sigma) => sigma * d.sample(rng),
            Sampler::Cauchy(d) => d.sample(rng),
        }
    }
}

/// N x n observation matrix, one sample per row, column-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMatrix {
    pub data: DMatrix<f64>,
    /// Root seed the data was derived from (0 when loaded from disk).
    pub seed: u64,
    pub model_id: Option<String>,
}

impl SampleMatrix {
    pub fn from_data(data: DMatrix<f64>, seed: u64, model_id: Option<String>) -> Self {
        SampleMatrix {
            data,
            seed,
            model_id,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Column slices of the underlying storage; `cols[j][i]` is sample `i`,
    /// coordinate `j`. This is the layout every hot loop walks.
    pub fn columns_raw(&self) -> Vec<&[f64]> {
        let n = self.data.nrows();
        let slice = self.data.as_slice();
        (0..self.data.ncols())
            .map(|j| &slice[j * n..(j + 1) * n])
            .collect()
    }

    pub fn row_vec(&self, i: usize) -> DVector<f64> {
        self.data.row(i).transpose()
    }

    /// Write as CSV with header `x1,...,xn`. Values use the shortest
    /// round-trip decimal form, so reading the file back is lossless.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
        let header: Vec<String> = (1..=self.dim()).map(|j| format!("x{j}")).collect();
        w.write_record(&header)
            .map_err(|e| Error::Csv(e.to_string()))?;
        let mut record: Vec<String> = vec![String::new(); self.dim()];
        for i in 0..self.n_samples() {
            for (j, field) in record.iter_mut().enumerate() {
                *field = format!("{}", self.data[(i, j)]);
            }
            w.write_record(&record)
                .map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a CSV written by [`write_csv`](Self::write_csv). The header must
    /// be exactly `x1,...,xn`.
    pub fn read_csv(path: &std::path::Path) -> Result<SampleMatrix> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
        let header = r.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
        let n = header.len();
        for (j, name) in header.iter().enumerate() {
            let expected = format!("x{}", j + 1);
            if name != expected {
                return Err(Error::Csv(format!(
                    "unexpected header column {:?}, expected {:?}",
                    name, expected
                )));
            }
        }
        let mut values: Vec<f64> = Vec::new();
        let mut rows = 0usize;
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
            if rec.len() != n {
                return Err(Error::Csv(format!(
                    "row {} has {} fields, expected {}",
                    rows + 1,
                    rec.len(),
                    n
                )));
            }
            for field in rec.iter() {
                let v: f64 = field
                    .parse()
                    .map_err(|e| Error::Csv(format!("bad float {:?}: {}", field, e)))?;
                values.push(v);
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::Csv("no data rows".into()));
        }
        let data = DMatrix::from_row_slice(rows, n, &values);
        Ok(SampleMatrix::from_data(data, 0, None))
    }
}

/// Draw `n_samples` independent source vectors, one column per spec.
pub fn sample_sources(specs: &[SourceSpec], n_samples: usize, seed: u64) -> Result<SampleMatrix> {
    if specs.is_empty() {
        return Err(Error::Config("no source specs given".into()));
    }
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    let built: Vec<(Sampler, f64)> = specs
        .iter()
        .map(Sampler::build)
        .collect::<Result<Vec<_>>>()?;
    let stage = rng::derive_seed(seed, "sources:rows", 0);
    let n = specs.len();
    let mut data = DMatrix::zeros(n_samples, n);
    for i in 0..n_samples {
        let mut row_rng = ChaCha8Rng::seed_from_u64(rng::indexed_seed(stage, i as u64));
        for (j, (sampler, divisor)) in built.iter().enumerate() {
            data[(i, j)] = sampler.draw(&mut row_rng) / divisor;
        }
    }
    Ok(SampleMatrix::from_data(data, seed, None))
}

/// Mixing model with unit-normalized singular value bookkeeping.
#[derive(Clone, Debug)]
pub struct IcaModel {
    pub sources: Vec<SourceSpec>,
    pub a: DMatrix<f64>,
    /// Exact extreme singular values of `a`.
    pub s_min: f64,
    pub s_max: f64,
}

impl IcaModel {
    pub fn new(sources: Vec<SourceSpec>, a: DMatrix<f64>) -> Result<Self> {
        let n = sources.len();
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: a.nrows().max(a.ncols()),
            });
        }
        for spec in &sources {
            spec.validate()?;
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("mixing matrix has non-finite entries".into()));
        }
        let svd = a.clone().svd(false, false);
        let s_max = svd.singular_values.max();
        let s_min = svd.singular_values.min();
        if !(s_min > 1e-12 * s_max && s_min > 0.0) {
            return Err(Error::Config(format!(
                "mixing matrix is numerically singular (sigma_min = {s_min:.3e})"
            )));
        }
        Ok(IcaModel {
            sources,
            a,
            s_min,
            s_max,
        })
    }

    pub fn dim(&self) -> usize {
        self.sources.len()
    }

    pub fn identity(sources: Vec<SourceSpec>) -> Result<Self> {
        let n = sources.len();
        IcaModel::new(sources, DMatrix::identity(n, n))
    }

    /// Haar-ish random orthogonal mixing (QR of a Gaussian matrix with the
    /// sign of the R diagonal fixed).
    pub fn unitary_random(sources: Vec<SourceSpec>, seed: u64) -> Result<Self> {
        let n = sources.len();
        let mut r = rng::stream(seed, "model:mixing", 0);
        let g = DMatrix::from_fn(n, n, |_, _| {
            let z: f64 = StandardNormal.sample(&mut r);
            z
        });
        let qr = g.qr();
        let rdiag = qr.r();
        let mut q = qr.q();
        for j in 0..n {
            if rdiag[(j, j)] < 0.0 {
                for i in 0..n {
                    q[(i, j)] = -q[(i, j)];
                }
            }
        }
        IcaModel::new(sources, q)
    }

    /// Random mixing with unit columns and condition number at most
    /// `max_cond`. Built as `Q1 D Q2^T` with geometric singular values, then
    /// column-normalized; the singular value ratio is shrunk until the
    /// normalized matrix meets the bound.
    pub fn random_cond(sources: Vec<SourceSpec>, max_cond: f64, seed: u64) -> Result<Self> {
        if !(max_cond >= 1.0) {
            return Err(Error::Config(format!(
                "max_cond must be at least 1, got {max_cond}"
            )));
        }
        let n = sources.len();
        let q1 =
            IcaModel::unitary_random(sources.clone(), rng::derive_seed(seed, "model:mixing", 1))?.a;
        let q2 =
            IcaModel::unitary_random(sources.clone(), rng::derive_seed(seed, "model:mixing", 2))?.a;
        let mut ratio = max_cond;
        for _ in 0..60 {
            let svals: Vec<f64> = (0..n)
                .map(|k| {
                    if n == 1 {
                        1.0
                    } else {
                        ratio.powf(-(k as f64) / (n as f64 - 1.0))
                    }
                })
                .collect();
            let d = DMatrix::from_diagonal(&DVector::from_vec(svals));
            let mut a = &q1 * d * q2.transpose();
            for j in 0..n {
                let norm = a.column(j).norm();
                for i in 0..n {
                    a[(i, j)] /= norm;
                }
            }
            let model = IcaModel::new(sources.clone(), a)?;
            if model.s_max / model.s_min <= max_cond * (1.0 + 1e-9) {
                return Ok(model);
            }
            ratio *= 0.85;
        }
        Err(Error::Config(
            "could not reach the requested condition number".into(),
        ))
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        let n = self.dim();
        let gram = self.a.transpose() * &self.a;
        (gram - DMatrix::identity(n, n)).norm() <= tol
    }

    /// Stable identifier derived from the mixing matrix and source specs.
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.a.iter() {
            h.update(v.to_le_bytes());
        }
        for s in &self.sources {
            h.update(format!("{s:?}").as_bytes());
        }
        let d = h.finalize();
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Draw source rows and mix them: `X = S A^T` (rows are observations).
    pub fn observe(&self, n_samples: usize, seed: u64) -> Result<SampleMatrix> {
        let s = sample_sources(&self.sources, n_samples, seed)?;
        mix(self, &s)
    }
}

/// Apply the mixing matrix to source samples.
pub fn mix(model: &IcaModel, s: &SampleMatrix) -> Result<SampleMatrix> {
    if s.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: s.dim(),
        });
    }
    let data = &s.data * model.a.transpose();
    let mut out = SampleMatrix::from_data(data, s.seed, Some(model.id()));
    // Exact pass-through for the identity model (0*x + 1*y is exact in IEEE).
    if model.a == DMatrix::identity(model.dim(), model.dim()) {
        out.data = s.data.clone();
    }
    Ok(out)
}

/// Pairwise difference of consecutive rows: output row `k` is
/// `row(2k) - row(2k+1)`. Forces exact central symmetry of the distribution
/// and doubles the fourth cumulant of every coordinate.
pub fn symmetrize(s: &SampleMatrix) -> Result<SampleMatrix> {
    let n_rows = s.n_samples();
    if !n_rows.is_multiple_of(2) {
        return Err(Error::OddSampleCount(n_rows));
    }
    let half = n_rows / 2;
    let n = s.dim();
    let mut data = DMatrix::zeros(half, n);
    for k in 0..half {
        for j in 0..n {
            data[(k, j)] = s.data[(2 * k, j)] - s.data[(2 * k + 1, j)];
        }
    }
    Ok(SampleMatrix::from_data(data, s.seed, s.model_id.clone()))
}

/// Empirical fourth cumulant from raw moments:
/// `m4 - 4 m3 m1 - 3 m2^2 + 12 m2 m1^2 - 6 m1^4`.
pub fn cum4(xs: &[f64]) -> Result<f64> {
    Ok(cum4_with_se(xs)?.0)
}

/// Fourth cumulant together with a delta-method standard error computed from
/// the empirical influence function.
pub fn cum4_with_se(xs: &[f64]) -> Result<(f64, f64)> {
    let n = xs.len();
    if n < 4 {
        return Err(Error::Config(format!(
            "fourth cumulant needs at least 4 samples, got {n}"
        )));
    }
    let nf = n as f64;
    let (mut m1, mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0, 0.0);
    for &x in xs {
        let x2 = x * x;
        m1 += x;
        m2 += x2;
        m3 += x2 * x;
        m4 += x2 * x2;
    }
    m1 /= nf;
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    let c4 = m4 - 4.0 * m3 * m1 - 3.0 * m2 * m2 + 12.0 * m2 * m1 * m1 - 6.0 * m1.powi(4);
    // Influence function: gradient of c4 in the raw moments.
    let d4 = 1.0;
    let d3 = -4.0 * m1;
    let d2 = -6.0 * m2 + 12.0 * m1 * m1;
    let d1 = -4.0 * m3 + 24.0 * m2 * m1 - 24.0 * m1.powi(3);
    let mut var = 0.0;
    for &x in xs {
        let x2 = x * x;
        let psi = d4 * (x2 * x2 - m4) + d3 * (x2 * x - m3) + d2 * (x2 - m2) + d1 * (x - m1);
        var += psi * psi;
    }
    var /= nf;
    Ok((c4, (var / nf).sqrt()))
}
