//! Weak membership oracles for the centroid body and its polar.
//!
//! For observations `X` the centroid body is the convex body with support
//! function `h(u) = E|<u, X>|`. A frozen sample set gives the estimate
//! `H(u) = (1/N) sum_i |<x_i, u>|`, exact on the frozen set, positively
//! homogeneous and subadditive in `u`.
//!
//! * **Polar membership** is closed-form: the polar body's radial function
//!   along `y` is `1 / h(y/|y|)`, so `y` is feasible iff `|y| <= 1/H(y/|y|)`.
//! * **Centroid membership** asks whether `<y, u> <= H(u)` for every unit
//!   `u`. We minimize the convex, 1-homogeneous gap `f(u) = H(u) - <y, u>`
//!   over the unit ball by projected subgradient descent with multi-start
//!   (the axes, the direction of `y`, an optional warm-start hint, and a
//!   deterministic random direction). A certified `f(u) < -eps/2` reports
//!   infeasible; otherwise the query is feasible-by-default, flagged as
//!   `defaulted` when the search saw negative values short of the threshold.
//!
//! The tolerance split: the statistical budget for `H` along a direction is
//! `eps1 = eps * r / (2 (1 + r))` (with `r` the inner radius), which is what
//! sample sizing should target; the decision threshold spends `eps / 2`.
//! Since `f` is measured in the same absolute units as `eps`, a certificate
//! `f(u) < -eps/2` puts `y` outside the body whenever the estimate is good to
//! `eps1 < eps/2`, and a silent search leaves `y` within `eps/2 + eps1 < eps`
//! of it. That is exactly the weak membership contract: answers may be
//! arbitrary only in the `±eps` shell of the boundary.
//!
//! Oracles are immutable after construction and safe to query concurrently;
//! identical queries return identical answers. Each membership call counts
//! against a query budget `Q`, standing in for a per-query failure allowance
//! `delta / Q`; exceeding it only raises a diagnostic counter.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::body::Body;
use crate::error::{Error, Result};
use crate::moments::raw_abs_moment;
use crate::rng;
use crate::sources::SampleMatrix;

/// Knobs of the subgradient search inside a centroid membership query.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SolverParams {
    /// Iteration cap per start.
    pub max_iters: usize,
    /// Stop a start after this many non-improving iterations.
    pub patience: usize,
    /// Extra deterministic random starts beyond the axes and `y` itself.
    pub random_starts: usize,
    /// Base step length; the step at iteration `k` is `step_scale/sqrt(k)`.
    pub step_scale: f64,
    /// Drop the `2n` axis starts, keeping only the hint, the query direction
    /// and the random starts. Bisection queries arrive with a warm hint from
    /// the previous probe on the same ray, which makes the axes redundant;
    /// standalone queries should keep them.
    #[serde(default)]
    pub lean_starts: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            max_iters: 80,
            patience: 12,
            random_starts: 1,
            step_scale: 0.5,
            lean_starts: false,
        }
    }
}

impl SolverParams {
    /// Lighter budget for the inner loop of chord bisections, where a warm
    /// hint usually certifies immediately.
    pub fn walk_profile() -> Self {
        SolverParams {
            max_iters: 16,
            patience: 5,
            random_starts: 1,
            step_scale: 0.5,
            lean_starts: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OracleParams {
    /// Weak membership tolerance, in the absolute units of the data.
    pub eps: f64,
    /// Total failure allowance across the query budget.
    pub delta: f64,
    /// Radius of a ball known to sit inside the body.
    pub r_inner: f64,
    /// Radius of a ball known to contain the body.
    pub r_outer: f64,
    /// Number of samples frozen at construction.
    pub n_freeze: usize,
    pub seed: u64,
    /// Query budget `Q`; `delta/Q` is the per-query allowance.
    pub query_budget: u64,
    pub solver: SolverParams,
}

impl OracleParams {
    fn validate(&self, n: usize) -> Result<()> {
        let n2 = (n * n) as f64;
        if !(self.eps > 0.0 && self.eps <= n2) {
            return Err(Error::Config(format!(
                "oracle eps must lie in (0, n^2] = (0, {n2}], got {}",
                self.eps
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "oracle delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.r_inner > 0.0 && self.r_outer >= self.r_inner) {
            return Err(Error::Config(format!(
                "need 0 < r_inner <= r_outer, got {} and {}",
                self.r_inner, self.r_outer
            )));
        }
        if self.n_freeze == 0 {
            return Err(Error::Config("n_freeze must be positive".into()));
        }
        if self.query_budget == 0 {
            return Err(Error::Config("query_budget must be positive".into()));
        }
        Ok(())
    }

    /// Parameters for the centroid body of `X = A S` with normalized
    /// symmetric sources: `(s_min/sqrt(n)) B_2 <= Gamma X <= (s_max sqrt(n)) B_2`.
    pub fn for_centroid(
        n: usize,
        s_min: f64,
        s_max: f64,
        eps: f64,
        delta: f64,
        n_freeze: usize,
        seed: u64,
    ) -> Result<Self> {
        let sqrt_n = (n as f64).sqrt();
        let p = OracleParams {
            eps,
            delta,
            r_inner: s_min / sqrt_n,
            r_outer: s_max * sqrt_n,
            n_freeze,
            seed,
            query_budget: 100_000,
            solver: SolverParams::default(),
        };
        p.validate(n)?;
        Ok(p)
    }

    /// Parameters for the polar of the centroid body:
    /// `(1/(sqrt(n) s_max)) B_2 <= (Gamma X)^o <= (sqrt(n)/s_min) B_2`.
    pub fn for_polar(
        n: usize,
        s_min: f64,
        s_max: f64,
        eps: f64,
        delta: f64,
        n_freeze: usize,
        seed: u64,
    ) -> Result<Self> {
        let sqrt_n = (n as f64).sqrt();
        let p = OracleParams {
            eps,
            delta,
            r_inner: 1.0 / (sqrt_n * s_max),
            r_outer: sqrt_n / s_min,
            n_freeze,
            seed,
            query_budget: 100_000,
            solver: SolverParams::default(),
        };
        p.validate(n)?;
        Ok(p)
    }

    /// Pairwise differencing scales `E|S_i|` into `[1, 2]`; widen the outer
    /// radius accordingly when the oracle is built over symmetrized data.
    pub fn widened_for_symmetrized(mut self) -> Self {
        self.r_outer *= 2.0;
        self
    }

    /// Statistical accuracy the support estimate should meet per direction:
    /// `eps1 = eps * r / (2 (1 + r))`.
    pub fn validity_eps(&self) -> f64 {
        self.eps * self.r_inner / (2.0 * (1.0 + self.r_inner))
    }

    /// Infeasibility certification threshold (`eps/2`).
    pub fn decision_margin(&self) -> f64 {
        self.eps * 0.5
    }

    /// Failure allowance spent per membership query.
    pub fn delta_per_query(&self) -> f64 {
        self.delta / self.query_budget as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Feasible,
    Infeasible,
}

/// Answer to one weak membership query.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MembershipDecision {
    pub verdict: Verdict,
    /// Signed distance proxy: positive inside, negative outside. For the
    /// centroid oracle this is the smallest support gap found; for the polar
    /// oracle the radial slack `1/H(theta) - |y|`.
    pub margin: f64,
    /// Support-function evaluations spent on this query.
    pub queries_used: u64,
    /// Feasible-by-default: the search saw negative gaps but could not
    /// certify past the threshold before the budget ran out.
    pub defaulted: bool,
}

impl MembershipDecision {
    pub fn is_feasible(&self) -> bool {
        self.verdict == Verdict::Feasible
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BodyTag {
    Centroid,
    Polar,
}

/// Weak membership oracle over a frozen sample set.
pub struct MembershipOracle {
    frozen: SampleMatrix,
    params: OracleParams,
    tag: BodyTag,
    queries: AtomicU64,
    over_budget: AtomicU64,
}

impl MembershipOracle {
    /// Oracle for the centroid body itself.
    pub fn centroid(samples: &SampleMatrix, params: OracleParams) -> Result<Self> {
        Self::build(samples, params, BodyTag::Centroid)
    }

    /// Oracle for the polar of the centroid body.
    pub fn polar(samples: &SampleMatrix, params: OracleParams) -> Result<Self> {
        Self::build(samples, params, BodyTag::Polar)
    }

    fn build(samples: &SampleMatrix, params: OracleParams, tag: BodyTag) -> Result<Self> {
        let n = samples.dim();
        if n == 0 {
            return Err(Error::Config("samples have dimension zero".into()));
        }
        params.validate(n)?;
        let keep = params.n_freeze.min(samples.n_samples());
        if keep < 2 {
            return Err(Error::Config(format!(
                "cannot freeze {keep} samples; need at least 2"
            )));
        }
        // Freeze a deterministic prefix: queries must be reproducible and
        // independent of later data growth.
        let frozen = SampleMatrix::from_data(
            samples.data.rows(0, keep).into_owned(),
            samples.seed,
            samples.model_id.clone(),
        );
        Ok(MembershipOracle {
            frozen,
            params,
            tag,
            queries: AtomicU64::new(0),
            over_budget: AtomicU64::new(0),
        })
    }

    pub fn params(&self) -> &OracleParams {
        &self.params
    }

    pub fn frozen(&self) -> &SampleMatrix {
        &self.frozen
    }

    /// Support function estimate `H(u)` on the frozen set (no normalization
    /// of `u`; 1-homogeneous).
    pub fn support_fn(&self, u: &DVector<f64>) -> f64 {
        raw_abs_moment(&self.frozen, u.as_slice())
    }

    /// Membership queries answered so far.
    pub fn total_queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    /// Queries beyond the declared budget (diagnostic only).
    pub fn over_budget_queries(&self) -> u64 {
        self.over_budget.load(Ordering::Relaxed)
    }

    fn count_query(&self) {
        let q = self.queries.fetch_add(1, Ordering::Relaxed) + 1;
        if q > self.params.query_budget {
            self.over_budget.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Polar weak membership: feasible iff `|y| <= 1/H(y/|y|)`.
    pub fn polar_membership(&self, y: &DVector<f64>) -> Result<MembershipDecision> {
        if self.tag != BodyTag::Polar {
            return Err(Error::Config(
                "polar_membership called on a centroid-body oracle".into(),
            ));
        }
        self.count_query();
        Ok(self.polar_decision(y))
    }

    fn polar_decision(&self, y: &DVector<f64>) -> MembershipDecision {
        let norm = y.norm();
        if norm < 1e-300 {
            return MembershipDecision {
                verdict: Verdict::Feasible,
                margin: self.params.r_inner,
                queries_used: 0,
                defaulted: false,
            };
        }
        let theta = y / norm;
        let h = raw_abs_moment(&self.frozen, theta.as_slice());
        let radial = if h > 1e-300 { 1.0 / h } else { f64::INFINITY };
        let margin = radial - norm;
        MembershipDecision {
            verdict: if margin >= 0.0 {
                Verdict::Feasible
            } else {
                Verdict::Infeasible
            },
            margin,
            queries_used: 1,
            defaulted: false,
        }
    }

    /// Centroid-body weak membership.
    pub fn centroid_membership(&self, y: &DVector<f64>) -> Result<MembershipDecision> {
        Ok(self.centroid_membership_hinted(y, None)?.0)
    }

    /// Centroid membership with a warm-start hint; deterministic in
    /// `(y, hint)`. Returns the decision and, when infeasible, the violated
    /// direction for use as the next hint.
    pub fn centroid_membership_hinted(
        &self,
        y: &DVector<f64>,
        hint: Option<&DVector<f64>>,
    ) -> Result<(MembershipDecision, Option<DVector<f64>>)> {
        if self.tag != BodyTag::Centroid {
            return Err(Error::Config(
                "centroid_membership called on a polar-body oracle".into(),
            ));
        }
        if y.len() != self.frozen.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.frozen.dim(),
                got: y.len(),
            });
        }
        self.count_query();
        Ok(self.centroid_decision(y, hint))
    }

    fn centroid_decision(
        &self,
        y: &DVector<f64>,
        hint: Option<&DVector<f64>>,
    ) -> (MembershipDecision, Option<DVector<f64>>) {
        let n = self.frozen.dim();
        let tau = self.params.decision_margin();
        let norm_y = y.norm();

        // Inside the guaranteed inner ball: feasible without touching data.
        if norm_y <= self.params.r_inner * (1.0 - 1e-12) {
            return (
                MembershipDecision {
                    verdict: Verdict::Feasible,
                    margin: self.params.r_inner - norm_y,
                    queries_used: 0,
                    defaulted: false,
                },
                None,
            );
        }

        let mut starts: Vec<DVector<f64>> = Vec::with_capacity(2 * n + 3);
        if let Some(h) = hint {
            let hn = h.norm();
            if hn > 1e-300 {
                starts.push(h / hn);
            }
        }
        if norm_y > 1e-300 {
            starts.push(y / norm_y);
        }
        if !self.params.solver.lean_starts {
            for j in 0..n {
                let mut e = DVector::zeros(n);
                e[j] = 1.0;
                starts.push(e.clone());
                e[j] = -1.0;
                starts.push(e);
            }
        }
        if self.params.solver.random_starts > 0 {
            let mut r = rng::stream(self.params.seed, "oracle:solver", fnv64(y));
            for _ in 0..self.params.solver.random_starts {
                starts.push(random_unit(n, &mut r));
            }
        }

        let solver = &self.params.solver;
        let mut best_f = f64::INFINITY;
        let mut best_u: Option<DVector<f64>> = None;
        let mut evals: u64 = 0;
        let mut saw_negative = false;
        let mut g = DVector::zeros(n);

        'starts: for start in &starts {
            let mut u = start.clone();
            let mut local_best = f64::INFINITY;
            let mut stall = 0usize;
            for k in 1..=solver.max_iters {
                let f_ball = self.support_gap(&u, y, &mut g);
                evals += 1;
                let un = u.norm();
                if un < 1e-12 {
                    break;
                }
                // Homogeneity: the gap at the unit direction is f(u)/|u|.
                let f_dir = f_ball / un;
                if f_dir < 0.0 {
                    saw_negative = true;
                }
                if f_dir < best_f {
                    best_f = f_dir;
                    best_u = Some(&u / un);
                }
                if best_f < -tau * (1.0 + 1e-9) {
                    break 'starts;
                }
                if f_dir < local_best - 1e-14 * (1.0 + f_dir.abs()) {
                    local_best = f_dir;
                    stall = 0;
                } else {
                    stall += 1;
                    if stall > solver.patience {
                        break;
                    }
                }
                let gn = g.norm();
                if gn < 1e-300 {
                    break;
                }
                let step = solver.step_scale / (k as f64).sqrt();
                u.axpy(-step / gn, &g, 1.0);
                let un = u.norm();
                if un > 1.0 {
                    u /= un;
                }
            }
        }

        if best_f < -tau {
            let witness = best_u.clone();
            (
                MembershipDecision {
                    verdict: Verdict::Infeasible,
                    margin: best_f,
                    queries_used: evals,
                    defaulted: false,
                },
                witness,
            )
        } else {
            (
                MembershipDecision {
                    verdict: Verdict::Feasible,
                    margin: best_f,
                    queries_used: evals,
                    // Negative gaps were seen but none certified: the point
                    // sits in the ambiguity shell and feasible is a default.
                    defaulted: saw_negative,
                },
                None,
            )
        }
    }

    /// One pass over the frozen set: value and subgradient of
    /// `f(u) = H(u) - <y, u>`.
    fn support_gap(&self, u: &DVector<f64>, y: &DVector<f64>, g: &mut DVector<f64>) -> f64 {
        let cols = self.frozen.columns_raw();
        let n_s = self.frozen.n_samples();
        let nf = n_s as f64;
        let mut f = 0.0;
        // Branchless sign handling keeps the hot loop vectorizable; at d = 0
        // either sign is a valid subgradient.
        match cols.len() {
            2 => {
                let (u0, u1) = (u[0], u[1]);
                let (c0, c1) = (cols[0], cols[1]);
                let (mut g0, mut g1) = (0.0, 0.0);
                for i in 0..n_s {
                    let d = u0 * c0[i] + u1 * c1[i];
                    let s = 1.0f64.copysign(d);
                    f += d.abs();
                    g0 += s * c0[i];
                    g1 += s * c1[i];
                }
                g[0] = g0 / nf - y[0];
                g[1] = g1 / nf - y[1];
            }
            3 => {
                let (u0, u1, u2) = (u[0], u[1], u[2]);
                let (c0, c1, c2) = (cols[0], cols[1], cols[2]);
                let (mut g0, mut g1, mut g2) = (0.0, 0.0, 0.0);
                for i in 0..n_s {
                    let d = u0 * c0[i] + u1 * c1[i] + u2 * c2[i];
                    let s = 1.0f64.copysign(d);
                    f += d.abs();
                    g0 += s * c0[i];
                    g1 += s * c1[i];
                    g2 += s * c2[i];
                }
                g[0] = g0 / nf - y[0];
                g[1] = g1 / nf - y[1];
                g[2] = g2 / nf - y[2];
            }
            _ => {
                g.fill(0.0);
                for i in 0..n_s {
                    let mut d = 0.0;
                    for (j, col) in cols.iter().enumerate() {
                        d += u[j] * col[i];
                    }
                    let s = 1.0f64.copysign(d);
                    f += d.abs();
                    for (j, col) in cols.iter().enumerate() {
                        g[j] += s * col[i];
                    }
                }
                for j in 0..cols.len() {
                    g[j] = g[j] / nf - y[j];
                }
            }
        }
        f / nf - u.dot(y)
    }
}

impl Body for MembershipOracle {
    fn dim(&self) -> usize {
        self.frozen.dim()
    }
    fn inner_radius(&self) -> f64 {
        self.params.r_inner
    }
    fn outer_radius(&self) -> f64 {
        self.params.r_outer
    }
    fn boundary_tol(&self) -> f64 {
        self.params.eps * 0.25
    }
    fn contains_hinted(
        &self,
        y: &DVector<f64>,
        hint: Option<&DVector<f64>>,
    ) -> (bool, Option<DVector<f64>>) {
        self.count_query();
        match self.tag {
            BodyTag::Polar => (self.polar_decision(y).is_feasible(), None),
            BodyTag::Centroid => {
                let (d, witness) = self.centroid_decision(y, hint);
                (d.is_feasible(), witness)
            }
        }
    }
}

/// Minkowski functional by bisection: the returned `t` satisfies `y/t` on the
/// (tolerance-level) boundary of the body, so `t < 1` means `y` is interior
/// and `t > 1` exterior. Homogeneous: `gauge(c y) = c gauge(y)` up to the
/// bisection tolerance.
pub fn gauge<B: Body + ?Sized>(body: &B, y: &DVector<f64>) -> Result<f64> {
    let norm = y.norm();
    if norm < 1e-300 || !norm.is_finite() {
        return Err(Error::ZeroDirection);
    }
    let theta = y / norm;
    let mut hi = body.outer_radius() * 1.05;
    let mut expansions = 0;
    while body.contains(&(&theta * hi)) {
        hi *= 2.0;
        expansions += 1;
        if expansions > 6 {
            return Err(Error::NonConvergence(format!(
                "no exterior point along the ray within {hi:.3e}"
            )));
        }
    }
    let mut lo = 0.0f64;
    let tol = body.boundary_tol().max(hi * 1e-14);
    for _ in 0..90 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if body.contains(&(&theta * mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if hi - lo > tol {
        return Err(Error::NonConvergence(
            "bisection interval failed to shrink".into(),
        ));
    }
    if lo == 0.0 {
        return Err(Error::NonConvergence(
            "no feasible point along the ray; the body may not contain the origin".into(),
        ));
    }
    let boundary = 0.5 * (lo + hi);
    Ok(norm / boundary)
}

fn fnv64(y: &DVector<f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in y.iter() {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn random_unit(n: usize, r: &mut rand_chacha::ChaCha8Rng) -> DVector<f64> {
    use rand_distr::{Distribution, StandardNormal};
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
