//! Convex bodies seen through membership queries.
//!
//! The sampler and the gauge bisection only need yes/no containment plus a
//! radius sandwich `r B_2 <= K <= R B_2`, so they are written against this
//! trait. Exact shapes (cube, cross-polytope, ball) validate the walk and the
//! covariance machinery against closed-form answers; the statistical
//! membership oracles implement the same trait.

use nalgebra::DVector;

/// Membership view of a centrally symmetric convex body containing the
/// origin.
pub trait Body: Sync {
    fn dim(&self) -> usize;

    /// Radius of a Euclidean ball contained in the body.
    fn inner_radius(&self) -> f64;

    /// Radius of a Euclidean ball containing the body.
    fn outer_radius(&self) -> f64;

    /// Spatial resolution at which the boundary is meaningful; bisections
    /// stop refining below this scale.
    fn boundary_tol(&self) -> f64;

    /// Containment with an optional warm-start hint (a previously found
    /// separating direction). Returns the verdict and, when the point is
    /// declared outside, a witness direction usable as the next hint.
    /// Implementations must be deterministic in `(y, hint)`.
    fn contains_hinted(
        &self,
        y: &DVector<f64>,
        hint: Option<&DVector<f64>>,
    ) -> (bool, Option<DVector<f64>>);

    fn contains(&self, y: &DVector<f64>) -> bool {
        self.contains_hinted(y, None).0
    }
}

/// `[-half_width, half_width]^n`.
#[derive(Clone, Copy, Debug)]
pub struct Cube {
    pub n: usize,
    pub half_width: f64,
}

impl Body for Cube {
    fn dim(&self) -> usize {
        self.n
    }
    fn inner_radius(&self) -> f64 {
        self.half_width
    }
    fn outer_radius(&self) -> f64 {
        self.half_width * (self.n as f64).sqrt()
    }
    fn boundary_tol(&self) -> f64 {
        self.half_width * 1e-9
    }
    fn contains_hinted(
        &self,
        y: &DVector<f64>,
        _hint: Option<&DVector<f64>>,
    ) -> (bool, Option<DVector<f64>>) {
        (y.iter().all(|v| v.abs() <= self.half_width), None)
    }
}

/// `{ x : |x|_1 <= radius }`.
#[derive(Clone, Copy, Debug)]
pub struct CrossPolytope {
    pub n: usize,
    pub radius: f64,
}

impl Body for CrossPolytope {
    fn dim(&self) -> usize {
        self.n
    }
    fn inner_radius(&self) -> f64 {
        self.radius / (self.n as f64).sqrt()
    }
    fn outer_radius(&self) -> f64 {
        self.radius
    }
    fn boundary_tol(&self) -> f64 {
        self.radius * 1e-9
    }
    fn contains_hinted(
        &self,
        y: &DVector<f64>,
        _hint: Option<&DVector<f64>>,
    ) -> (bool, Option<DVector<f64>>) {
        (y.iter().map(|v| v.abs()).sum::<f64>() <= self.radius, None)
    }
}

/// Euclidean ball.
#[derive(Clone, Copy, Debug)]
pub struct Ball {
    pub n: usize,
    pub radius: f64,
}

impl Body for Ball {
    fn dim(&self) -> usize {
        self.n
    }
    fn inner_radius(&self) -> f64 {
        self.radius
    }
    fn outer_radius(&self) -> f64 {
        self.radius
    }
    fn boundary_tol(&self) -> f64 {
        self.radius * 1e-9
    }
    fn contains_hinted(
        &self,
        y: &DVector<f64>,
        _hint: Option<&DVector<f64>>,
    ) -> (bool, Option<DVector<f64>>) {
        (y.norm() <= self.radius, None)
    }
}
