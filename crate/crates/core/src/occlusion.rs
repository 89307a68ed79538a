//! Monte-Carlo occlusion probability for a Gaussian target and the
//! convex-concave machinery used to optimize it.
//!
//! A robot at `p` is occluded from a target point `z` by obstacle disc
//! `(o, R)` when `R / |o - z| >= dist(p, z, o) / |p - z|` and the obstacle
//! lies between the two. The slack form of that test is
//!
//! ```text
//! xi >= R^2 |p - g|^2 / (|o - g|^2 dist^2(p, g, o))
//!    <=>  Phi(p, xi) + Theta(p) <= 0,
//! Phi   = R^2 |p - g|^2 / xi            (convex, perspective of a quadratic)
//! Theta = -|o - g|^2 dist^2(p, g, o)    (concave quadratic in p)
//! ```
//!
//! `Theta` is replaced by its tangent at an expansion point, which
//! over-estimates it and turns the constraint into a rotated cone.

use nalgebra::Matrix2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{cross, perp, point_to_sight_line_distance, OcclusionGeom, Point2, Vector2, GEOM_TOL};

/// Lower bound on the occlusion slack so the perspective term stays defined.
pub const XI_FLOOR: f64 = 1e-6;
/// Upper clamp on the occlusion slack for samples whose sight line passes
/// through the robot.
pub const XI_CAP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianTarget {
    pub mean: Point2,
    pub covariance: Matrix2<f64>,
}

impl GaussianTarget {
    pub fn new(mean: Point2, covariance: Matrix2<f64>) -> Result<Self> {
        let t = Self { mean, covariance };
        t.check()?;
        Ok(t)
    }

    pub fn isotropic(mean: Point2, variance: f64) -> Result<Self> {
        Self::new(mean, Matrix2::identity() * variance)
    }

    fn check(&self) -> Result<()> {
        let c = &self.covariance;
        let scale = c.abs().max().max(1.0);
        if (c[(0, 1)] - c[(1, 0)]).abs() > 1e-12 * scale {
            return Err(Error::DegenerateGeometry("covariance is not symmetric".into()));
        }
        let tr = c.trace();
        let det = c.determinant();
        if !(det >= 0.0 && tr >= 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(())
    }

    fn cholesky(&self) -> Result<Matrix2<f64>> {
        self.covariance
            .cholesky()
            .map(|c| c.l())
            .filter(|l| l[(0, 0)] > 0.0 && l[(1, 1)] > 0.0)
            .ok_or(Error::NotPositiveDefinite)
    }
}

/// How sample weights are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `Q_i` proportional to the target density at `g_i`.
    #[default]
    Density,
    /// `Q_i = 1 / M`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Point2>,
    pub weights: Vec<f64>,
    pub seed: u64,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn empty(seed: u64) -> Self {
        Self {
            samples: Vec::new(),
            weights: Vec::new(),
            seed,
        }
    }
}

/// Draws `count` i.i.d. samples from the target in a fixed sequential order.
pub fn draw_samples(target: &GaussianTarget, count: usize, seed: u64, mode: WeightMode) -> Result<SampleSet> {
    if count == 0 {
        return Err(Error::DegenerateInput("sample count must be at least 1".into()));
    }
    let l = target.cholesky()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    let mut mahalanobis = Vec::with_capacity(count);
    for _ in 0..count {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        let n = Vector2::new(a, b);
        samples.push(target.mean + l * n);
        mahalanobis.push(n.norm_squared());
    }
    let weights = match mode {
        WeightMode::Uniform => vec![1.0 / count as f64; count],
        WeightMode::Density => {
            // pdf(g_i) up to a shared constant; the shift by the smallest
            // exponent keeps the largest term at exactly one.
            let m0 = mahalanobis.iter().cloned().fold(f64::INFINITY, f64::min);
            let raw: Vec<f64> = mahalanobis.iter().map(|m| (-0.5 * (m - m0)).exp()).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / total).collect()
        }
    };
    Ok(SampleSet { samples, weights, seed })
}

/// True when obstacle `geom` hides the target point `z` from `p`.
pub fn occluded(p: &Point2, z: &Point2, geom: &OcclusionGeom) -> Result<bool> {
    let oz = geom.center - z;
    let oz_len = oz.norm();
    if oz_len < GEOM_TOL {
        return Err(Error::DegenerateGeometry("target point at obstacle center".into()));
    }
    let pz = p - z;
    let pz_len2 = pz.norm_squared();
    if pz_len2 < GEOM_TOL * GEOM_TOL {
        return Ok(false);
    }
    if !between(p, z, &geom.center) {
        return Ok(false);
    }
    let dist = point_to_sight_line_distance(p, z, &geom.center)?;
    Ok(geom.radius * pz_len2.sqrt() >= dist * oz_len)
}

/// Whether the projection of `o` onto segment `(p, z)` falls strictly inside it.
pub fn between(p: &Point2, z: &Point2, o: &Point2) -> bool {
    let seg = z - p;
    let len2 = seg.norm_squared();
    if len2 == 0.0 {
        return false;
    }
    let t = (o - p).dot(&seg) / len2;
    t > 0.0 && t < 1.0
}

fn sample_occluded(p: &Point2, g: &Point2, geoms: &[OcclusionGeom]) -> bool {
    geoms.iter().any(|geom| occluded(p, g, geom).unwrap_or(false))
}

/// Weighted fraction of samples hidden by at least one obstacle.
///
/// Per-sample indicators are computed in parallel and summed in index order.
pub fn occlusion_probability(p: &Point2, samples: &SampleSet, geoms: &[OcclusionGeom]) -> f64 {
    if geoms.is_empty() {
        return 0.0;
    }
    let hidden: Vec<bool> = samples
        .samples
        .par_iter()
        .map(|g| sample_occluded(p, g, geoms))
        .collect();
    hidden
        .iter()
        .zip(&samples.weights)
        .filter(|(h, _)| **h)
        .fold(0.0, |acc, (_, w)| acc + w)
        .clamp(0.0, 1.0)
}

/// Smallest slack satisfying the fractional occlusion constraint; `>= 1`
/// exactly when the (gate-free) occlusion inequality holds.
pub fn xi_tight(p: &Point2, g: &Point2, geom: &OcclusionGeom) -> Result<f64> {
    let og2 = (geom.center - g).norm_squared();
    if og2 < GEOM_TOL * GEOM_TOL {
        return Err(Error::DegenerateGeometry("sample at obstacle center".into()));
    }
    let dist = point_to_sight_line_distance(p, g, &geom.center)?;
    if dist < GEOM_TOL {
        return Err(Error::OnSightLine);
    }
    let r2 = geom.radius * geom.radius;
    Ok(r2 * (p - g).norm_squared() / (og2 * dist * dist))
}

/// Concave term `-|o - g|^2 dist^2(p, g, o)`, which equals `-((o - g)^perp · (p - g))^2`.
pub fn theta(p: &Point2, g: &Point2, geom: &OcclusionGeom) -> f64 {
    let c = cross(&(geom.center - g), &(p - g));
    -c * c
}

pub fn theta_gradient(p: &Point2, g: &Point2, geom: &OcclusionGeom) -> Vector2 {
    let n = perp(&(geom.center - g));
    n * (-2.0 * n.dot(&(p - g)))
}

/// Affine function `gradient · p + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub gradient: Vector2,
    pub offset: f64,
}

impl Affine2 {
    pub fn eval(&self, p: &Point2) -> f64 {
        self.gradient.dot(p) + self.offset
    }
}

/// Tangent of `theta` at `expansion`; over-estimates `theta` everywhere.
pub fn theta_linearized(expansion: &Point2, g: &Point2, geom: &OcclusionGeom) -> Affine2 {
    let gradient = theta_gradient(expansion, g, geom);
    let value = theta(expansion, g, geom);
    Affine2 {
        gradient,
        offset: value - gradient.dot(expansion),
    }
}

/// One linearized occlusion constraint `Phi(p, xi_i) + Theta_hat(p) <= 0`,
/// held as the rotated cone `R^2 |p - g|^2 <= xi_i · (-Theta_hat(p))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateConstraint {
    pub sample_index: usize,
    pub obstacle_index: usize,
    pub radius: f64,
    pub sample: Point2,
    pub theta_affine: Affine2,
}

impl SurrogateConstraint {
    pub fn phi(&self, p: &Point2, xi: f64) -> f64 {
        self.radius * self.radius * (p - self.sample).norm_squared() / xi
    }

    /// `Phi + Theta_hat`; non-positive when the constraint holds.
    pub fn value(&self, p: &Point2, xi: f64) -> f64 {
        self.phi(p, xi) + self.theta_affine.eval(p)
    }

    /// Cone form: `(lhs, xi, -Theta_hat)` with `lhs <= xi · (-Theta_hat)` required.
    pub fn cone_sides(&self, p: &Point2, xi: f64) -> (f64, f64, f64) {
        (
            self.radius * self.radius * (p - self.sample).norm_squared(),
            xi,
            -self.theta_affine.eval(p),
        )
    }

    pub fn cone_satisfied(&self, p: &Point2, xi: f64, tol: f64) -> bool {
        let (lhs, u, v) = self.cone_sides(p, xi);
        u >= XI_FLOOR - tol && v >= -tol && lhs <= u * v + tol
    }
}

/// The surrogate constraints plus per-sample slack couplings
/// `w_i >= xi_i - 1`, `w_i >= 0`, `xi_i >= xi_floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionConstraintSet {
    pub expansion: Point2,
    pub constraints: Vec<SurrogateConstraint>,
    /// Sample indices carrying a `(w_i, xi_i)` coupling, one per sample.
    pub couplings: Vec<usize>,
    pub xi_floor: f64,
}

/// Builds the surrogate constraints for every (sample, obstacle) pair whose
/// obstacle lies between the expansion point and the sample.
pub fn build_occlusion_constraints(
    expansion: &Point2,
    samples: &SampleSet,
    geoms: &[OcclusionGeom],
    xi_floor: f64,
) -> OcclusionConstraintSet {
    let per_sample: Vec<Vec<SurrogateConstraint>> = samples
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            geoms
                .iter()
                .enumerate()
                .filter(|(_, geom)| (geom.center - g).norm() >= GEOM_TOL && between(expansion, g, &geom.center))
                .map(|(k, geom)| SurrogateConstraint {
                    sample_index: i,
                    obstacle_index: k,
                    radius: geom.radius,
                    sample: *g,
                    theta_affine: theta_linearized(expansion, g, geom),
                })
                .collect()
        })
        .collect();
    OcclusionConstraintSet {
        expansion: *expansion,
        constraints: per_sample.into_iter().flatten().collect(),
        couplings: (0..samples.len()).collect(),
        xi_floor,
    }
}

/// Closed-form slack update with the trajectory fixed: each `xi_i` is the
/// tight value over the obstacles gating sample `i`, clamped to
/// `[xi_floor, XI_CAP]`, and `w_i = max(xi_i - 1, 0)`.
pub fn tight_slacks(p: &Point2, samples: &SampleSet, geoms: &[OcclusionGeom], xi_floor: f64) -> (Vec<f64>, Vec<f64>) {
    let xi: Vec<f64> = samples
        .samples
        .par_iter()
        .map(|g| {
            geoms
                .iter()
                .filter(|geom| (geom.center - g).norm() >= GEOM_TOL && between(p, g, &geom.center))
                .map(|geom| match xi_tight(p, g, geom) {
                    Ok(v) => v,
                    Err(_) => XI_CAP,
                })
                .fold(xi_floor, f64::max)
                .clamp(xi_floor, XI_CAP)
        })
        .collect();
    let w = xi.iter().map(|x| (x - 1.0).max(0.0)).collect();
    (xi, w)
}
