//! Polytope separation through the dual of the minimum-distance problem, and
//! the affine clearance constraints built from fixed duals.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convexprog::{self, ConicProgram, LinExpr, SolveStatus};
use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::geometry::{cross, rotation, ConvexPolytope, Point2, Vector2};

/// Tolerance on `|H'λ| <= 1`.
pub const NORM_TOL: f64 = 1e-8;
/// Tolerance on `|G'μ + H'λ|`.
pub const STATIONARITY_TOL: f64 = 1e-6;

/// Ego body in its own frame, origin at the rear-axle center.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoShape {
    pub body: ConvexPolytope,
}

impl EgoShape {
    pub fn new(body: ConvexPolytope) -> Result<Self> {
        if !body.contains(&Point2::zeros(), 0.0) {
            return Err(Error::DegenerateGeometry("ego body must contain its origin".into()));
        }
        Ok(Self { body })
    }

    /// Car-like rectangle with `rear_overhang` behind the axle.
    pub fn car(length: f64, width: f64, rear_overhang: f64) -> Result<Self> {
        let x0 = -rear_overhang;
        let x1 = length - rear_overhang;
        let h = width / 2.0;
        let body = ConvexPolytope::from_vertices(&[
            Point2::new(x0, -h),
            Point2::new(x1, -h),
            Point2::new(x1, h),
            Point2::new(x0, h),
        ])?;
        Self::new(body)
    }

    /// Largest distance from the origin to the body.
    pub fn reach(&self) -> f64 {
        self.body.max_vertex_norm()
    }

    pub fn at(&self, s: &State) -> ConvexPolytope {
        self.body.transform(s.heading, &s.position())
    }
}

impl Default for EgoShape {
    /// 4.69 m × 1.75 m sedan footprint, 0.91 m rear overhang.
    fn default() -> Self {
        Self::car(4.69, 1.75, 0.91).expect("default ego is valid")
    }
}

/// World-frame halfspaces `G x <= g`.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspaces {
    pub normals: Vec<Vector2>,
    pub offsets: Vec<f64>,
}

impl Halfspaces {
    pub fn of(poly: &ConvexPolytope) -> Self {
        Self {
            normals: poly.normals().to_vec(),
            offsets: poly.offsets().to_vec(),
        }
    }

    pub fn contains(&self, x: &Point2, tol: f64) -> bool {
        self.normals.iter().zip(&self.offsets).all(|(n, b)| n.dot(x) <= b + tol)
    }
}

pub fn ego_halfspaces(shape: &EgoShape, s: &State) -> Halfspaces {
    let r = rotation(s.heading);
    let p = s.position();
    let normals: Vec<Vector2> = shape.body.normals().iter().map(|n| r * n).collect();
    let offsets = shape
        .body
        .offsets()
        .iter()
        .zip(&normals)
        .map(|(g0, n)| g0 + n.dot(&p))
        .collect();
    Halfspaces { normals, offsets }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPair {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub value: f64,
}

impl DualPair {
    /// `H'λ`, the unit-bounded separating direction (obstacle toward ego).
    pub fn direction(&self, obstacle: &Halfspaces) -> Vector2 {
        combine(&obstacle.normals, &self.lambda)
    }

    pub fn stationarity_residual(&self, ego: &Halfspaces, obstacle: &Halfspaces) -> f64 {
        (combine(&ego.normals, &self.mu) + combine(&obstacle.normals, &self.lambda)).norm()
    }

    pub fn objective(&self, ego: &Halfspaces, obstacle: &Halfspaces) -> f64 {
        -dot(&self.lambda, &obstacle.offsets) - dot(&self.mu, &ego.offsets)
    }

    pub fn check(&self, ego: &Halfspaces, obstacle: &Halfspaces) -> std::result::Result<(), String> {
        if self.lambda.len() != obstacle.normals.len() || self.mu.len() != ego.normals.len() {
            return Err("dual sizes do not match face counts".into());
        }
        if self.lambda.iter().chain(&self.mu).any(|v| !(*v >= 0.0)) {
            return Err("negative or non-finite multiplier".into());
        }
        let n = self.direction(obstacle).norm();
        if n > 1.0 + NORM_TOL {
            return Err(format!("|H'λ| = {n} exceeds 1"));
        }
        let r = self.stationarity_residual(ego, obstacle);
        if r > STATIONARITY_TOL {
            return Err(format!("stationarity residual {r:e}"));
        }
        Ok(())
    }
}

fn combine(normals: &[Vector2], weights: &[f64]) -> Vector2 {
    normals.iter().zip(weights).fold(Vector2::zeros(), |acc, (n, w)| acc + n * *w)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Writes `d` as a nonnegative combination of at most two adjacent normals.
/// `normals` must be in counter-clockwise order (as for any polytope here).
fn conic_weights(normals: &[Vector2], d: &Vector2) -> Vec<f64> {
    let m = normals.len();
    let mut w = vec![0.0; m];
    let (j, _) = normals
        .iter()
        .enumerate()
        .map(|(i, n)| (i, n.dot(d)))
        .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
    let k = if cross(&normals[j], d) >= 0.0 { (j + 1) % m } else { (j + m - 1) % m };
    let (a, b) = (normals[j], normals[k]);
    let det = cross(&a, &b);
    if det.abs() < 1e-12 {
        w[j] = d.dot(&a).max(0.0);
        return w;
    }
    w[j] = (cross(d, &b) / det).max(0.0);
    w[k] = (cross(&a, d) / det).max(0.0);
    w
}

/// Dual pair certifying separation along unit direction `n` (obstacle toward
/// ego). Its value is `min_ego n·x - max_obs n·y`, negative under overlap.
pub fn dual_for_direction(ego: &Halfspaces, obstacle: &Halfspaces, n: &Vector2) -> DualPair {
    let lambda = conic_weights(&obstacle.normals, n);
    let mu = conic_weights(&ego.normals, &-n);
    let mut pair = DualPair { lambda, mu, value: 0.0 };
    pair.value = pair.objective(ego, obstacle);
    pair
}

/// Axis among both polytopes' normals with the least overlap, oriented from
/// `obstacle` toward `ego`.
fn least_overlap_axis(ego: &ConvexPolytope, obstacle: &ConvexPolytope) -> Vector2 {
    let support = |p: &ConvexPolytope, n: &Vector2| p.vertices().iter().map(|v| n.dot(v)).fold(f64::NEG_INFINITY, f64::max);
    let mut best = (f64::NEG_INFINITY, Vector2::new(1.0, 0.0));
    for n in obstacle.normals().iter().chain(ego.normals()) {
        for cand in [*n, -n] {
            // separation along cand: min over ego minus max over obstacle
            let sep = -support(ego, &-cand) - support(obstacle, &cand);
            if sep > best.0 {
                best = (sep, cand);
            }
        }
    }
    best.1
}

/// Solves the dual separation problem
/// `max -λ'h - μ'g  s.t. |H'λ| <= 1, G'μ + H'λ = 0, λ, μ >= 0`.
pub fn solve_dual(ego: &Halfspaces, obstacle: &Halfspaces) -> Result<DualPair> {
    let no = obstacle.normals.len();
    let ne = ego.normals.len();
    let mut prog = ConicProgram::new(no + ne);
    for (i, h) in obstacle.offsets.iter().enumerate() {
        prog.add_linear_cost(i, *h);
        prog.add_bounds(i, 0.0, f64::INFINITY);
    }
    for (j, g) in ego.offsets.iter().enumerate() {
        prog.add_linear_cost(no + j, *g);
        prog.add_bounds(no + j, 0.0, f64::INFINITY);
    }
    let mut w = Vec::with_capacity(2);
    for axis in 0..2 {
        let mut eq = LinExpr::default();
        let mut wi = LinExpr::default();
        for (i, n) in obstacle.normals.iter().enumerate() {
            eq = eq.term(i, n[axis]);
            wi = wi.term(i, n[axis]);
        }
        for (j, n) in ego.normals.iter().enumerate() {
            eq = eq.term(no + j, n[axis]);
        }
        prog.add_eq(eq);
        w.push(wi);
    }
    prog.add_rotated_cone(LinExpr::constant(1.0), LinExpr::constant(1.0), w);

    let sol = convexprog::solve_default(&prog);
    if sol.status != SolveStatus::Optimal {
        return Err(Error::SolverFailure(format!("dual separation solve ended with {:?}", sol.status)));
    }
    let raw = DualPair {
        lambda: sol.values[..no].iter().map(|v| v.max(0.0)).collect(),
        mu: sol.values[no..].iter().map(|v| v.max(0.0)).collect(),
        value: 0.0,
    };
    // Rebuild an exactly stationary pair along the solver's direction.
    let dir = raw.direction(obstacle);
    let norm = dir.norm();
    if norm < 1e-6 {
        let mut zero = raw;
        zero.lambda.iter_mut().chain(zero.mu.iter_mut()).for_each(|v| *v = 0.0);
        zero.value = 0.0;
        return Ok(zero);
    }
    Ok(dual_for_direction(ego, obstacle, &(dir / norm)))
}

/// Dual pair for an ego pose against an obstacle. For overlapping bodies the
/// solver optimum is zero and carries no direction, so the least-overlap
/// axis is used instead; its value is then negative.
pub fn pose_dual(shape: &EgoShape, s: &State, obstacle: &ConvexPolytope) -> Result<DualPair> {
    let ego = ego_halfspaces(shape, s);
    let obs = Halfspaces::of(obstacle);
    let pair = solve_dual(&ego, &obs)?;
    if pair.value > 1e-7 {
        return Ok(pair);
    }
    let body = shape.at(s);
    let axis = least_overlap_axis(&body, obstacle);
    Ok(dual_for_direction(&ego, &obs, &axis))
}

/// `a·p + b >= d0` for one (obstacle, step), with the heading frozen at
/// `heading_ref`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionRow {
    pub obstacle: usize,
    pub step: usize,
    pub a: Vector2,
    pub b: f64,
    pub heading_ref: f64,
    pub stationarity_residual: f64,
}

impl CollisionRow {
    pub fn margin(&self, p: &Point2, d0: f64) -> f64 {
        self.a.dot(p) + self.b - d0
    }
}

/// Affine clearance rows from duals fixed at the reference:
/// `-λ'h - μ'(g0 + G0 R(θ_ref)' p) >= d0`.
pub fn linearized_collision_constraints(
    duals: &[Vec<DualPair>],
    reference: &[State],
    shape: &EgoShape,
    obstacles: &[ConvexPolytope],
) -> Result<Vec<CollisionRow>> {
    let mut rows = Vec::with_capacity(duals.len() * reference.len());
    for (k, per_step) in duals.iter().enumerate() {
        let obs = Halfspaces::of(&obstacles[k]);
        for (h, pair) in per_step.iter().enumerate() {
            let s = &reference[h];
            let ego = ego_halfspaces(shape, s);
            pair.check(&ego, &obs).map_err(|reason| Error::StaleDuals {
                obstacle: k,
                step: h,
                reason,
            })?;
            let r = rotation(s.heading);
            let g0mu = combine(shape.body.normals(), &pair.mu);
            rows.push(CollisionRow {
                obstacle: k,
                step: h,
                a: -(r * g0mu),
                b: -dot(&pair.lambda, &obs.offsets) - dot(&pair.mu, shape.body.offsets()),
                heading_ref: s.heading,
                stationarity_residual: pair.stationarity_residual(&ego, &obs),
            });
        }
    }
    Ok(rows)
}

/// Duals for every (obstacle, step) of `reference`, indexed `[k][h]`.
pub fn reference_duals(shape: &EgoShape, reference: &[State], obstacles: &[ConvexPolytope]) -> Result<Vec<Vec<DualPair>>> {
    let pairs: Vec<(usize, usize)> = (0..obstacles.len()).flat_map(|k| (0..reference.len()).map(move |h| (k, h))).collect();
    let solved: Vec<Result<DualPair>> = pairs
        .par_iter()
        .map(|&(k, h)| pose_dual(shape, &reference[h], &obstacles[k]))
        .collect();
    let mut out = vec![Vec::with_capacity(reference.len()); obstacles.len()];
    for ((k, _), r) in pairs.into_iter().zip(solved) {
        out[k].push(r?);
    }
    Ok(out)
}
